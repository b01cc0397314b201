//! Named parameter storage: each entry holds a value tensor and a gradient
//! tensor of identical shape. Iteration order is the sorted name order, which
//! pins checkpoint layout, optimizer traversal and averaging.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        let prev = self.entries.insert(name.to_string(), Param { value, grad });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.get(name).value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.get_mut(name).value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.get(name).grad
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.get_mut(name).grad
    }

    fn get(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn get_mut(&mut self, name: &str) -> &mut Param {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(0.0);
        }
    }

    /// Names in iteration (sorted) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_tensors(&self) -> usize {
        self.entries.len()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        for (name, p) in self.iter() {
            if !p.value.all_finite() {
                return Err(Error::NonFinite(format!("{what}: parameter {name}")));
            }
        }
        Ok(())
    }

    /// True when both stores hold the same names with identical shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|((na, pa), (nb, pb))| na == nb && pa.value.shape() == pb.value.shape())
    }

    /// Elementwise arithmetic mean over identically shaped stores.
    pub fn average(stores: &[&ParamStore]) -> Result<ParamStore> {
        let first = stores
            .first()
            .ok_or_else(|| Error::Invalid("average over empty model list".into()))?;
        for s in &stores[1..] {
            if !first.same_layout(s) {
                return Err(Error::Shape("averaging models with different layouts".into()));
            }
        }
        let mut out = (*first).clone();
        let inv = 1.0 / stores.len() as f64;
        for (name, p) in out.iter_mut() {
            let data = p.value.data_mut();
            data.iter_mut().for_each(|x| *x = 0.0);
            for s in stores {
                for (o, &v) in data.iter_mut().zip(s.value(name).data()) {
                    *o += v;
                }
            }
            data.iter_mut().for_each(|x| *x *= inv);
            p.grad.fill(0.0);
        }
        Ok(out)
    }

    /// Max absolute difference across all parameters; None if layouts differ.
    pub fn max_abs_diff(&self, other: &ParamStore) -> Option<f64> {
        if !self.same_layout(other) {
            return None;
        }
        let mut m = 0.0f64;
        for ((_, a), (_, b)) in self.iter().zip(other.iter()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                m = m.max((x - y).abs());
            }
        }
        Some(m)
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.same_layout(other)
            && self.iter().zip(other.iter()).all(|((_, a), (_, b))| {
                a.value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// A model whose parameters can be walked by name. The visit order is the
/// struct's own field order; conversions to `ParamStore` re-sort by name.
pub trait NamedParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor));

    fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        self.visit(&mut |name, t| store.insert(&name, t.clone()));
        store
    }

    /// Copy values back from a store holding exactly this model's layout.
    fn load_store(&mut self, store: &ParamStore) -> Result<()> {
        let mut count = 0usize;
        let mut err: Option<Error> = None;
        self.visit_mut(&mut |name, t| {
            count += 1;
            if err.is_some() {
                return;
            }
            if !store.contains(&name) {
                err = Some(Error::Shape(format!("store is missing parameter {name}")));
                return;
            }
            let src = store.value(&name);
            if src.shape() != t.shape() {
                err = Some(Error::Shape(format!(
                    "parameter {name}: stored shape {:?} vs model shape {:?}",
                    src.shape(),
                    t.shape()
                )));
                return;
            }
            *t = src.clone();
        });
        if let Some(e) = err {
            return Err(e);
        }
        if count != store.num_tensors() {
            return Err(Error::Shape(format!(
                "store holds {} tensors, model has {count}",
                store.num_tensors()
            )));
        }
        Ok(())
    }

    fn num_scalars(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.len());
        total
    }
}

/// Truncated-normal initialization, std 0.02, matching ViT practice.
pub fn init_trunc_normal(shape: &[usize], rng: &mut RngStream) -> Tensor {
    init_trunc_normal_std(shape, 0.02, rng)
}

pub fn init_trunc_normal_std(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.trunc_normal(std);
    }
    t
}
