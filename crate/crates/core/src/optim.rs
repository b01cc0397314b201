//! Adam with decoupled weight decay. Moments are keyed by parameter name and
//! created lazily, so the same state type serves any model.

use std::collections::BTreeMap;

use crate::param::NamedParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub cfg: AdamConfig,
    pub step_count: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(cfg: AdamConfig) -> Self {
        OptimizerState {
            cfg,
            step_count: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step<P: NamedParams, G: NamedParams>(&mut self, params: &mut P, grads: &G) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let cfg = self.cfg;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);

        let mut grad_map: BTreeMap<String, &Tensor> = BTreeMap::new();
        grads.visit(&mut |name, g| {
            grad_map.insert(name, g);
        });

        let first = &mut self.first;
        let second = &mut self.second;
        params.visit_mut(&mut |name, value| {
            let g = grad_map
                .get(&name)
                .unwrap_or_else(|| panic!("no gradient for parameter {name}"));
            debug_assert_eq!(g.shape(), value.shape());
            let m = first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let v = second
                .entry(name)
                .or_insert_with(|| Tensor::zeros(value.shape()));
            for ((th, gr), (mi, vi)) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gr;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gr * gr;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *th -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *th);
            }
        });
    }
}
