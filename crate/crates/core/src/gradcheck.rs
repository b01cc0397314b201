//! Central-difference gradient verification.
//!
//! The caller runs its analytic backward pass first and leaves the gradients
//! in the store; `grad_check` then perturbs every scalar parameter with a
//! value-scaled step and compares.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::param::ParamStore;

#[derive(Debug)]
pub struct GradCheckReport {
    /// Max relative error per parameter tensor.
    pub per_param: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite errors"))
            .map(|(k, &v)| (k.as_str(), v))
    }
}

/// Compare the analytic gradients stored in `params` against central
/// differences of `f`. The step is 1e-5 * (1 + |value|) per scalar.
pub fn grad_check<F>(params: &mut ParamStore, f: F, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut per_param = BTreeMap::new();
    let mut max_rel = 0.0f64;

    for name in names {
        let len = params.value(&name).len();
        let mut worst = 0.0f64;
        for i in 0..len {
            let orig = params.value(&name).data()[i];
            let h = 1e-5 * (1.0 + orig.abs());

            params.value_mut(&name).data_mut()[i] = orig + h;
            let fp = f(params)?;
            params.value_mut(&name).data_mut()[i] = orig - h;
            let fm = f(params)?;
            params.value_mut(&name).data_mut()[i] = orig;

            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective while perturbing parameter {name}[{i}]"
                )));
            }
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = params.grad(&name).data()[i];
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        max_rel = max_rel.max(worst);
        per_param.insert(name, worst);
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        tol,
    })
}
