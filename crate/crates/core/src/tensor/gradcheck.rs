//! Central finite-difference checks for analytic gradients.

use serde::Serialize;

use super::params::{ParamGrads, ParamId, ParamStore};
use crate::error::Result;

/// One probed scalar parameter.
#[derive(Clone, Debug, Serialize)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference `(f(x+ε) - f(x-ε)) / 2ε` over a flat vector.
pub fn numeric_gradient(
    x: &[f64],
    eps: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        work[i] = x[i] + eps;
        let plus = f(&work)?;
        work[i] = x[i] - eps;
        let minus = f(&work)?;
        work[i] = x[i];
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares `grads` against central differences of `loss` at each probe.
/// The store is perturbed in place and restored after every probe.
pub fn check_params(
    store: &mut ParamStore<f64>,
    grads: &ParamGrads<f64>,
    probes: &[(ParamId, usize)],
    eps: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> Result<f64>,
) -> Result<Vec<Probe>> {
    let mut out = Vec::with_capacity(probes.len());
    for &(id, index) in probes {
        let orig = store.get(id).data()[index];
        store.get_mut(id).data_mut()[index] = orig + eps;
        let plus = loss(store)?;
        store.get_mut(id).data_mut()[index] = orig - eps;
        let minus = loss(store)?;
        store.get_mut(id).data_mut()[index] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads.get(id).map(|g| g[index]).unwrap_or(0.0);
        out.push(Probe {
            param: store.name(id).to_string(),
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(out)
}
