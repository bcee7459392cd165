//! Central-difference gradient checks.

use crate::error::{GradError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GradError::NonFinite(what.to_string()))
    }
}

/// Compares the reverse-mode gradient of scalar `f` at `point` against
/// central differences with the given step. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::new();
        let x = g.variable(point.clone());
        let y = f(&g, x)?;
        finite(y.item(), "function value")?;
        let grads = g.backward(y)?;
        grads.wrt(x).expect("leaf gradient").to_vec()
    };
    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::new();
        let x = g.constant(t);
        let v = f(&g, x)?.item();
        finite(v, "perturbed function value")
    };
    let mut worst = 0.0f64;
    for (k, a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[k] += step;
        let mut minus = point.clone();
        minus.data_mut()[k] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(rel_err(*a, numeric));
    }
    Ok(worst)
}

/// Same check over every grad-enabled parameter of a store.
pub fn grad_check_params<F>(store: &ParamStore, f: F, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let analytic = {
        let g = Graph::new();
        let y = f(&g, store)?;
        finite(y.item(), "function value")?;
        g.backward(y)?
    };
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for id in store.ids() {
        if !store.get(id).grad_enabled() {
            continue;
        }
        let grad = analytic.param(id).map(|g| g.to_vec());
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            let mut eval = |v: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[k] = v;
                let g = Graph::new();
                let y = f(&g, &probe)?.item();
                finite(y, "perturbed function value")
            };
            let up = eval(orig + step)?;
            let down = eval(orig - step)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.as_ref().map(|g| g[k]).unwrap_or(0.0);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}
