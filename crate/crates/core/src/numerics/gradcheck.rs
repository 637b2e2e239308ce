//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are judged on absolute error instead. Central
/// differences of an O(1) loss at eps = 1e-5 carry about 1e-10 of f64
/// round-off, which this floor keeps well under the tolerance.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// Largest relative error a passing check may report.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Scalar entries compared.
    pub checked: usize,
}

/// Compares analytic gradients of `model_fn` against central differences
/// over every trainable entry of `store`. Frozen parameters are skipped.
pub fn grad_check<F>(model_fn: F, store: &ParamStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Input(format!(
            "grad_check eps {eps} outside [1e-6, 1e-3]"
        )));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = model_fn(&mut g, s)?;
        let v = g.value(loss).data()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        Ok(v)
    };

    let mut graph = Graph::new();
    let loss = model_fn(&mut graph, store)?;
    if !graph.value(loss).data()[0].is_finite() {
        return Err(Error::NonFinite("grad_check loss".into()));
    }
    let grads = graph.backward(loss)?;
    let mut analytic: Vec<Option<&[f64]>> = vec![None; store.len()];
    for (id, g) in &grads.by_param {
        analytic[*id] = Some(g);
    }

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (id, grad) in analytic.iter().enumerate() {
        if !store.value(id).requires_grad() {
            continue;
        }
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.value_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.as_ref().map_or(0.0, |g| g[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(3.0)).unwrap();
        let report = grad_check(
            |g, s| {
                let w = g.param(s, "w")?;
                let sq = g.mul(w, w)?;
                g.sum(sq)
            },
            &store,
            1e-4,
        )
        .unwrap();
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn frozen_parameters_are_excluded() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.5)).unwrap();
        store
            .insert("b", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        store.set_trainable("b", false).unwrap();
        let report = grad_check(
            |g, s| {
                let a = g.param(s, "a")?;
                let b = g.param(s, "b")?;
                let sa = g.sum(a)?;
                let sb = g.sum(b)?;
                let p = g.mul(sa, sb)?;
                g.sum(p)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let store = ParamStore::new();
        let r = grad_check(|g, _| g.input(Tensor::scalar(0.0)), &store, 1e-2);
        assert!(r.is_err());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0)).unwrap();
        let r = grad_check(
            |g, s| {
                let w = g.param(s, "w")?;
                g.scale(w, f64::INFINITY)
            },
            &store,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
