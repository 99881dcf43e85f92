//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};

/// Entries whose numeric and analytic derivatives are both at most this
/// are counted as inactive (dead relu units, unused branches). They still
/// enter the error.
pub const ACTIVITY_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// max |analytic - numeric| / max(1, |numeric|) over all entries.
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {v} during grad_check")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `h`, for every scalar in `ids`.
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("grad_check step must be positive, got {h}")));
    }
    store.zero_grad();
    {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        g.backward_into(loss, store)?;
    }
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &id in ids {
        for i in 0..store.get(id).tensor.len() {
            let orig = store.get(id).tensor.data()[i];
            store.get_mut(id).tensor.data_mut()[i] = orig + h;
            let plus = eval(&f, store);
            store.get_mut(id).tensor.data_mut()[i] = orig - h;
            let minus = eval(&f, store);
            store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let analytic = store.get(id).grad.data()[i];
            let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            if numeric.abs() <= ACTIVITY_FLOOR && analytic.abs() <= ACTIVITY_FLOOR {
                report.skipped += 1;
            } else {
                report.checked += 1;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_of_squares_at_three() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![3.0]));
        let report = grad_check(&mut store, &[id], 1e-5, |g, s| {
            let x = g.param(s, id);
            let sq = g.square(x);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(store.get(id).grad.data(), &[6.0]);
        assert!(report.max_rel_error < 1e-8);
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn dead_relu_entries_are_skipped() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![-1.0, 2.0]));
        let report = grad_check(&mut store, &[id], 1e-5, |g, s| {
            let x = g.param(s, id);
            let r = g.relu(x);
            Ok(g.sum(r))
        })
        .unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![0.0]));
        let res = grad_check(&mut store, &[id], 1e-5, |g, s| {
            let x = g.param(s, id);
            let r = g.sqrt(x);
            Ok(g.sum(r))
        });
        assert!(matches!(res, Err(Error::Numeric(_))));
    }
}
