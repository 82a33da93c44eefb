//! Central finite-difference validation of analytic gradients.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub per_parameter: BTreeMap<String, f64>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    /// Parameters at or above the tolerance, worst first.
    pub fn failures(&self) -> Vec<(&str, f64)> {
        let mut f: Vec<(&str, f64)> = self
            .per_parameter
            .iter()
            .filter(|(_, &e)| e >= self.tolerance)
            .map(|(n, &e)| (n.as_str(), e))
            .collect();
        f.sort_by(|a, b| b.1.total_cmp(&a.1));
        f
    }
}

/// Options for [`grad_check_with`].
#[derive(Clone, Debug, Default)]
pub struct GradCheckOptions<'a> {
    /// Adds a unit offset to the analytic gradient of this parameter before
    /// comparison. Fault-injection hook for testing the checker itself.
    pub corrupt: Option<&'a str>,
}

/// Floor on the relative-error denominator. Central differences of an O(1)
/// loss at step 1e-5 carry rounding noise near 1e-11, so a parameter whose
/// true gradient vanishes (attention key biases, for one) would otherwise
/// report that noise as error.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares the reverse-mode gradient of `f` against central differences
/// with step `step`, for every scalar in `params`.
///
/// `f` builds a one-element loss on the graph it is given. The per-parameter
/// error is `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, REL_FLOOR)`.
pub fn grad_check<F>(params: &ParamStore, step: f64, tol: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    grad_check_with(params, step, tol, &GradCheckOptions::default(), f)
}

pub fn grad_check_with<F>(
    params: &ParamStore,
    step: f64,
    tol: f64,
    opts: &GradCheckOptions<'_>,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {step}")));
    }
    let analytic: Vec<Option<crate::numcore::Tensor>> = {
        let mut g = Graph::with_params(params);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        let mut out = vec![None; params.len()];
        for (id, t) in grads.param_grads() {
            out[id.index()] = Some(t);
        }
        out
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        let v = g.value(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "grad_check objective" })
        }
    };

    let mut work = params.clone();
    let mut per_parameter = BTreeMap::new();
    let mut max_rel_error: f64 = 0.0;
    for id in params.ids() {
        let n = params.get(id).numel();
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = work.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let mut exact: Vec<f64> = match &analytic[id.index()] {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; n],
        };
        let name = params.name(id);
        if opts.corrupt == Some(name) {
            for x in &mut exact {
                *x += 1.0;
            }
        }
        let diff = exact.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let na = exact.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = diff / na.max(nn).max(REL_FLOOR);
        max_rel_error = max_rel_error.max(rel);
        per_parameter.insert(name.to_string(), rel);
    }
    Ok(GradReport {
        max_rel_error,
        per_parameter,
        tolerance: tol,
    })
}
