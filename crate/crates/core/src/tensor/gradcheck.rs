//! Central finite differences over every scalar of a parameter set.
//!
//! Only forward evaluations are used here, so the oracle stays independent
//! of the backward rules it is checking.

use super::{Gradients, ParamId, Parameters};
use crate::error::Result;

/// Numerical gradient of `f` with respect to every element of every parameter.
pub fn central_difference<F>(params: &Parameters, h: f64, mut f: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&Parameters) -> Result<f64>,
{
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for id in params.ids() {
        let n = params.get(id).len();
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            *gi = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Largest relative error among elements above the absolute floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest numeric derivative seen, for judging the floor.
    pub max_abs_grad: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Compares analytic gradients against central differences.
///
/// An element passes when `|a - n| <= abs_floor` or
/// `|a - n| / max(|a|, |n|) <= rel_tol`.
pub fn gradcheck<F>(
    params: &Parameters,
    analytic: &Gradients,
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&Parameters) -> Result<f64>,
{
    let numeric = central_difference(params, h, f)?;
    let mut report = GradCheckReport::default();
    for (idx, num) in numeric.iter().enumerate() {
        let id = ParamId(idx);
        let zeros = vec![0.0; num.len()];
        let ana = analytic.get(id).unwrap_or(&zeros);
        for (i, (&a, &n)) in ana.iter().zip(num).enumerate() {
            report.checked += 1;
            let diff = (a - n).abs();
            let scale = a.abs().max(n.abs());
            report.max_abs_err = report.max_abs_err.max(diff);
            report.max_abs_grad = report.max_abs_grad.max(n.abs());
            let rel = if scale > 0.0 { diff / scale } else { 0.0 };
            if diff > abs_floor {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel > rel_tol {
                    report.mismatches.push(Mismatch {
                        param: params.name(id).to_string(),
                        index: i,
                        analytic: a,
                        numeric: n,
                    });
                }
            }
        }
    }
    Ok(report)
}
