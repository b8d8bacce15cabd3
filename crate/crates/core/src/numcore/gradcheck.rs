//! Central finite-difference gradient checking.
//!
//! Only forward evaluations of the loss are used, so the check is
//! independent of the reverse pass it validates.

use super::array::{GradStore, ParamStore};
use crate::error::Result;

/// Default perturbation for central differences.
pub const FD_STEP: f64 = 1e-6;

/// Gradients smaller than this are compared absolutely rather than relatively;
/// central differences at `FD_STEP` carry roughly 1e-9 of rounding noise.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares `analytic` against central differences of `loss` for every entry
/// of every parameter (or every `stride`-th entry when `stride > 1`).
pub fn check_gradients<F>(params: &ParamStore, analytic: &GradStore, step: f64, stride: usize, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |a| a.len());
        let g = analytic.get(&name).expect("gradient store mirrors params");
        for i in (0..n).step_by(stride.max(1)) {
            let orig = params.get(&name).unwrap().data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + step;
            let up = loss(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - step;
            let down = loss(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = g.data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
