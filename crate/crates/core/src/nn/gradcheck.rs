//! Central finite-difference checks for analytic gradients (64-bit only).

use super::{Grads, ParamTensor};
use crate::error::Result;

/// Denominator floor for relative errors of near-zero gradients.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares `analytic` against `(L(θ+h) − L(θ−h)) / 2h` for every entry of
/// every tensor, or for `limit` evenly strided entries per tensor.
pub fn check_gradients<F>(
    params: &mut [ParamTensor<f64>],
    analytic: &Grads<f64>,
    step: f64,
    limit: Option<usize>,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[ParamTensor<f64>]) -> Result<f64>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for t in 0..params.len() {
        let n = params[t].len();
        let stride = match limit {
            Some(l) if l > 0 && n > l => n.div_ceil(l),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = params[t].value[i];
            params[t].value[i] = orig + step;
            let up = loss(params)?;
            params[t].value[i] = orig - step;
            let down = loss(params)?;
            params[t].value[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic[t][i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((params[t].name.clone(), i));
            }
        }
    }
    Ok(report)
}
