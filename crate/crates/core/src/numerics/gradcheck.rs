//! Central finite-difference verification of analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};

pub const MIN_EPS: f64 = 1e-7;
pub const MAX_EPS: f64 = 1e-3;

/// Compares the analytic gradient returned by `loss_fn` at `params` against
/// central differences `(f(p + eps e_i) - f(p - eps e_i)) / 2 eps`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// `loss_fn` must be deterministic and smooth near `params`. Kinks (ReLU at
/// zero, hinge boundaries, `|x|` at zero) are outside the supported domain and
/// will generally produce large errors.
pub fn finite_difference_check<F>(mut loss_fn: F, params: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(MIN_EPS..=MAX_EPS).contains(&eps) {
        return Err(Error::Usage(format!("eps {eps} outside [{MIN_EPS}, {MAX_EPS}]")));
    }
    let (loss, analytic) = loss_fn(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss at base point is {loss}")));
    }
    analytic.ensure_dims(params.dims(), "analytic gradient")?;

    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (plus, _) = loss_fn(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let (minus, _) = loss_fn(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at perturbed coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
