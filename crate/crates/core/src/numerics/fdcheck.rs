//! Central finite-difference gradient checking.
//!
//! The check perturbs one parameter coordinate at a time and compares the
//! analytic gradient against `(f(x+h) - f(x-h)) / 2h`. It exercises only the
//! forward path of the code under test, so it is independent of the backward
//! implementation it validates.

use super::params::{ParamId, ParamSet};

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Relative error with a unit guard: `|a - n| / max(|a|, |n|, 1)`.
///
/// The guard keeps roundoff noise on near-zero gradients from registering as
/// huge relative errors; callers should scale test problems so interesting
/// gradients are O(1).
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Worst coordinate found by [`check_params`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// Numeric gradient of `loss_fn` w.r.t. one parameter, by central differences.
pub fn numeric_gradient<F>(
    ps: &mut ParamSet,
    id: ParamId,
    h: f64,
    mut loss_fn: F,
) -> super::Result<Vec<f64>>
where
    F: FnMut(&ParamSet) -> super::Result<f64>,
{
    let n = ps.get(id).tensor.numel();
    let mut grad = vec![0.0; n];
    for j in 0..n {
        let orig = ps.get(id).tensor.values()[j];
        ps.get_mut(id).tensor.values_mut()[j] = orig + h;
        let up = loss_fn(ps)?;
        ps.get_mut(id).tensor.values_mut()[j] = orig - h;
        let down = loss_fn(ps)?;
        ps.get_mut(id).tensor.values_mut()[j] = orig;
        grad[j] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Compare analytic gradients (already in the parameters' grad buffers)
/// against central finite differences of `loss_fn` for the given parameters.
pub fn check_params<F>(
    ps: &mut ParamSet,
    ids: &[ParamId],
    h: f64,
    mut loss_fn: F,
) -> super::Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> super::Result<f64>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    for &id in ids {
        let analytic = ps
            .get(id)
            .tensor
            .grad
            .clone()
            .ok_or_else(|| super::NumericsError::MissingGradient {
                name: ps.get(id).name.clone(),
            })?;
        let numeric = numeric_gradient(ps, id, h, &mut loss_fn)?;
        for (j, (&a, &nm)) in analytic.iter().zip(&numeric).enumerate() {
            let e = rel_error(a, nm);
            report.coords_checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_param = ps.get(id).name.clone();
                report.worst_index = j;
                report.analytic = a;
                report.numeric = nm;
            }
        }
    }
    Ok(report)
}
