//! Central-difference gradient verification.

use super::{NumericsError, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(parameter index, flat coordinate)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub pass: bool,
}

/// Compares the analytic gradient returned by `f` with central differences
/// `(f(p + h) - f(p - h)) / 2h`, coordinate by coordinate.
///
/// `f` maps a full parameter set to `(value, gradients)`; only the value is
/// used at perturbed points. The relative error of a coordinate is
/// `|a - n| / max(|a|, |n|, 1e-8)` and the check passes iff the maximum is
/// below `tolerance`.
pub fn finite_difference_check<F, E>(
    mut f: F,
    params: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>), E>,
    E: From<NumericsError>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(NumericsError::InvalidArgument(format!("step must be positive, got {step}")).into());
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(NumericsError::NonFinite("gradient check objective").into());
    }
    if analytic.len() != params.len() {
        return Err(NumericsError::Shape(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            params.len()
        ))
        .into());
    }

    let mut probe: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        coordinates: 0,
        pass: true,
    };
    for p in 0..params.len() {
        if analytic[p].shape() != params[p].shape() {
            return Err(NumericsError::Shape(format!("gradient {p} has the wrong shape")).into());
        }
        for c in 0..params[p].len() {
            let orig = params[p].data()[c];
            probe[p].data_mut()[c] = orig + step;
            let (plus, _) = f(&probe)?;
            probe[p].data_mut()[c] = orig - step;
            let (minus, _) = f(&probe)?;
            probe[p].data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NumericsError::NonFinite("gradient check objective").into());
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[p].data()[c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some((p, c));
            }
        }
    }
    report.pass = report.max_rel_err < tolerance;
    Ok(report)
}
