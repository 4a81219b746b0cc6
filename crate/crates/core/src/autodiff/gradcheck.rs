//! Central-difference verification of analytic gradients.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Outcome of a finite-difference sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn max_relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against `(f(p + eps) - f(p - eps)) / (2 eps)` for
/// every coordinate of every tensor in `params`.
///
/// `f` must be deterministic for fixed parameters; freeze any sampling
/// noise before calling.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(shape_err(
            "finite_diff_check",
            format!("{} parameters but {} gradients", params.len(), analytic.len()),
        ));
    }
    for (p, g) in params.iter().zip(analytic) {
        if p.shape() != g.shape() {
            return Err(shape_err(
                "finite_diff_check",
                format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("step {eps} must be positive")));
    }
    let mut eval = move |ps: &[Tensor]| -> Result<f64> {
        let v = f(ps)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "objective under finite differences".into(),
            });
        }
        Ok(v)
    };

    let numeric = numeric_gradients(&mut eval, params, eps)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
    };
    for (t, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&a, &n)) in a.data().iter().zip(n.data()).enumerate() {
            let err = max_relative_error(a, n);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((t, i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = n;
            }
        }
    }
    Ok(report)
}

/// Central-difference gradient of `f` at `params`, one tensor per parameter.
pub fn numeric_gradients<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut out: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for t in 0..work.len() {
        for i in 0..work[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let up = f(&work)?;
            work[t].data_mut()[i] = orig - eps;
            let down = f(&work)?;
            work[t].data_mut()[i] = orig;
            out[t].data_mut()[i] = (up - down) / (2.0 * eps);
        }
    }
    Ok(out)
}
