use crate::error::{Error, Result};
use crate::rng::{purpose, SplitMix64};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub samples: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss` at up to
/// `n_samples` distinct coordinates drawn from `seed`. Every coordinate is
/// checked when `n_samples >= params.len()`.
pub fn grad_check(
    params: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    n_samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} analytic derivatives",
            params.len(),
            analytic.len()
        )));
    }
    let mut idx: Vec<usize> = (0..params.len()).collect();
    if n_samples < idx.len() {
        SplitMix64::stream(seed, purpose::GRAD_CHECK, 0).shuffle(&mut idx);
        idx.truncate(n_samples);
        idx.sort_unstable();
    }
    let mut x = params.to_vec();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst_index: 0, samples: idx.len() };
    for &i in &idx {
        let orig = x[i];
        x[i] = orig + step;
        let up = loss(&x);
        x[i] = orig - step;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_relative_error || err.is_nan() {
            report.max_relative_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
