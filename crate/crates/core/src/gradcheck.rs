//! Central finite-difference checks for analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{EditError, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Below this magnitude both derivatives count as zero and the error is
/// measured in absolute terms.
pub const FLAT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// Worst error over the probes: relative where the gradient is non-flat,
    /// absolute where both derivatives are below [`FLAT_TOL`].
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub worst_coordinate: usize,
    pub probes: usize,
}

/// Error between an analytic and a numeric derivative.
pub fn derivative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < FLAT_TOL {
        diff
    } else {
        diff / scale
    }
}

/// Picks `count` coordinates out of `len`, distinct when `count <= len`.
pub fn probe_coordinates(len: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(EditError::InvalidArgument(
            "probe count must be at least 1".into(),
        ));
    }
    if len == 0 {
        return Err(EditError::InvalidArgument("nothing to probe".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if count <= len {
        Ok(sample(&mut rng, len, count).into_vec())
    } else {
        Ok((0..count).map(|_| rng.random_range(0..len)).collect())
    }
}

/// Compares `analytic` against central differences of `f` at `x` on the
/// given coordinates.
pub fn check_gradient<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    step: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != x.len() {
        return Err(EditError::shape(
            format!("{} gradient entries", x.len()),
            format!("{}", analytic.len()),
        ));
    }
    if coords.is_empty() {
        return Err(EditError::InvalidArgument(
            "probe count must be at least 1".into(),
        ));
    }
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        worst_coordinate: coords[0],
        probes: coords.len(),
    };
    let mut probe = x.to_vec();
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe)?;
        probe[i] = orig - step;
        let minus = f(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = derivative_error(analytic[i], numeric);
        report.max_abs_error = report.max_abs_error.max((analytic[i] - numeric).abs());
        if err > report.max_relative_error || !err.is_finite() {
            report.max_relative_error = err;
            report.worst_coordinate = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_gradient_of_a_cubic() {
        let x = vec![0.3, -1.1, 2.0];
        let f = |v: &[f64]| Ok(v[0].powi(3) + v[0] * v[1] + (v[2]).sin());
        let grad = vec![3.0 * 0.09 + -1.1, 0.3, 2.0f64.cos()];
        let r = check_gradient(f, &x, &grad, &[0, 1, 2], DEFAULT_STEP).unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let f = |v: &[f64]| Ok(v[0] * v[0]);
        let r = check_gradient(f, &[1.0], &[3.0], &[0], DEFAULT_STEP).unwrap();
        assert!(r.max_relative_error > 0.3);
    }

    #[test]
    fn flat_function_uses_absolute_error() {
        let f = |_: &[f64]| Ok(4.0);
        let r = check_gradient(f, &[1.0, 2.0], &[0.0, 0.0], &[0, 1], DEFAULT_STEP).unwrap();
        assert!(r.max_relative_error < 1e-8);
    }

    #[test]
    fn zero_probes_rejected() {
        assert!(probe_coordinates(10, 0, 1).is_err());
        assert!(check_gradient(|_| Ok(0.0), &[1.0], &[0.0], &[], DEFAULT_STEP).is_err());
    }

    #[test]
    fn probes_are_distinct_and_seeded() {
        let a = probe_coordinates(100, 64, 3).unwrap();
        let b = probe_coordinates(100, 64, 3).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 64);
        assert_eq!(probe_coordinates(5, 8, 3).unwrap().len(), 8);
    }
}
