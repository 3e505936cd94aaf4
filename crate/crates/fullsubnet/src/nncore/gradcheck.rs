//! Central finite-difference gradient oracle.
//!
//! Exhaustive per-parameter perturbation, so strictly for miniature
//! configurations; always 64-bit.

use crate::{Error, Result};

/// Numeric gradient of `loss_at` around `base`: per parameter,
/// `(f(p+d) - f(p-d)) / (2d)`. The closure receives a full parameter vector
/// and must install it before evaluating; the caller is responsible for
/// restoring `base` afterwards.
pub fn finite_diff_gradients(
    base: &[f64],
    mut loss_at: impl FnMut(&[f64]) -> f64,
    step: f64,
) -> Vec<f64> {
    assert!(step > 0.0, "step must be positive");
    let mut grads = vec![0.0; base.len()];
    let mut p = base.to_vec();
    for i in 0..base.len() {
        p[i] = base[i] + step;
        let lp = loss_at(&p);
        p[i] = base[i] - step;
        let lm = loss_at(&p);
        p[i] = base[i];
        grads[i] = (lp - lm) / (2.0 * step);
    }
    grads
}

/// `|a-b| / max(|a|, |b|, 1e-6)` — the comparison used everywhere a gradient
/// meets the oracle.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst element-wise [`relative_error`] over two congruent gradient vectors.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter().zip(b).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max)
}

/// As [`max_relative_error`] but fallible, for callers reporting rather than
/// asserting.
pub fn try_max_relative_error(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("gradient lengths {} vs {}", a.len(), b.len())));
    }
    Ok(max_relative_error(a, b))
}
