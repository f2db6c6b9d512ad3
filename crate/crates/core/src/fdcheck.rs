//! Central-difference gradient verification used across the test suites.
//!
//! Comparison rule: every component must match within `rtol` *relative to the
//! gradient's own scale* (its largest component). A per-component relative
//! error is meaningless for components near zero, where central differences
//! carry O(eps*|f|/h) roundoff regardless of implementation quality.

/// Central finite-difference gradient of `f` with respect to `params`.
/// `f` must not retain state between calls; `params` is restored afterwards.
pub fn central_diff(params: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; params.len()];
    for k in 0..params.len() {
        let orig = params[k];
        params[k] = orig + h;
        let fp = f(params);
        params[k] = orig - h;
        let fm = f(params);
        params[k] = orig;
        grad[k] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest component error divided by the gradient scale.
pub fn max_scaled_err(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    let scale = analytic
        .iter()
        .chain(fd)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(
        scale > 1e-8,
        "gradient check instance is degenerate (scale {scale:.3e})"
    );
    analytic
        .iter()
        .zip(fd)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}
