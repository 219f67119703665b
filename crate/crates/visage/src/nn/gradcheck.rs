//! Central finite differences for verifying analytic gradients.

use crate::real::Real;

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
pub fn central_diff<F: Real>(
    mut f: impl FnMut(&[F]) -> F,
    params: &[F],
    eps: f64,
) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + F::from_f64(eps);
            let hi = f(&p).to_f64();
            p[i] = orig - F::from_f64(eps);
            let lo = f(&p).to_f64();
            p[i] = orig;
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Worst relative error between an analytic gradient and its
/// finite-difference estimate.
pub fn max_rel_err<F: Real>(analytic: &[F], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    analytic
        .iter()
        .zip(fd.iter())
        .map(|(&a, &b)| rel_err(a.to_f64(), b))
        .fold(0.0, f64::max)
}
