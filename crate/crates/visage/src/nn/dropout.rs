//! Inverted dropout.

use ndarray::{Array, Dimension};
use rand::Rng;

use crate::real::Real;

/// Samples an inverted-dropout mask and applies it: each element is zeroed
/// with probability `p`, survivors are scaled by `1/(1-p)` so the expected
/// value is unchanged. Draws happen in f64 so the stream is identical for
/// every float width. Returns `(output, mask)`; the backward pass is an
/// elementwise multiply by the mask.
pub fn dropout<F: Real, D: Dimension, R: Rng>(
    x: &Array<F, D>,
    p: f64,
    rng: &mut R,
) -> (Array<F, D>, Array<F, D>) {
    assert!((0.0..1.0).contains(&p), "drop probability must be in [0, 1)");
    let scale = F::from_f64(1.0 / (1.0 - p));
    let mask = x.mapv(|_| {
        if rng.gen::<f64>() < p {
            F::zero()
        } else {
            scale
        }
    });
    (x * &mask, mask)
}
