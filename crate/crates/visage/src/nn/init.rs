//! Weight initialization.
//!
//! All randomness is drawn in f64 regardless of the parameter type, so an
//! f32 network and an f64 network built from the same generator state get
//! the same initial values (up to rounding).

use ndarray::{Array, Dimension};
use rand::Rng;

use crate::real::Real;

/// Standard deviation used for generator and discriminator weights.
pub const GAN_WEIGHT_STD: f64 = 0.02;

/// He-normal standard deviation for layers followed by a rectifier.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// One standard normal draw via the Box-Muller transform. Consumes exactly
/// two uniforms per call, keeping the stream layout independent of the
/// values drawn.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fills `arr` with draws from N(0, std²) in logical order.
pub fn fill_normal<F: Real, D: Dimension, R: Rng>(arr: &mut Array<F, D>, std: f64, rng: &mut R) {
    for v in arr.iter_mut() {
        *v = F::from_f64(standard_normal(rng) * std);
    }
}
