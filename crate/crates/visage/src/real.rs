//! Scalar abstraction over `f32`/`f64`.
//!
//! Layers, losses, and gradient routing are generic over [`Real`] so that
//! training runs in `f32` while finite-difference gradient checks run in
//! `f64`, where central differences resolve to ~1e-10 instead of drowning in
//! single-precision rounding noise.

use ndarray::NdFloat;

pub trait Real: NdFloat {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
