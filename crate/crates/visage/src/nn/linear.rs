//! Fully connected layer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2};

use crate::real::Real;

/// Affine map `y = x wᵀ + b` with weights stored as `[out, in]`.
pub struct Linear<F> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

/// Gradient accumulators matching [`Linear`].
pub struct LinearGrads<F> {
    pub dw: Array2<F>,
    pub db: Array1<F>,
}

/// Values saved by the forward pass for reuse in backward.
pub struct LinearCache<F> {
    input: Array2<F>,
}

impl<F: Real> Linear<F> {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zero_grads(&self) -> LinearGrads<F> {
        LinearGrads {
            dw: Array2::zeros(self.w.raw_dim()),
            db: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Maps `x` of shape `[b, in]` to `[b, out]`.
    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LinearCache<F>) {
        let (batch, in_dim) = x.dim();
        assert_eq!(in_dim, self.w.shape()[1], "input width mismatch");
        let out_dim = self.w.shape()[0];
        let mut out = Array2::zeros((batch, out_dim));
        general_mat_mul(F::one(), x, &self.w.t(), F::zero(), &mut out);
        for mut row in out.rows_mut() {
            row.scaled_add(F::one(), &self.b);
        }
        (out, LinearCache { input: x.clone() })
    }

    /// Weights-only forward used by directional-derivative passes.
    pub fn forward_tangent(&self, t: &Array2<F>) -> Array2<F> {
        let mut out = Array2::zeros((t.shape()[0], self.w.shape()[0]));
        general_mat_mul(F::one(), t, &self.w.t(), F::zero(), &mut out);
        out
    }

    /// Backward pass. Accumulates parameter gradients into `grads` when
    /// given and always returns the input gradient.
    pub fn backward(
        &self,
        cache: &LinearCache<F>,
        dout: &Array2<F>,
        grads: Option<&mut LinearGrads<F>>,
    ) -> Array2<F> {
        let batch = cache.input.shape()[0];
        assert_eq!(dout.dim(), (batch, self.w.shape()[0]));
        if let Some(g) = grads {
            general_mat_mul(F::one(), &dout.t(), &cache.input, F::one(), &mut g.dw);
            for row in dout.rows() {
                g.db.scaled_add(F::one(), &row);
            }
        }
        let mut dx = Array2::zeros(cache.input.raw_dim());
        general_mat_mul(F::one(), dout, &self.w, F::zero(), &mut dx);
        dx
    }
}

impl<F: Real> LinearGrads<F> {
    pub fn scaled_add(&mut self, alpha: F, other: &LinearGrads<F>) {
        self.dw.scaled_add(alpha, &other.dw);
        self.db.scaled_add(alpha, &other.db);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff, max_rel_err};
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_layer() -> (Linear<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut layer = Linear::<f64>::new(5, 3);
        layer.w = Array::from_shape_simple_fn((3, 5), || rng.gen_range(-0.8..0.8));
        layer.b = Array::from_shape_simple_fn(3, || rng.gen_range(-0.8..0.8));
        let x = Array::from_shape_simple_fn((4, 5), || rng.gen_range(-1.0..1.0));
        (layer, x)
    }

    #[test]
    fn forward_matches_direct_computation() {
        let (layer, x) = test_layer();
        let (got, _) = layer.forward(&x);
        for bi in 0..4 {
            for o in 0..3 {
                let mut want = layer.b[o];
                for i in 0..5 {
                    want += x[[bi, i]] * layer.w[[o, i]];
                }
                assert!((got[[bi, o]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (layer, x) = test_layer();
        let (out, cache) = layer.forward(&x);
        let dout = out.mapv(|v| (v * 2.0).sin());
        let mut grads = layer.zero_grads();
        let dx = layer.backward(&cache, &dout, Some(&mut grads));

        let w0 = layer.w.clone().into_raw_vec();
        let fd_w = central_diff(
            |p| {
                let mut l = Linear::<f64>::new(5, 3);
                l.w = Array2::from_shape_vec((3, 5), p.to_vec()).unwrap();
                l.b = layer.b.clone();
                (&l.forward(&x).0 * &dout).sum()
            },
            &w0,
            1e-6,
        );
        assert!(max_rel_err(&grads.dw.clone().into_raw_vec(), &fd_w) < 1e-8);

        let b0 = layer.b.clone().into_raw_vec();
        let fd_b = central_diff(
            |p| {
                let mut l = Linear::<f64>::new(5, 3);
                l.w = layer.w.clone();
                l.b = ndarray::Array1::from_vec(p.to_vec());
                (&l.forward(&x).0 * &dout).sum()
            },
            &b0,
            1e-6,
        );
        assert!(max_rel_err(&grads.db.clone().into_raw_vec(), &fd_b) < 1e-8);

        let x0 = x.clone().into_raw_vec();
        let fd_x = central_diff(
            |p| {
                let xp = Array2::from_shape_vec((4, 5), p.to_vec()).unwrap();
                (&layer.forward(&xp).0 * &dout).sum()
            },
            &x0,
            1e-6,
        );
        assert!(max_rel_err(&dx.clone().into_raw_vec(), &fd_x) < 1e-7);
    }

    #[test]
    fn tangent_is_the_linear_part() {
        let (layer, x) = test_layer();
        let t = x.mapv(|v| v * 0.13 + 0.02);
        let (y0, _) = layer.forward(&x);
        let (y1, _) = layer.forward(&(&x + &t));
        let tangent = layer.forward_tangent(&t);
        let diff = (&(&y1 - &y0) - &tangent)
            .mapv(f64::abs)
            .iter()
            .fold(0.0, |a: f64, &b| a.max(b));
        assert!(diff < 1e-12);
    }
}
