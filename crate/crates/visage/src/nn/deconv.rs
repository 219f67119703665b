//! Transposed 2D convolution (fractionally strided upsampling).

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4};

use super::im2col::{col2im_add, deconv_out_hw, im2col};
use crate::real::Real;

/// Transposed convolution with square kernels. Weights are stored as
/// `[c_in, c_out, k, k]`, so the layer is the exact adjoint of a `Conv2d`
/// with the same kernel, stride, and padding.
pub struct Deconv2d<F> {
    pub w: Array4<F>,
    pub b: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

/// Gradient accumulators matching [`Deconv2d`].
pub struct Deconv2dGrads<F> {
    pub dw: Array4<F>,
    pub db: Array1<F>,
}

/// Values saved by the forward pass for reuse in backward.
pub struct Deconv2dCache<F> {
    input: Array4<F>,
    out_hw: (usize, usize),
}

impl<F: Real> Deconv2d<F> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Deconv2d {
            w: Array4::zeros((c_in, c_out, kernel, kernel)),
            b: Array1::zeros(c_out),
            stride,
            pad,
        }
    }

    pub fn zero_grads(&self) -> Deconv2dGrads<F> {
        Deconv2dGrads {
            dw: Array4::zeros(self.w.raw_dim()),
            db: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn kernel(&self) -> usize {
        self.w.shape()[2]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        deconv_out_hw(h, w, self.kernel(), self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Upsamples `x` of shape `[b, c_in, h, w]` to `[b, c_out, ho, wo]`.
    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, Deconv2dCache<F>) {
        let (batch, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.w.shape()[0], "input channel mismatch");
        let c_out = self.w.shape()[1];
        let k = self.kernel();
        let (ho, wo) = self.out_hw(h, w);

        let wmat = self
            .w
            .view()
            .into_shape((c_in, c_out * k * k))
            .expect("contiguous weights");
        let mut out = Array4::zeros((batch, c_out, ho, wo));
        let mut cols = Array2::zeros((c_out * k * k, h * w));
        for bi in 0..batch {
            let xmat = x
                .index_axis(ndarray::Axis(0), bi)
                .into_shape((c_in, h * w))
                .expect("contiguous input");
            general_mat_mul(F::one(), &wmat.t(), &xmat, F::zero(), &mut cols);
            let sample = out.index_axis_mut(ndarray::Axis(0), bi);
            col2im_add(
                &cols,
                c_out,
                ho,
                wo,
                k,
                self.stride,
                self.pad,
                sample.into_slice().expect("contiguous output"),
            );
        }
        for co in 0..c_out {
            let bias = self.b[co];
            out.slice_mut(ndarray::s![.., co, .., ..]).mapv_inplace(|v| v + bias);
        }
        let cache = Deconv2dCache {
            input: x.clone(),
            out_hw: (ho, wo),
        };
        (out, cache)
    }

    /// Backward pass. Accumulates parameter gradients into `grads` when
    /// given and always returns the input gradient.
    pub fn backward(
        &self,
        cache: &Deconv2dCache<F>,
        dout: &Array4<F>,
        mut grads: Option<&mut Deconv2dGrads<F>>,
    ) -> Array4<F> {
        let (batch, c_in, h, w) = cache.input.dim();
        let c_out = self.w.shape()[1];
        let k = self.kernel();
        assert_eq!(dout.dim(), (batch, c_out, cache.out_hw.0, cache.out_hw.1));

        let wmat = self
            .w
            .view()
            .into_shape((c_in, c_out * k * k))
            .expect("contiguous weights");
        let mut dx = Array4::zeros((batch, c_in, h, w));
        for bi in 0..batch {
            let dcols = im2col(
                &dout.index_axis(ndarray::Axis(0), bi),
                k,
                self.stride,
                self.pad,
            );
            {
                let mut dxmat = dx
                    .index_axis_mut(ndarray::Axis(0), bi)
                    .into_shape((c_in, h * w))
                    .expect("contiguous input grad");
                general_mat_mul(F::one(), &wmat, &dcols, F::zero(), &mut dxmat);
            }
            if let Some(g) = grads.as_deref_mut() {
                let xmat = cache
                    .input
                    .index_axis(ndarray::Axis(0), bi)
                    .into_shape((c_in, h * w))
                    .expect("contiguous input");
                let mut dwmat = g
                    .dw
                    .view_mut()
                    .into_shape((c_in, c_out * k * k))
                    .expect("contiguous weight grad");
                general_mat_mul(F::one(), &xmat, &dcols.t(), F::one(), &mut dwmat);
                for co in 0..c_out {
                    let mut acc = F::zero();
                    for v in dout.slice(ndarray::s![bi, co, .., ..]).iter() {
                        acc = acc + *v;
                    }
                    g.db[co] = g.db[co] + acc;
                }
            }
        }
        dx
    }
}

impl<F: Real> Deconv2dGrads<F> {
    pub fn scaled_add(&mut self, alpha: F, other: &Deconv2dGrads<F>) {
        self.dw.scaled_add(alpha, &other.dw);
        self.db.scaled_add(alpha, &other.db);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff, max_rel_err};
    use ndarray::{Array, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn filled(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    fn direct_deconv(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (batch, c_in, h, wd) = x.dim();
        let (_, c_out, k, _) = w.dim();
        let ho = (h - 1) * stride + k - 2 * pad;
        let wo = (wd - 1) * stride + k - 2 * pad;
        let mut out = Array4::zeros((batch, c_out, ho, wo));
        for bi in 0..batch {
            for co in 0..c_out {
                for i in 0..h {
                    for j in 0..wd {
                        for ci in 0..c_in {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let oi = (i * stride + ki) as isize - pad as isize;
                                    let oj = (j * stride + kj) as isize - pad as isize;
                                    if oi < 0 || oj < 0 {
                                        continue;
                                    }
                                    let (oi, oj) = (oi as usize, oj as usize);
                                    if oi >= ho || oj >= wo {
                                        continue;
                                    }
                                    out[[bi, co, oi, oj]] +=
                                        x[[bi, ci, i, j]] * w[[ci, co, ki, kj]];
                                }
                            }
                        }
                    }
                }
                for v in out.slice_mut(ndarray::s![bi, co, .., ..]).iter_mut() {
                    *v += b[co];
                }
            }
        }
        out
    }

    fn test_layer(stride: usize, pad: usize) -> (Deconv2d<f64>, Array4<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11 + stride as u64 + 10 * pad as u64);
        let mut layer = Deconv2d::<f64>::new(3, 2, 4, stride, pad);
        layer.w = Array::from_shape_simple_fn((3, 2, 4, 4), || rng.gen_range(-0.5..0.5));
        layer.b = Array::from_shape_simple_fn(2, || rng.gen_range(-0.5..0.5));
        let x = filled(&mut rng, (2, 3, 3, 3));
        (layer, x)
    }

    #[test]
    fn output_size_matches_upsampling_formula() {
        let layer = Deconv2d::<f64>::new(1, 1, 4, 2, 1);
        assert_eq!(layer.out_hw(4, 4), (8, 8));
        let first = Deconv2d::<f64>::new(1, 1, 4, 2, 0);
        assert_eq!(first.out_hw(1, 1), (4, 4));
    }

    #[test]
    fn forward_matches_direct_computation() {
        for &(stride, pad) in &[(2usize, 1usize), (2, 0), (1, 1)] {
            let (layer, x) = test_layer(stride, pad);
            let (got, _) = layer.forward(&x);
            let want = direct_deconv(&x, &layer.w, layer.b.as_slice().unwrap(), stride, pad);
            let diff = (&got - &want).mapv(f64::abs).iter().fold(0.0, |a: f64, &b| a.max(b));
            assert!(diff < 1e-12, "stride {stride} pad {pad}: diff {diff}");
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let (layer, x) = test_layer(2, 1);
        let (out, cache) = layer.forward(&x);
        let dout = out.mapv(|v| (v * 5.0).sin());
        let mut grads = layer.zero_grads();
        layer.backward(&cache, &dout, Some(&mut grads));

        let w0 = layer.w.clone().into_raw_vec();
        let fd_w = central_diff(
            |p| {
                let mut l = Deconv2d::<f64>::new(3, 2, 4, 2, 1);
                l.w = Array4::from_shape_vec((3, 2, 4, 4), p.to_vec()).unwrap();
                l.b = layer.b.clone();
                let (o, _) = l.forward(&x);
                (&o * &dout).sum()
            },
            &w0,
            1e-6,
        );
        assert!(max_rel_err(&grads.dw.clone().into_raw_vec(), &fd_w) < 1e-7);

        let b0 = layer.b.clone().into_raw_vec();
        let fd_b = central_diff(
            |p| {
                let mut l = Deconv2d::<f64>::new(3, 2, 4, 2, 1);
                l.w = layer.w.clone();
                l.b = ndarray::Array1::from_vec(p.to_vec());
                let (o, _) = l.forward(&x);
                (&o * &dout).sum()
            },
            &b0,
            1e-6,
        );
        assert!(max_rel_err(&grads.db.clone().into_raw_vec(), &fd_b) < 1e-7);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (layer, x) = test_layer(2, 0);
        let (out, cache) = layer.forward(&x);
        let dout = out.mapv(|v| (v * 3.0).cos());
        let dx = layer.backward(&cache, &dout, None);

        let x0 = x.clone().into_raw_vec();
        let fd = central_diff(
            |p| {
                let xp = Array4::from_shape_vec((2, 3, 3, 3), p.to_vec()).unwrap();
                let (o, _) = layer.forward(&xp);
                (&o * &dout).sum()
            },
            &x0,
            1e-6,
        );
        assert!(max_rel_err(&dx.clone().into_raw_vec(), &fd) < 1e-7);
    }

    #[test]
    fn input_gradient_ignores_grad_sink_presence() {
        let (layer, x) = test_layer(2, 1);
        let (out, cache) = layer.forward(&x);
        let dout = out.mapv(|v| v * 0.3 + 0.1);
        let dx_none = layer.backward(&cache, &dout, None);
        let mut grads = layer.zero_grads();
        let dx_some = layer.backward(&cache, &dout, Some(&mut grads));
        assert_eq!(dx_none, dx_some);
    }
}
