//! Strided 2-D convolution, im2col + GEMM formulation.

use super::im2col::{col2im_add, conv_out_hw, im2col};
use crate::real::Real;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, Axis};

/// Convolution with weights `[c_out, c_in, k, k]` and one bias per output map.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub w: Array4<F>,
    pub b: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<F> {
    pub dw: Array4<F>,
    pub db: Array1<F>,
}

/// Per-sample patch matrices from the forward pass, reused by backward.
pub struct Conv2dCache<F> {
    cols: Vec<Array2<F>>,
    in_dim: (usize, usize, usize, usize),
}

impl<F: Real> Conv2d<F> {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            w: Array4::zeros((c_out, c_in, k, k)),
            b: Array1::zeros(c_out),
            stride,
            pad,
        }
    }

    pub fn zero_grads(&self) -> Conv2dGrads<F> {
        Conv2dGrads {
            dw: Array4::zeros(self.w.dim()),
            db: Array1::zeros(self.b.dim()),
        }
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        conv_out_hw(h, w, self.kernel(), self.stride, self.pad)
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, Conv2dCache<F>) {
        let (bsz, c_in, h, w) = x.dim();
        let (c_out, c_in_w, k, _) = self.w.dim();
        assert_eq!(c_in, c_in_w, "input channels mismatch");
        let (ho, wo) = self.out_hw(h, w);

        let wmat = self
            .w
            .view()
            .into_shape((c_out, c_in * k * k))
            .expect("weights are standard layout");
        let mut y = Array4::<F>::zeros((bsz, c_out, ho, wo));
        let mut cols_all = Vec::with_capacity(bsz);
        for bi in 0..bsz {
            let cols = im2col(&x.index_axis(Axis(0), bi), k, self.stride, self.pad);
            let mut ymat = y
                .index_axis_mut(Axis(0), bi)
                .into_shape((c_out, ho * wo))
                .expect("output is standard layout");
            general_mat_mul(F::one(), &wmat, &cols, F::zero(), &mut ymat);
            cols_all.push(cols);
        }
        for bi in 0..bsz {
            for co in 0..c_out {
                let bias = self.b[co];
                y.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), co)
                    .mapv_inplace(|v| v + bias);
            }
        }
        (
            y,
            Conv2dCache {
                cols: cols_all,
                in_dim: (bsz, c_in, h, w),
            },
        )
    }

    /// Propagates `dout` back to the input; accumulates parameter gradients
    /// into `grads` when given.
    pub fn backward(
        &self,
        cache: &Conv2dCache<F>,
        dout: &Array4<F>,
        grads: Option<&mut Conv2dGrads<F>>,
    ) -> Array4<F> {
        self.backward_impl(cache, dout, grads, true)
    }

    /// Backward over a tangent-pass graph: the tangent forward never adds
    /// biases, so only `dw` accumulates and `db` is untouched.
    pub fn backward_tangent(
        &self,
        cache: &Conv2dCache<F>,
        dout: &Array4<F>,
        grads: Option<&mut Conv2dGrads<F>>,
    ) -> Array4<F> {
        self.backward_impl(cache, dout, grads, false)
    }

    fn backward_impl(
        &self,
        cache: &Conv2dCache<F>,
        dout: &Array4<F>,
        mut grads: Option<&mut Conv2dGrads<F>>,
        with_bias: bool,
    ) -> Array4<F> {
        let (bsz, c_in, h, w) = cache.in_dim;
        let (c_out, _, k, _) = self.w.dim();
        let (ho, wo) = self.out_hw(h, w);
        assert_eq!(dout.dim(), (bsz, c_out, ho, wo));

        let wmat = self
            .w
            .view()
            .into_shape((c_out, c_in * k * k))
            .expect("weights are standard layout");
        let mut dx = Array4::<F>::zeros(cache.in_dim);
        let mut dcols = Array2::<F>::zeros((c_in * k * k, ho * wo));
        for bi in 0..bsz {
            let dmat = dout
                .index_axis(Axis(0), bi)
                .into_shape((c_out, ho * wo))
                .expect("dout is standard layout");
            if let Some(g) = grads.as_deref_mut() {
                let mut gw = g
                    .dw
                    .view_mut()
                    .into_shape((c_out, c_in * k * k))
                    .expect("grads are standard layout");
                general_mat_mul(F::one(), &dmat, &cache.cols[bi].t(), F::one(), &mut gw);
                if with_bias {
                    for co in 0..c_out {
                        g.db[co] = g.db[co] + dmat.row(co).sum();
                    }
                }
            }
            general_mat_mul(F::one(), &wmat.t(), &dmat, F::zero(), &mut dcols);
            let mut dxb = dx.index_axis_mut(Axis(0), bi);
            col2im_add(
                &dcols,
                c_in,
                h,
                w,
                k,
                self.stride,
                self.pad,
                dxb.as_slice_mut().expect("dx is standard layout"),
            );
        }
        dx
    }

    /// Forward using the layer's weights but no bias, on caller-supplied
    /// values: the directional-derivative (tangent) pass used by the gradient
    /// penalty. Biases are constants, so they vanish from tangents.
    pub fn forward_tangent(&self, t: &Array4<F>) -> (Array4<F>, Conv2dCache<F>) {
        let (bsz, c_in, h, w) = t.dim();
        let (c_out, _, k, _) = self.w.dim();
        let (ho, wo) = self.out_hw(h, w);
        let wmat = self
            .w
            .view()
            .into_shape((c_out, c_in * k * k))
            .expect("weights are standard layout");
        let mut y = Array4::<F>::zeros((bsz, c_out, ho, wo));
        let mut cols_all = Vec::with_capacity(bsz);
        for bi in 0..bsz {
            let cols = im2col(&t.index_axis(Axis(0), bi), k, self.stride, self.pad);
            let mut ymat = y
                .index_axis_mut(Axis(0), bi)
                .into_shape((c_out, ho * wo))
                .expect("output is standard layout");
            general_mat_mul(F::one(), &wmat, &cols, F::zero(), &mut ymat);
            cols_all.push(cols);
        }
        (
            y,
            Conv2dCache {
                cols: cols_all,
                in_dim: (bsz, c_in, h, w),
            },
        )
    }
}

impl<F: Real> Conv2dGrads<F> {
    pub fn scaled_add(&mut self, alpha: F, other: &Self) {
        self.dw.scaled_add(alpha, &other.dw);
        self.db.scaled_add(alpha, &other.db);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff, max_rel_err};
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn filled<D: ndarray::Dimension>(
        shape: impl ndarray::ShapeBuilder<Dim = D>,
        rng: &mut impl Rng,
    ) -> ndarray::Array<f64, D> {
        ndarray::Array::from_shape_simple_fn(shape, || rng.gen::<f64>() - 0.5)
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new(2, 3, 4, 2, 1);
        conv.w = filled((3, 2, 4, 4), &mut rng);
        conv.b = filled(3, &mut rng);
        let x: Array4<f64> = filled((2, 2, 6, 6), &mut rng);
        let (y, _) = conv.forward(&x);
        assert_eq!(y.dim(), (2, 3, 3, 3));

        // Direct nested-loop reference.
        for bi in 0..2 {
            for co in 0..3 {
                for oh in 0..3 {
                    for ow in 0..3 {
                        let mut acc = conv.b[co];
                        for ci in 0..2 {
                            for ki in 0..4 {
                                for kj in 0..4 {
                                    let ih = (oh * 2 + ki) as isize - 1;
                                    let iw = (ow * 2 + kj) as isize - 1;
                                    if (0..6).contains(&ih) && (0..6).contains(&iw) {
                                        acc += conv.w[[co, ci, ki, kj]]
                                            * x[[bi, ci, ih as usize, iw as usize]];
                                    }
                                }
                            }
                        }
                        assert!((y[[bi, co, oh, ow]] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::<f64>::new(2, 2, 3, 2, 1);
        conv.w = filled((2, 2, 3, 3), &mut rng);
        conv.b = filled(2, &mut rng);
        let x: Array4<f64> = filled((2, 2, 6, 6), &mut rng);
        // Scalar loss: weighted sum of outputs with fixed weights.
        let r: Array4<f64> = filled((2, 2, 3, 3), &mut rng);

        let (y, cache) = conv.forward(&x);
        let mut grads = conv.zero_grads();
        let dx = conv.backward(&cache, &r, Some(&mut grads));
        let _ = y;

        // d/dw
        let w0 = conv.w.clone().into_raw_vec();
        let fd_w = central_diff(
            |p| {
                let mut c2 = conv.clone();
                c2.w = Array4::from_shape_vec(conv.w.dim(), p.to_vec()).unwrap();
                (&c2.forward(&x).0 * &r).sum()
            },
            &w0,
            1e-6,
        );
        assert!(max_rel_err(grads.dw.as_slice().unwrap(), &fd_w) < 1e-7);

        // d/db
        let b0 = conv.b.clone().into_raw_vec();
        let fd_b = central_diff(
            |p| {
                let mut c2 = conv.clone();
                c2.b = Array1::from_vec(p.to_vec());
                (&c2.forward(&x).0 * &r).sum()
            },
            &b0,
            1e-6,
        );
        assert!(max_rel_err(grads.db.as_slice().unwrap(), &fd_b) < 1e-7);

        // d/dx
        let x0 = x.clone().into_raw_vec();
        let fd_x = central_diff(
            |p| {
                let xp = Array4::from_shape_vec(x.dim(), p.to_vec()).unwrap();
                (&conv.forward(&xp).0 * &r).sum()
            },
            &x0,
            1e-6,
        );
        assert!(max_rel_err(dx.as_slice().unwrap(), &fd_x) < 1e-7);
    }

    #[test]
    fn backward_without_grads_still_returns_dx() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new(1, 2, 4, 2, 1);
        conv.w = filled((2, 1, 4, 4), &mut rng);
        let x: Array4<f64> = filled((1, 1, 8, 8), &mut rng);
        let (_, cache) = conv.forward(&x);
        let dout = filled((1, 2, 4, 4), &mut rng);
        let mut grads = conv.zero_grads();
        let dx_with = conv.backward(&cache, &dout, Some(&mut grads));
        let dx_without = conv.backward(&cache, &dout, None);
        assert_eq!(dx_with, dx_without);
    }

    #[test]
    fn tangent_forward_is_linear_part_of_forward() {
        // conv(x + t) - conv(x) == tangent(t) exactly for a linear map.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut conv = Conv2d::<f64>::new(2, 3, 4, 2, 1);
        conv.w = filled((3, 2, 4, 4), &mut rng);
        conv.b = filled(3, &mut rng);
        let x: Array4<f64> = filled((1, 2, 6, 6), &mut rng);
        let t: Array4<f64> = filled((1, 2, 6, 6), &mut rng);
        let y0 = conv.forward(&x).0;
        let y1 = conv.forward(&(&x + &t)).0;
        let (jt, _) = conv.forward_tangent(&t);
        let diff = &y1 - &y0 - &jt;
        assert!(diff.iter().all(|v| v.abs() < 1e-12));
    }
}
