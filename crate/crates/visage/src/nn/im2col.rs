//! Patch-matrix lowering: convolution as GEMM.
//!
//! `im2col` unrolls k-by-k input patches into the columns of a matrix so a
//! convolution becomes one matrix product per sample; `col2im_add` is its
//! adjoint (scatter-add), used both for convolution input gradients and for
//! the transposed-convolution forward pass. Loops run over flat slices in a
//! fixed order, so accumulation is deterministic.

use crate::real::Real;
use ndarray::{Array2, ArrayView3};

/// Output spatial size of a convolution.
pub fn conv_out_hw(h: usize, w: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    assert!(h + 2 * p >= k && w + 2 * p >= k, "kernel larger than padded input");
    ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1)
}

/// Output spatial size of a transposed convolution.
pub fn deconv_out_hw(h: usize, w: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    ((h - 1) * s + k - 2 * p, (w - 1) * s + k - 2 * p)
}

/// Unrolls `x` ([c, h, w]) into a `[c*k*k, ho*wo]` patch matrix.
/// Out-of-bounds (padding) positions stay zero.
pub fn im2col<F: Real>(x: &ArrayView3<'_, F>, k: usize, s: usize, p: usize) -> Array2<F> {
    let (c, h, w) = x.dim();
    let (ho, wo) = conv_out_hw(h, w, k, s, p);
    let xs = x.as_slice().expect("im2col input must be contiguous");
    let mut cols = Array2::<F>::zeros((c * k * k, ho * wo));
    let cs = cols.as_slice_mut().expect("freshly allocated");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row_base = ((ci * k + ki) * k + kj) * ho * wo;
                for oh in 0..ho {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let x_base = ci * h * w + ih as usize * w;
                    let o_base = row_base + oh * wo;
                    for ow in 0..wo {
                        let iw = (ow * s + kj) as isize - p as isize;
                        if iw >= 0 && iw < w as isize {
                            cs[o_base + ow] = xs[x_base + iw as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a `[c*k*k, ho*wo]` patch matrix back
/// onto a flat `[c, h, w]` buffer. Overlapping patches accumulate.
pub fn col2im_add<F: Real>(
    cols: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    out: &mut [F],
) {
    let (ho, wo) = conv_out_hw(h, w, k, s, p);
    assert_eq!(cols.dim(), (c * k * k, ho * wo));
    assert_eq!(out.len(), c * h * w);
    let cs = cols.as_slice().expect("column matrix must be contiguous");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row_base = ((ci * k + ki) * k + kj) * ho * wo;
                for oh in 0..ho {
                    let ih = (oh * s + ki) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let x_base = ci * h * w + ih as usize * w;
                    let o_base = row_base + oh * wo;
                    for ow in 0..wo {
                        let iw = (ow * s + kj) as isize - p as isize;
                        if iw >= 0 && iw < w as isize {
                            out[x_base + iw as usize] = out[x_base + iw as usize] + cs[o_base + ow];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn shapes_follow_conv_arithmetic() {
        assert_eq!(conv_out_hw(128, 128, 4, 2, 1), (64, 64));
        assert_eq!(conv_out_hw(4, 4, 4, 1, 0), (1, 1));
        assert_eq!(conv_out_hw(2, 2, 4, 1, 1), (1, 1));
        assert_eq!(deconv_out_hw(1, 1, 4, 2, 0), (4, 4));
        assert_eq!(deconv_out_hw(4, 4, 4, 2, 1), (8, 8));
    }

    #[test]
    fn im2col_matches_direct_patch_extraction() {
        // 1 channel, 4x4 input, k=2, s=2, p=0: four disjoint patches.
        let x = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i * 4 + j) as f64);
        let cols = im2col(&x.view(), 2, 2, 0);
        assert_eq!(cols.dim(), (4, 4));
        // Patch at (0,0): values 0,1,4,5 -> column 0.
        assert_eq!(
            cols.column(0).to_vec(),
            vec![0.0, 1.0, 4.0, 5.0]
        );
        // Patch at (1,1) (output position 3): values 10,11,14,15.
        assert_eq!(
            cols.column(3).to_vec(),
            vec![10.0, 11.0, 14.0, 15.0]
        );
    }

    #[test]
    fn im2col_zero_pads_out_of_bounds() {
        let x = Array3::from_elem((1, 2, 2), 1.0f64);
        let cols = im2col(&x.view(), 4, 1, 1);
        // Single output position; 4x4 kernel over a padded 2x2: exactly 4 ones.
        assert_eq!(cols.dim(), (16, 1));
        let total: f64 = cols.iter().sum();
        assert_eq!(total, 4.0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), C> == <x, col2im(C)> for random x, C.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (c, h, w, k, s, p) = (2, 6, 6, 4, 2, 1);
        let x = Array3::from_shape_fn((c, h, w), |_| rng.gen::<f64>() - 0.5);
        let cols = im2col(&x.view(), k, s, p);
        let cmat = Array2::from_shape_fn(cols.dim(), |_| rng.gen::<f64>() - 0.5);

        let lhs: f64 = (&cols * &cmat).sum();
        let mut back = vec![0.0f64; c * h * w];
        col2im_add(&cmat, c, h, w, k, s, p, &mut back);
        let rhs: f64 = x
            .as_slice()
            .unwrap()
            .iter()
            .zip(back.iter())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}
