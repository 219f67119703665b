//! Elementwise activations.
//!
//! Each forward returns the activation output plus whatever the backward
//! pass needs: a derivative mask for the piecewise-linear ones, or nothing
//! extra for the saturating ones (their derivative is a function of the
//! output itself).

use ndarray::{Array, Dimension};

use crate::real::Real;

/// Leaky ReLU. The mask holds the local derivative (1 above zero, `slope`
/// at and below), so the same mask can replay the pass on a tangent.
pub fn lrelu<F: Real, D: Dimension>(x: &Array<F, D>, slope: F) -> (Array<F, D>, Array<F, D>) {
    let mask = x.mapv(|v| if v > F::zero() { F::one() } else { slope });
    let y = x * &mask;
    (y, mask)
}

/// ReLU, a leaky ReLU with slope zero.
pub fn relu<F: Real, D: Dimension>(x: &Array<F, D>) -> (Array<F, D>, Array<F, D>) {
    lrelu(x, F::zero())
}

/// Backward for [`lrelu`] and [`relu`]: multiply by the saved mask.
pub fn piecewise_backward<F: Real, D: Dimension>(
    dout: &Array<F, D>,
    mask: &Array<F, D>,
) -> Array<F, D> {
    dout * mask
}

pub fn tanh<F: Real, D: Dimension>(x: &Array<F, D>) -> Array<F, D> {
    x.mapv(|v| v.tanh())
}

/// Backward for [`tanh`], computed from the forward output.
pub fn tanh_backward<F: Real, D: Dimension>(dout: &Array<F, D>, y: &Array<F, D>) -> Array<F, D> {
    let mut dx = dout.clone();
    dx.zip_mut_with(y, |d, &o| *d = *d * (F::one() - o * o));
    dx
}

pub fn sigmoid<F: Real, D: Dimension>(x: &Array<F, D>) -> Array<F, D> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// Backward for [`sigmoid`], computed from the forward output.
pub fn sigmoid_backward<F: Real, D: Dimension>(
    dout: &Array<F, D>,
    y: &Array<F, D>,
) -> Array<F, D> {
    let mut dx = dout.clone();
    dx.zip_mut_with(y, |d, &o| *d = *d * o * (F::one() - o));
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_diff, max_rel_err};
    use ndarray::{Array1, Array2};

    fn kink_free_input() -> Vec<f64> {
        // Stays within +-2 so saturating derivatives remain well above
        // finite-difference rounding noise.
        (0..20)
            .map(|i| {
                let v = (i as f64 - 9.7) * 0.2;
                if v.abs() < 1e-2 {
                    v + 0.05
                } else {
                    v
                }
            })
            .collect()
    }

    #[test]
    fn lrelu_values_and_gradient() {
        let x = Array1::from_vec(kink_free_input());
        let (y, mask) = lrelu(&x, 0.2);
        for (&xi, &yi) in x.iter().zip(y.iter()) {
            let want = if xi > 0.0 { xi } else { 0.2 * xi };
            assert!((yi - want).abs() < 1e-15);
        }
        let dout = y.mapv(|v| (v + 0.3).cos());
        let dx = piecewise_backward(&dout, &mask);
        let fd = central_diff(
            |p| {
                let xp = Array1::from_vec(p.to_vec());
                (&lrelu(&xp, 0.2).0 * &dout).sum()
            },
            x.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_rel_err(dx.as_slice().unwrap(), &fd) < 1e-7);
    }

    #[test]
    fn relu_is_slope_zero() {
        let x = Array1::from_vec(kink_free_input());
        let (y, mask) = relu(&x);
        let (y2, mask2) = lrelu(&x, 0.0);
        assert_eq!(y, y2);
        assert_eq!(mask, mask2);
    }

    #[test]
    fn tanh_gradient() {
        let x = Array2::from_shape_vec((4, 5), kink_free_input()).unwrap();
        let y = tanh(&x);
        let dout = y.mapv(|v| v * 0.7 - 0.2);
        let dx = tanh_backward(&dout, &y);
        let fd = central_diff(
            |p| {
                let xp = Array2::from_shape_vec((4, 5), p.to_vec()).unwrap();
                (&tanh(&xp) * &dout).sum()
            },
            x.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_rel_err(dx.as_slice().unwrap(), &fd) < 1e-7);
    }

    #[test]
    fn sigmoid_gradient_and_range() {
        let x = Array1::from_vec(kink_free_input());
        let y = sigmoid(&x);
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
        let dout = y.mapv(|v| 1.0 - v * 0.4);
        let dx = sigmoid_backward(&dout, &y);
        let fd = central_diff(
            |p| {
                let xp = Array1::from_vec(p.to_vec());
                (&sigmoid(&xp) * &dout).sum()
            },
            x.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_rel_err(dx.as_slice().unwrap(), &fd) < 1e-7);
    }

    #[test]
    fn sigmoid_midpoint_and_symmetry() {
        let x = Array1::from_vec(vec![0.0f64, 2.0, -2.0]);
        let y = sigmoid(&x);
        assert!((y[0] - 0.5).abs() < 1e-15);
        assert!((y[1] + y[2] - 1.0).abs() < 1e-12);
    }
}
