//! Intra-class feature loss and its real-data-guided gradient routing.
//!
//! Each anchor image x is paired with a same-class real image x_pr and a
//! same-class synthesized image x_pf. The loss is the per-batch mean of the
//! two non-squared Euclidean feature distances
//!
//! ```text
//! dist_r  = |f(x) - f(x_pr)|    dist_rf = |f(x) - f(x_pf)|
//! ```
//!
//! Under real-data-guided routing the real-to-synthetic term back-propagates
//! only through the synthetic branch: the anchor feature acts as a constant
//! target that pulls noisy synthetic features toward the real distribution,
//! never the reverse. The real-to-real term flows through both branches as
//! usual. Disabling the routing (`rdbp = false`) restores standard full
//! gradients, which is itself an ablation arm.

use ndarray::{Array2, Axis};

use crate::real::Real;

/// Norms below this are treated as exactly coincident features and
/// contribute a zero subgradient.
const NORM_GUARD: f64 = 1e-12;

/// The two distance terms, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntraClassTerms {
    pub dist_r: f64,
    pub dist_rf: f64,
    pub total: f64,
}

/// Gradients of `total` with respect to the three feature matrices.
pub struct IntraGrads<F> {
    pub d_fx: Array2<F>,
    pub d_fxpr: Array2<F>,
    pub d_fxpf: Array2<F>,
}

/// Loss values only; see [`intra_class_grads`] for gradients.
pub fn intra_class_loss<F: Real>(
    f_x: &Array2<F>,
    f_xpr: &Array2<F>,
    f_xpf: &Array2<F>,
) -> IntraClassTerms {
    intra_class_grads(f_x, f_xpr, f_xpf, true).0
}

/// Loss values and feature-space gradients. With `rdbp` set, the
/// real-to-synthetic term contributes nothing to `d_fx`; without it, both
/// branches of both terms receive gradient (standard back-propagation).
pub fn intra_class_grads<F: Real>(
    f_x: &Array2<F>,
    f_xpr: &Array2<F>,
    f_xpf: &Array2<F>,
    rdbp: bool,
) -> (IntraClassTerms, IntraGrads<F>) {
    assert_eq!(f_x.dim(), f_xpr.dim(), "feature shape mismatch");
    assert_eq!(f_x.dim(), f_xpf.dim(), "feature shape mismatch");
    let (b, d) = f_x.dim();
    assert!(b > 0, "empty batch");

    let mut d_fx = Array2::zeros((b, d));
    let mut d_fxpr = Array2::zeros((b, d));
    let mut d_fxpf = Array2::zeros((b, d));
    let inv_b = 1.0 / b as f64;
    let mut dist_r = 0.0;
    let mut dist_rf = 0.0;

    for bi in 0..b {
        let fx = f_x.index_axis(Axis(0), bi);
        let fr = f_xpr.index_axis(Axis(0), bi);
        let ff = f_xpf.index_axis(Axis(0), bi);

        let mut nr = 0.0;
        let mut nf = 0.0;
        for j in 0..d {
            let er = (fx[j] - fr[j]).to_f64();
            let ef = (fx[j] - ff[j]).to_f64();
            nr += er * er;
            nf += ef * ef;
        }
        let nr = nr.sqrt();
        let nf = nf.sqrt();
        dist_r += nr;
        dist_rf += nf;

        // d|v|/dv = v/|v|; zero subgradient at coincidence.
        if nr >= NORM_GUARD {
            let s = F::from_f64(inv_b / nr);
            for j in 0..d {
                let e = fx[j] - fr[j];
                d_fx[[bi, j]] = d_fx[[bi, j]] + e * s;
                d_fxpr[[bi, j]] = d_fxpr[[bi, j]] - e * s;
            }
        }
        if nf >= NORM_GUARD {
            let s = F::from_f64(inv_b / nf);
            for j in 0..d {
                let e = fx[j] - ff[j];
                d_fxpf[[bi, j]] = d_fxpf[[bi, j]] - e * s;
                if !rdbp {
                    d_fx[[bi, j]] = d_fx[[bi, j]] + e * s;
                }
            }
        }
    }

    let terms = IntraClassTerms {
        dist_r: dist_r * inv_b,
        dist_rf: dist_rf * inv_b,
        total: (dist_r + dist_rf) * inv_b,
    };
    (
        terms,
        IntraGrads {
            d_fx,
            d_fxpr,
            d_fxpf,
        },
    )
}
