//! Scalar objectives and their gradients: Wasserstein adversarial pair with
//! gradient penalty for images, logistic adversarial pair for latents,
//! classification cross-entropies, and the L1 content losses.
//!
//! Each function returns the loss value as `f64` (for reporting) together
//! with the gradient of that value with respect to its differentiable
//! inputs, in the working precision. Latent-adversarial gradients are taken
//! in logit space, where they are exact even when the sigmoid saturates;
//! the clamping at [`PROB_FLOOR`] only guards the reported value.

use ndarray::{Array1, Array2, Array4, ArrayBase, Data, Dimension};
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::networks::{ImageDisc, ImageDiscGrads};
use crate::real::Real;

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before any
/// logarithm, so early-training saturation cannot produce non-finite values.
pub const PROB_FLOOR: f64 = 1e-7;

/// Generator's image-adversarial term: the negated mean critic score over
/// every patch of every synthesized image. Returns the gradient with respect
/// to the score map.
pub fn adv_g_img<F: Real>(fake_scores: &Array4<F>) -> (f64, Array4<F>) {
    let n = fake_scores.len();
    assert!(n > 0, "empty score map");
    let mean: f64 = fake_scores.iter().map(|&v| v.to_f64()).sum::<f64>() / n as f64;
    let g = F::from_f64(-1.0 / n as f64);
    (-mean, Array4::from_elem(fake_scores.raw_dim(), g))
}

/// Critic's image-adversarial term: fake scores up, real scores down.
/// Returns gradients with respect to the real and fake score maps.
pub fn adv_d_img<F: Real>(
    real_scores: &Array4<F>,
    fake_scores: &Array4<F>,
) -> (f64, Array4<F>, Array4<F>) {
    let nr = real_scores.len();
    let nf = fake_scores.len();
    assert!(nr > 0 && nf > 0, "empty score map");
    let mean_r: f64 = real_scores.iter().map(|&v| v.to_f64()).sum::<f64>() / nr as f64;
    let mean_f: f64 = fake_scores.iter().map(|&v| v.to_f64()).sum::<f64>() / nf as f64;
    let dr = Array4::from_elem(real_scores.raw_dim(), F::from_f64(-1.0 / nr as f64));
    let df = Array4::from_elem(fake_scores.raw_dim(), F::from_f64(1.0 / nf as f64));
    (mean_f - mean_r, dr, df)
}

fn clamped_sigmoid(logit: f64) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    if p < PROB_FLOOR || p > 1.0 - PROB_FLOOR {
        log::debug!("latent-discriminator probability clamped (logit {logit:.3})");
    }
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Encoder's latent-adversarial term `-mean log p(g(x))`, from the
/// pre-sigmoid logits of the latent discriminator on encoded codes.
pub fn adv_g_z<F: Real>(logits_on_gx: &Array1<F>) -> (f64, Array1<F>) {
    let n = logits_on_gx.len();
    assert!(n > 0, "empty logit vector");
    let mut value = 0.0;
    let mut d = Array1::zeros(n);
    for (i, &l) in logits_on_gx.iter().enumerate() {
        let lf = l.to_f64();
        value -= clamped_sigmoid(lf).ln();
        // d/dl of -log sigmoid(l) is sigmoid(l) - 1, exact in logit space.
        let p = 1.0 / (1.0 + (-lf).exp());
        d[i] = F::from_f64((p - 1.0) / n as f64);
    }
    (value / n as f64, d)
}

/// Latent discriminator's term: prior samples toward 1, encoded codes
/// toward 0. Gradients are with respect to the two logit vectors.
pub fn adv_d_z<F: Real>(
    logits_on_z: &Array1<F>,
    logits_on_gx: &Array1<F>,
) -> (f64, Array1<F>, Array1<F>) {
    let nz = logits_on_z.len();
    let ng = logits_on_gx.len();
    assert!(nz > 0 && ng > 0, "empty logit vector");
    let mut sum_z = 0.0;
    let mut dz = Array1::zeros(nz);
    for (i, &l) in logits_on_z.iter().enumerate() {
        let lf = l.to_f64();
        sum_z -= clamped_sigmoid(lf).ln();
        let p = 1.0 / (1.0 + (-lf).exp());
        dz[i] = F::from_f64((p - 1.0) / nz as f64);
    }
    let mut sum_g = 0.0;
    let mut dg = Array1::zeros(ng);
    for (i, &l) in logits_on_gx.iter().enumerate() {
        let lf = l.to_f64();
        sum_g -= (1.0 - clamped_sigmoid(lf)).ln();
        // d/dl of -log(1 - sigmoid(l)) is sigmoid(l).
        let p = 1.0 / (1.0 + (-lf).exp());
        dg[i] = F::from_f64(p / ng as f64);
    }
    (sum_z / nz as f64 + sum_g / ng as f64, dz, dg)
}

/// Mean softmax cross-entropy over a batch of class logits. Returns the
/// logit gradient `(softmax - onehot) / batch`.
pub fn cls_ce<F: Real>(logits: &Array2<F>, classes: &[usize]) -> (f64, Array2<F>) {
    let (b, k) = logits.dim();
    assert_eq!(b, classes.len(), "one label per row");
    assert!(b > 0, "empty batch");
    let mut value = 0.0;
    let mut d = Array2::zeros((b, k));
    for bi in 0..b {
        assert!(classes[bi] < k, "class index out of range");
        let row: Vec<f64> = logits
            .row(bi)
            .iter()
            .map(|&v| {
                let x = v.to_f64();
                assert!(x.is_finite(), "non-finite logit");
                x
            })
            .collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        value -= (exps[classes[bi]] / sum).ln();
        for j in 0..k {
            let p = exps[j] / sum;
            let y = if j == classes[bi] { 1.0 } else { 0.0 };
            d[[bi, j]] = F::from_f64((p - y) / b as f64);
        }
    }
    (value / b as f64, d)
}

/// Per-element mean absolute difference; the gradient is with respect to
/// the first argument (sign(a-b)/N, zero exactly at ties). Used for both
/// the pixel reconstruction loss and the identity-embedding loss.
pub fn l1_mean<F: Real, S: Data<Elem = F>, D: Dimension>(
    a: &ArrayBase<S, D>,
    b: &ArrayBase<S, D>,
) -> (f64, ndarray::Array<F, D>) {
    assert_eq!(a.shape(), b.shape(), "L1 operands must match in shape");
    let n = a.len();
    assert!(n > 0, "empty L1 operands");
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    let mut d = ndarray::Array::zeros(a.raw_dim());
    ndarray::Zip::from(&mut d).and(a).and(b).for_each(|g, &x, &y| {
        let diff = (x - y).to_f64();
        value += diff.abs();
        *g = F::from_f64(diff.signum() * scale * if diff == 0.0 { 0.0 } else { 1.0 });
    });
    (value * scale, d)
}

/// WGAN-GP penalty on random interpolates between real and synthesized
/// images: `coeff * mean_b (|grad D(x~_b)| - 1)^2`. Consumes exactly one
/// uniform draw per sample for the interpolation coefficients. Parameter
/// gradients accumulate into `grads` when given.
pub fn gradient_penalty<F: Real>(
    disc: &ImageDisc<F>,
    real: &Array4<F>,
    fake: &Array4<F>,
    coeff: f64,
    rng: &mut impl Rng,
    grads: Option<&mut ImageDiscGrads<F>>,
) -> f64 {
    assert_eq!(real.dim(), fake.dim(), "batches must match in shape");
    let b = real.shape()[0];
    let mut interp = Array4::zeros(real.raw_dim());
    for bi in 0..b {
        let eps = F::from_f64(rng.gen::<f64>());
        let one = F::one();
        let mut row = interp.index_axis_mut(ndarray::Axis(0), bi);
        let xr = real.index_axis(ndarray::Axis(0), bi);
        let xf = fake.index_axis(ndarray::Axis(0), bi);
        ndarray::Zip::from(&mut row)
            .and(&xr)
            .and(&xf)
            .for_each(|o, &r, &f| *o = eps * r + (one - eps) * f);
    }
    disc.grad_penalty(&interp, F::from_f64(coeff), grads).to_f64()
}

/// Named value of every loss term active in one iteration, plus the
/// λ-weighted totals. Absent terms stay `None`, which is itself meaningful:
/// stage-1 reports carry no `cls_r_f`, ablations that disable a
/// discriminator carry none of its terms.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub t: u64,
    pub stage: u8,
    pub adv_g_img: Option<f64>,
    pub adv_d_img: Option<f64>,
    pub gp: Option<f64>,
    pub adv_g_z: Option<f64>,
    pub adv_d_z: Option<f64>,
    pub cls_d_f: Option<f64>,
    pub cls_d_r: Option<f64>,
    pub rec: Option<f64>,
    pub id: Option<f64>,
    pub cls_r_r: Option<f64>,
    pub cls_r_f: Option<f64>,
    pub intra: Option<f64>,
    /// How many images fed the real and synthetic recognition terms; the
    /// pooled classification loss weights them by count.
    pub cls_r_real_count: usize,
    pub cls_r_fake_count: usize,
    pub l_g: Option<f64>,
    pub l_dimg: Option<f64>,
    pub l_dz: Option<f64>,
    pub l_r: Option<f64>,
}

impl LossReport {
    pub const TERM_NAMES: [&'static str; 12] = [
        "adv_g_img",
        "adv_d_img",
        "gp",
        "adv_g_z",
        "adv_d_z",
        "cls_D_f",
        "cls_D_r",
        "rec",
        "id",
        "cls_R_r",
        "cls_R_f",
        "intra",
    ];

    fn terms(&self) -> [Option<f64>; 12] {
        [
            self.adv_g_img,
            self.adv_d_img,
            self.gp,
            self.adv_g_z,
            self.adv_d_z,
            self.cls_d_f,
            self.cls_d_r,
            self.rec,
            self.id,
            self.cls_r_r,
            self.cls_r_f,
            self.intra,
        ]
    }

    /// Pooled recognition cross-entropy over the real and synthetic slices
    /// of the recognizer's batch, weighted by image counts.
    pub fn cls_r_pooled(&self) -> Option<f64> {
        match (self.cls_r_r, self.cls_r_f) {
            (Some(r), Some(f)) => {
                let nr = self.cls_r_real_count as f64;
                let nf = self.cls_r_fake_count as f64;
                Some((nr * r + nf * f) / (nr + nf))
            }
            (Some(r), None) => Some(r),
            (None, Some(f)) => Some(f),
            (None, None) => None,
        }
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["t".to_string(), "stage".to_string()];
        cols.extend(Self::TERM_NAMES.iter().map(|s| s.to_string()));
        cols.extend(["L_G", "L_Dimg", "L_Dz", "L_R"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let cell = |v: Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => String::new(),
        };
        let mut cols = vec![self.t.to_string(), self.stage.to_string()];
        cols.extend(self.terms().iter().map(|&v| cell(v)));
        cols.extend([self.l_g, self.l_dimg, self.l_dz, self.l_r].map(cell));
        cols.join(",")
    }

    /// True if any recorded value is non-finite (the trainer aborts on it).
    pub fn any_non_finite(&self) -> bool {
        self.terms()
            .iter()
            .chain([self.l_g, self.l_dimg, self.l_dz, self.l_r].iter())
            .any(|v| matches!(v, Some(x) if !x.is_finite()))
    }
}

/// Fills the four weighted totals from whichever terms are present.
///
/// Generator: `L_G = adv_g_img + λ1 adv_g_z + λ2 rec + λ3 id + λ4 cls_D_f`,
/// with `λ4 cls_R_f` joining in stage 2. Image discriminator:
/// `L_Dimg = λ5 adv_d_img + cls_D_r + gp`. Latent discriminator:
/// `L_Dz = adv_d_z`. Recognizer: `L_R = λ6 intra + cls_R` with the pooled
/// classification term. A total is `None` when none of its terms ran.
pub fn aggregate(report: &mut LossReport, cfg: &ExperimentConfig) {
    let mut l_g = None;
    let add = |acc: &mut Option<f64>, term: Option<f64>, w: f64| {
        if let Some(v) = term {
            *acc = Some(acc.unwrap_or(0.0) + w * v);
        }
    };
    add(&mut l_g, report.adv_g_img, 1.0);
    add(&mut l_g, report.adv_g_z, cfg.lambda1);
    add(&mut l_g, report.rec, cfg.lambda2);
    add(&mut l_g, report.id, cfg.lambda3);
    add(&mut l_g, report.cls_d_f, cfg.lambda4);
    if report.stage >= 2 {
        add(&mut l_g, report.cls_r_f, cfg.lambda4);
    }
    report.l_g = l_g;

    let mut l_dimg = None;
    add(&mut l_dimg, report.adv_d_img, cfg.lambda5);
    add(&mut l_dimg, report.cls_d_r, 1.0);
    add(&mut l_dimg, report.gp, 1.0);
    report.l_dimg = l_dimg;

    report.l_dz = report.adv_d_z;

    let mut l_r = None;
    add(&mut l_r, report.intra, cfg.lambda6);
    add(&mut l_r, report.cls_r_pooled(), 1.0);
    report.l_r = l_r;
}
