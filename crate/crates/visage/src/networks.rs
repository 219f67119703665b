//! The five networks: encoder, decoder, image discriminator (adversarial +
//! class heads), latent discriminator, and the expression recognizer, plus
//! the frozen identity-feature embedder.
//!
//! At image size 128 the layer widths follow the reference tables exactly.
//! Other power-of-two sizes use the scaling rule from [`width_plan`]: for
//! size 2^k, (k-2) stride-2 stages with widths 64·2^i capped at 512, so the
//! encoder always bottlenecks at a 4×4 map and the decoder mirrors it.
//!
//! Every forward returns `(outputs, cache)`; backward passes take the cache,
//! the output gradient, and an optional gradient accumulator (`None` means
//! only the input gradient is wanted, e.g. when a loss reaches the generator
//! through a frozen discriminator). Parameter arrays are exposed positionally
//! through `params` / `params_mut` / `param_names`, always in the same order,
//! which is the contract the optimizer and the checkpoint format rely on.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::nn::act;
use crate::nn::conv::{Conv2d, Conv2dCache, Conv2dGrads};
use crate::nn::deconv::{Deconv2d, Deconv2dCache, Deconv2dGrads};
use crate::nn::dropout::dropout;
use crate::nn::init::{fill_normal, he_std, GAN_WEIGHT_STD};
use crate::nn::linear::{Linear, LinearCache, LinearGrads};
use crate::nn::norm::{InstanceNorm, InstanceNormCache, InstanceNormGrads};
use crate::optim::Adam;
use crate::real::Real;

const LRELU_SLOPE: f64 = 0.2;
const DROPOUT_P: f64 = 0.5;

/// Widths per layer for one image size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WidthPlan {
    /// Encoder stride-2 conv widths, ending at a 4×4 map.
    pub encoder: Vec<usize>,
    /// Decoder deconv widths excluding the final image-channel layer.
    pub decoder: Vec<usize>,
    /// Image-discriminator trunk conv widths.
    pub trunk: Vec<usize>,
    /// Width of the first conv in the classifier head.
    pub cls1: usize,
}

/// Layer widths for a given image size. Size 128 reproduces the reference
/// tables (encoder up to 1024 channels, four trunk layers); other sizes use
/// the uniform desk-scale rule.
pub fn width_plan(image_size: usize) -> WidthPlan {
    assert!(
        image_size.is_power_of_two() && image_size >= 32,
        "image size must be a power of two >= 32, got {image_size}"
    );
    let k = image_size.trailing_zeros() as usize;
    let stages = k - 2;
    let encoder: Vec<usize> = (0..stages)
        .map(|i| (64usize << i).min(if image_size == 128 { 1024 } else { 512 }))
        .collect();
    let decoder: Vec<usize> = encoder.iter().rev().map(|w| w / 2).collect();
    let trunk_stages = if image_size == 128 { 4 } else { stages };
    let trunk: Vec<usize> = (0..trunk_stages).map(|i| (64usize << i).min(512)).collect();
    let cls1 = (2 * trunk.last().unwrap()).min(1024);
    WidthPlan {
        encoder,
        decoder,
        trunk,
        cls1,
    }
}

/// One row of the expected-shape table: layer name, human-readable kind, the
/// per-sample output shape, and the parameter count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    pub name: String,
    pub kind: String,
    pub out: Vec<usize>,
    pub params: usize,
}

/// Per-sample shapes actually produced by a forward pass, in layer order.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

fn push_trace(trace: &mut Option<&mut ShapeTrace>, name: &str, shape: &[usize]) {
    if let Some(t) = trace.as_deref_mut() {
        t.push((name.to_string(), shape[1..].to_vec()));
    }
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

/// Maps an image to a latent vector in (-1,1)^n: stride-2 conv stages with
/// instance norm and leaky ReLU, then one fully connected layer under Tanh.
pub struct Encoder<F> {
    pub convs: Vec<Conv2d<F>>,
    pub norms: Vec<InstanceNorm<F>>,
    pub fc: Linear<F>,
    image_size: usize,
}

pub struct EncoderGrads<F> {
    pub convs: Vec<Conv2dGrads<F>>,
    pub norms: Vec<InstanceNormGrads<F>>,
    pub fc: LinearGrads<F>,
}

pub struct EncoderCache<F> {
    conv: Vec<Conv2dCache<F>>,
    norm: Vec<InstanceNormCache<F>>,
    mask: Vec<Array4<F>>,
    pre_flat: (usize, usize, usize, usize),
    fc: LinearCache<F>,
    z: Array2<F>,
}

impl<F: Real> Encoder<F> {
    pub fn new(image_size: usize, channels: usize, latent_dim: usize) -> Self {
        let plan = width_plan(image_size);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut c_in = channels;
        for &w in &plan.encoder {
            convs.push(Conv2d::new(c_in, w, 4, 2, 1));
            norms.push(InstanceNorm::new(w));
            c_in = w;
        }
        let flat = c_in * 16;
        Encoder {
            convs,
            norms,
            fc: Linear::new(flat, latent_dim),
            image_size,
        }
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        for c in &mut self.convs {
            fill_normal(&mut c.w, GAN_WEIGHT_STD, rng);
        }
        fill_normal(&mut self.fc.w, GAN_WEIGHT_STD, rng);
    }

    pub fn latent_dim(&self) -> usize {
        self.fc.w.shape()[0]
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array2<F>, EncoderCache<F>) {
        self.forward_inner(x, &mut None)
    }

    pub fn forward_traced(&self, x: &Array4<F>) -> (Array2<F>, EncoderCache<F>, ShapeTrace) {
        let mut trace = ShapeTrace::new();
        let (z, cache) = self.forward_inner(x, &mut Some(&mut trace));
        (z, cache, trace)
    }

    fn forward_inner(
        &self,
        x: &Array4<F>,
        trace: &mut Option<&mut ShapeTrace>,
    ) -> (Array2<F>, EncoderCache<F>) {
        assert_eq!(x.shape()[2], self.image_size, "input size mismatch");
        let slope = F::from_f64(LRELU_SLOPE);
        let mut conv_caches = Vec::new();
        let mut norm_caches = Vec::new();
        let mut masks = Vec::new();
        let mut h = x.clone();
        for (i, (conv, norm)) in self.convs.iter().zip(&self.norms).enumerate() {
            let (a, cc) = conv.forward(&h);
            let (n, nc) = norm.forward(&a);
            let (y, m) = act::lrelu(&n, slope);
            push_trace(trace, &format!("enc.conv{i}"), y.shape());
            conv_caches.push(cc);
            norm_caches.push(nc);
            masks.push(m);
            h = y;
        }
        let pre_flat = h.dim();
        let flat = h
            .into_shape((pre_flat.0, pre_flat.1 * pre_flat.2 * pre_flat.3))
            .expect("encoder feature map is standard layout");
        let (pre, fc_cache) = self.fc.forward(&flat);
        let z = act::tanh(&pre);
        push_trace(trace, "enc.fc", z.shape());
        let cache = EncoderCache {
            conv: conv_caches,
            norm: norm_caches,
            mask: masks,
            pre_flat,
            fc: fc_cache,
            z: z.clone(),
        };
        (z, cache)
    }

    pub fn backward(
        &self,
        cache: &EncoderCache<F>,
        dz: &Array2<F>,
        mut grads: Option<&mut EncoderGrads<F>>,
    ) -> Array4<F> {
        let dpre = act::tanh_backward(dz, &cache.z);
        let dflat = self
            .fc
            .backward(&cache.fc, &dpre, grads.as_deref_mut().map(|g| &mut g.fc));
        let mut dh = dflat
            .into_shape(cache.pre_flat)
            .expect("flat gradient is standard layout");
        for i in (0..self.convs.len()).rev() {
            let dn = act::piecewise_backward(&dh, &cache.mask[i]);
            let da = self.norms[i].backward(
                &cache.norm[i],
                &dn,
                grads.as_deref_mut().map(|g| &mut g.norms[i]),
            );
            dh = self.convs[i].backward(
                &cache.conv[i],
                &da,
                grads.as_deref_mut().map(|g| &mut g.convs[i]),
            );
        }
        dh
    }

    pub fn zero_grads(&self) -> EncoderGrads<F> {
        EncoderGrads {
            convs: self.convs.iter().map(|c| c.zero_grads()).collect(),
            norms: self.norms.iter().map(|n| n.zero_grads()).collect(),
            fc: self.fc.zero_grads(),
        }
    }

    pub fn plan(&self, channels: usize) -> Vec<LayerPlan> {
        let mut rows = Vec::new();
        let mut hw = self.image_size;
        let mut c_in = channels;
        for (i, conv) in self.convs.iter().enumerate() {
            hw = conv.out_hw(hw, hw).0;
            let w = conv.w.shape()[0];
            rows.push(LayerPlan {
                name: format!("enc.conv{i}"),
                kind: format!("Conv({w},4,2) IN LReLU"),
                out: vec![w, hw, hw],
                params: conv.param_count() + self.norms[i].param_count(),
            });
            c_in = w;
        }
        let _ = c_in;
        rows.push(LayerPlan {
            name: "enc.fc".into(),
            kind: format!("FC({}) Tanh", self.latent_dim()),
            out: vec![self.latent_dim()],
            params: self.fc.param_count(),
        });
        rows
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("enc.conv{i}.w"));
            names.push(format!("enc.conv{i}.b"));
            names.push(format!("enc.in{i}.gamma"));
            names.push(format!("enc.in{i}.beta"));
        }
        names.push("enc.fc.w".into());
        names.push("enc.fc.b".into());
        names
    }

    pub fn params(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            out.push(c.w.as_slice().unwrap());
            out.push(c.b.as_slice().unwrap());
            out.push(n.gamma.as_slice().unwrap());
            out.push(n.beta.as_slice().unwrap());
        }
        out.push(self.fc.w.as_slice().unwrap());
        out.push(self.fc.b.as_slice().unwrap());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for (c, n) in self.convs.iter_mut().zip(&mut self.norms) {
            out.push(c.w.as_slice_mut().unwrap());
            out.push(c.b.as_slice_mut().unwrap());
            out.push(n.gamma.as_slice_mut().unwrap());
            out.push(n.beta.as_slice_mut().unwrap());
        }
        out.push(self.fc.w.as_slice_mut().unwrap());
        out.push(self.fc.b.as_slice_mut().unwrap());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|s| s.len()).sum()
    }
}

impl<F: Real> EncoderGrads<F> {
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            out.push(c.dw.as_slice().unwrap());
            out.push(c.db.as_slice().unwrap());
            out.push(n.dgamma.as_slice().unwrap());
            out.push(n.dbeta.as_slice().unwrap());
        }
        out.push(self.fc.dw.as_slice().unwrap());
        out.push(self.fc.db.as_slice().unwrap());
        out
    }
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

/// Maps `[latent, expression code]` back to an image: the concatenated
/// vector enters as a 1×1 map, the first deconv (pad 0) expands it to 4×4,
/// each later deconv doubles the size, and the final layer emits `channels`
/// maps under Tanh.
pub struct Decoder<F> {
    pub deconvs: Vec<Deconv2d<F>>,
    pub norms: Vec<InstanceNorm<F>>,
    latent_dim: usize,
    code_dim: usize,
}

pub struct DecoderGrads<F> {
    pub deconvs: Vec<Deconv2dGrads<F>>,
    pub norms: Vec<InstanceNormGrads<F>>,
}

pub struct DecoderCache<F> {
    deconv: Vec<Deconv2dCache<F>>,
    norm: Vec<InstanceNormCache<F>>,
    mask: Vec<Array4<F>>,
    out: Array4<F>,
}

impl<F: Real> Decoder<F> {
    pub fn new(image_size: usize, channels: usize, latent_dim: usize, code_dim: usize) -> Self {
        let plan = width_plan(image_size);
        let mut deconvs = Vec::new();
        let mut norms = Vec::new();
        let mut c_in = latent_dim + code_dim;
        for (i, &w) in plan.decoder.iter().enumerate() {
            let pad = if i == 0 { 0 } else { 1 };
            deconvs.push(Deconv2d::new(c_in, w, 4, 2, pad));
            norms.push(InstanceNorm::new(w));
            c_in = w;
        }
        deconvs.push(Deconv2d::new(c_in, channels, 4, 2, 1));
        Decoder {
            deconvs,
            norms,
            latent_dim,
            code_dim,
        }
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        for d in &mut self.deconvs {
            fill_normal(&mut d.w, GAN_WEIGHT_STD, rng);
        }
    }

    pub fn forward(&self, z: &Array2<F>, u: &Array2<F>) -> (Array4<F>, DecoderCache<F>) {
        self.forward_inner(z, u, &mut None)
    }

    pub fn forward_traced(
        &self,
        z: &Array2<F>,
        u: &Array2<F>,
    ) -> (Array4<F>, DecoderCache<F>, ShapeTrace) {
        let mut trace = ShapeTrace::new();
        let (img, cache) = self.forward_inner(z, u, &mut Some(&mut trace));
        (img, cache, trace)
    }

    fn forward_inner(
        &self,
        z: &Array2<F>,
        u: &Array2<F>,
        trace: &mut Option<&mut ShapeTrace>,
    ) -> (Array4<F>, DecoderCache<F>) {
        assert_eq!(z.shape()[1], self.latent_dim, "latent width mismatch");
        assert_eq!(u.shape()[1], self.code_dim, "code width mismatch");
        assert_eq!(z.shape()[0], u.shape()[0], "batch mismatch");
        let batch = z.shape()[0];
        let mut h = Array4::zeros((batch, self.latent_dim + self.code_dim, 1, 1));
        for bi in 0..batch {
            for j in 0..self.latent_dim {
                h[[bi, j, 0, 0]] = z[[bi, j]];
            }
            for j in 0..self.code_dim {
                h[[bi, self.latent_dim + j, 0, 0]] = u[[bi, j]];
            }
        }

        let mut deconv_caches = Vec::new();
        let mut norm_caches = Vec::new();
        let mut masks = Vec::new();
        for (i, d) in self.deconvs.iter().enumerate() {
            let last = i + 1 == self.deconvs.len();
            let (a, dc) = d.forward(&h);
            deconv_caches.push(dc);
            if last {
                let y = act::tanh(&a);
                push_trace(trace, &format!("dec.deconv{i}"), y.shape());
                let cache = DecoderCache {
                    deconv: deconv_caches,
                    norm: norm_caches,
                    mask: masks,
                    out: y.clone(),
                };
                return (y, cache);
            }
            let (n, nc) = self.norms[i].forward(&a);
            let (y, m) = act::relu(&n);
            push_trace(trace, &format!("dec.deconv{i}"), y.shape());
            norm_caches.push(nc);
            masks.push(m);
            h = y;
        }
        unreachable!("decoder always has at least one deconv");
    }

    /// Returns the gradient with respect to the latent input (the expression
    /// code is an exogenous constant, so its gradient is discarded).
    pub fn backward(
        &self,
        cache: &DecoderCache<F>,
        dimg: &Array4<F>,
        mut grads: Option<&mut DecoderGrads<F>>,
    ) -> Array2<F> {
        let last = self.deconvs.len() - 1;
        let mut dh = act::tanh_backward(dimg, &cache.out);
        for i in (0..=last).rev() {
            if i != last {
                let dn = act::piecewise_backward(&dh, &cache.mask[i]);
                dh = self.norms[i].backward(
                    &cache.norm[i],
                    &dn,
                    grads.as_deref_mut().map(|g| &mut g.norms[i]),
                );
            }
            dh = self.deconvs[i].backward(
                &cache.deconv[i],
                &dh,
                grads.as_deref_mut().map(|g| &mut g.deconvs[i]),
            );
        }
        let batch = dh.shape()[0];
        let din = dh
            .into_shape((batch, self.latent_dim + self.code_dim))
            .expect("1x1 map flattens losslessly");
        din.slice(ndarray::s![.., ..self.latent_dim]).to_owned()
    }

    pub fn zero_grads(&self) -> DecoderGrads<F> {
        DecoderGrads {
            deconvs: self.deconvs.iter().map(|d| d.zero_grads()).collect(),
            norms: self.norms.iter().map(|n| n.zero_grads()).collect(),
        }
    }

    pub fn plan(&self) -> Vec<LayerPlan> {
        let mut rows = Vec::new();
        let mut hw = 1;
        for (i, d) in self.deconvs.iter().enumerate() {
            let last = i + 1 == self.deconvs.len();
            hw = d.out_hw(hw, hw).0;
            let w = d.w.shape()[1];
            let kind = if last {
                format!("DeConv({w},4,2) Tanh")
            } else {
                format!("DeConv({w},4,2) IN ReLU")
            };
            let params = d.param_count() + if last { 0 } else { self.norms[i].param_count() };
            rows.push(LayerPlan {
                name: format!("dec.deconv{i}"),
                kind,
                out: vec![w, hw, hw],
                params,
            });
        }
        rows
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.deconvs.len() {
            names.push(format!("dec.deconv{i}.w"));
            names.push(format!("dec.deconv{i}.b"));
            if i < self.norms.len() {
                names.push(format!("dec.in{i}.gamma"));
                names.push(format!("dec.in{i}.beta"));
            }
        }
        names
    }

    pub fn params(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for (i, d) in self.deconvs.iter().enumerate() {
            out.push(d.w.as_slice().unwrap());
            out.push(d.b.as_slice().unwrap());
            if i < self.norms.len() {
                out.push(self.norms[i].gamma.as_slice().unwrap());
                out.push(self.norms[i].beta.as_slice().unwrap());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        let mut norms = self.norms.iter_mut();
        for d in self.deconvs.iter_mut() {
            out.push(d.w.as_slice_mut().unwrap());
            out.push(d.b.as_slice_mut().unwrap());
            if let Some(n) = norms.next() {
                out.push(n.gamma.as_slice_mut().unwrap());
                out.push(n.beta.as_slice_mut().unwrap());
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|s| s.len()).sum()
    }
}

impl<F: Real> DecoderGrads<F> {
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for (i, d) in self.deconvs.iter().enumerate() {
            out.push(d.dw.as_slice().unwrap());
            out.push(d.db.as_slice().unwrap());
            if i < self.norms.len() {
                out.push(self.norms[i].dgamma.as_slice().unwrap());
                out.push(self.norms[i].dbeta.as_slice().unwrap());
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Image discriminator
// ---------------------------------------------------------------------------

/// Shared conv trunk with two heads: an unbounded patch map of adversarial
/// scores and a K-way expression classifier. No normalization anywhere, as
/// required for a gradient-penalty critic.
pub struct ImageDisc<F> {
    pub trunk: Vec<Conv2d<F>>,
    pub adv: Conv2d<F>,
    pub cls1: Conv2d<F>,
    pub cls2: Conv2d<F>,
}

pub struct ImageDiscGrads<F> {
    pub trunk: Vec<Conv2dGrads<F>>,
    pub adv: Conv2dGrads<F>,
    pub cls1: Conv2dGrads<F>,
    pub cls2: Conv2dGrads<F>,
}

pub struct ImageDiscCache<F> {
    trunk: Vec<Conv2dCache<F>>,
    mask: Vec<Array4<F>>,
    adv: Conv2dCache<F>,
    cls1: Conv2dCache<F>,
    cls1_mask: Array4<F>,
    cls2: Conv2dCache<F>,
    adv_patches: usize,
    trunk_out_dim: (usize, usize, usize, usize),
}

/// Tangent-pass caches from [`ImageDisc::tangent_adv_mean`], consumed by
/// [`ImageDisc::tangent_backward`].
pub struct AdvTangent<F> {
    trunk: Vec<Conv2dCache<F>>,
    adv: Conv2dCache<F>,
}

impl<F: Real> ImageDisc<F> {
    /// `trunk_widths` and `cls1_width` normally come from [`width_plan`];
    /// tests pass hand-built geometries.
    pub fn new(
        image_size: usize,
        channels: usize,
        class_count: usize,
        trunk_widths: &[usize],
        cls1_width: usize,
    ) -> Self {
        let mut trunk = Vec::new();
        let mut c_in = channels;
        let mut hw = image_size;
        for &w in trunk_widths {
            trunk.push(Conv2d::new(c_in, w, 4, 2, 1));
            c_in = w;
            hw /= 2;
        }
        let adv = Conv2d::new(c_in, 1, 4, 2, 1);
        let cls1 = Conv2d::new(c_in, cls1_width, 4, 2, 1);
        let cls1_out = hw / 2;
        assert!(cls1_out <= 4, "classifier head expects a small trunk map");
        let cls2 = Conv2d::new(cls1_width, class_count, 4, 1, (4 - cls1_out) / 2);
        ImageDisc {
            trunk,
            adv,
            cls1,
            cls2,
        }
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        for c in &mut self.trunk {
            fill_normal(&mut c.w, GAN_WEIGHT_STD, rng);
        }
        fill_normal(&mut self.adv.w, GAN_WEIGHT_STD, rng);
        fill_normal(&mut self.cls1.w, GAN_WEIGHT_STD, rng);
        fill_normal(&mut self.cls2.w, GAN_WEIGHT_STD, rng);
    }

    pub fn class_count(&self) -> usize {
        self.cls2.w.shape()[0]
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, Array2<F>, ImageDiscCache<F>) {
        self.forward_inner(x, &mut None)
    }

    pub fn forward_traced(
        &self,
        x: &Array4<F>,
    ) -> (Array4<F>, Array2<F>, ImageDiscCache<F>, ShapeTrace) {
        let mut trace = ShapeTrace::new();
        let (adv, logits, cache) = self.forward_inner(x, &mut Some(&mut trace));
        (adv, logits, cache, trace)
    }

    fn forward_inner(
        &self,
        x: &Array4<F>,
        trace: &mut Option<&mut ShapeTrace>,
    ) -> (Array4<F>, Array2<F>, ImageDiscCache<F>) {
        let slope = F::from_f64(LRELU_SLOPE);
        let mut trunk_caches = Vec::new();
        let mut masks = Vec::new();
        let mut h = x.clone();
        for (i, conv) in self.trunk.iter().enumerate() {
            let (a, cc) = conv.forward(&h);
            let (y, m) = act::lrelu(&a, slope);
            push_trace(trace, &format!("dimg.conv{i}"), y.shape());
            trunk_caches.push(cc);
            masks.push(m);
            h = y;
        }
        let trunk_out_dim = h.dim();

        let (adv_map, adv_cache) = self.adv.forward(&h);
        push_trace(trace, "dimg.adv", adv_map.shape());

        let (c1, cls1_cache) = self.cls1.forward(&h);
        let (c1y, cls1_mask) = act::lrelu(&c1, slope);
        push_trace(trace, "dimg.cls1", c1y.shape());
        let (c2, cls2_cache) = self.cls2.forward(&c1y);
        push_trace(trace, "dimg.cls2", c2.shape());
        let (b, k, ch, cw) = c2.dim();
        assert_eq!((ch, cw), (1, 1), "classifier head must reduce to 1x1");
        let logits = c2
            .into_shape((b, k))
            .expect("1x1 logit map flattens losslessly");

        let adv_patches = adv_map.shape()[2] * adv_map.shape()[3];
        let cache = ImageDiscCache {
            trunk: trunk_caches,
            mask: masks,
            adv: adv_cache,
            cls1: cls1_cache,
            cls1_mask,
            cls2: cls2_cache,
            adv_patches,
            trunk_out_dim,
        };
        (adv_map, logits, cache)
    }

    /// Backward from either or both heads. Returns the input-image gradient.
    pub fn backward(
        &self,
        cache: &ImageDiscCache<F>,
        d_adv: Option<&Array4<F>>,
        d_logits: Option<&Array2<F>>,
        mut grads: Option<&mut ImageDiscGrads<F>>,
    ) -> Array4<F> {
        let mut dtrunk = Array4::zeros(cache.trunk_out_dim);
        if let Some(da) = d_adv {
            let dx = self
                .adv
                .backward(&cache.adv, da, grads.as_deref_mut().map(|g| &mut g.adv));
            dtrunk += &dx;
        }
        if let Some(dl) = d_logits {
            let (b, k) = dl.dim();
            let dmap = dl
                .to_owned()
                .into_shape((b, k, 1, 1))
                .expect("logit gradient is standard layout");
            let dc1y = self.cls2.backward(
                &cache.cls2,
                &dmap,
                grads.as_deref_mut().map(|g| &mut g.cls2),
            );
            let dc1 = act::piecewise_backward(&dc1y, &cache.cls1_mask);
            let dx = self.cls1.backward(
                &cache.cls1,
                &dc1,
                grads.as_deref_mut().map(|g| &mut g.cls1),
            );
            dtrunk += &dx;
        }
        let mut dh = dtrunk;
        for i in (0..self.trunk.len()).rev() {
            let da = act::piecewise_backward(&dh, &cache.mask[i]);
            dh = self.trunk[i].backward(
                &cache.trunk[i],
                &da,
                grads.as_deref_mut().map(|g| &mut g.trunk[i]),
            );
        }
        dh
    }

    /// Gradient of each sample's mean adversarial score with respect to its
    /// input pixels. No parameter gradients are touched.
    pub fn adv_mean_input_grad(&self, x: &Array4<F>) -> (Array4<F>, ImageDiscCache<F>) {
        let (adv_map, _, cache) = self.forward(x);
        let scale = F::from_f64(1.0 / cache.adv_patches as f64);
        let d_adv = Array4::from_elem(adv_map.raw_dim(), scale);
        let g = self.backward(&cache, Some(&d_adv), None, None);
        (g, cache)
    }

    /// Directional derivative of each sample's mean adversarial score along
    /// the input direction `u`, with the primal activation pattern frozen:
    /// the forward half of the double-backward used by the gradient penalty.
    pub fn tangent_adv_mean(
        &self,
        cache: &ImageDiscCache<F>,
        u: &Array4<F>,
    ) -> (Array1<F>, AdvTangent<F>) {
        let mut t = u.clone();
        let mut tcaches = Vec::new();
        for (conv, mask) in self.trunk.iter().zip(&cache.mask) {
            let (ta, tc) = conv.forward_tangent(&t);
            tcaches.push(tc);
            t = &ta * mask;
        }
        let (tadv, adv_tc) = self.adv.forward_tangent(&t);
        let batch = tadv.shape()[0];
        let scale = F::from_f64(1.0 / cache.adv_patches as f64);
        let mut scalars = Array1::zeros(batch);
        for bi in 0..batch {
            let mut acc = F::zero();
            for &v in tadv.index_axis(Axis(0), bi).iter() {
                acc = acc + v;
            }
            scalars[bi] = acc * scale;
        }
        (
            scalars,
            AdvTangent {
                trunk: tcaches,
                adv: adv_tc,
            },
        )
    }

    /// Reverse pass over the tangent graph: accumulates the weight gradients
    /// of `sum_b d_scalar[b] * tangent_scalar[b]`. Biases never enter the
    /// tangent graph, so their gradients are untouched.
    pub fn tangent_backward(
        &self,
        cache: &ImageDiscCache<F>,
        tangent: &AdvTangent<F>,
        d_scalar: &Array1<F>,
        grads: &mut ImageDiscGrads<F>,
    ) {
        let (b, _, h, w) = cache.trunk_out_dim;
        let adv_hw = self.adv.out_hw(h, w);
        let scale = F::from_f64(1.0 / cache.adv_patches as f64);
        let mut dmap = Array4::zeros((b, 1, adv_hw.0, adv_hw.1));
        for bi in 0..b {
            let v = d_scalar[bi] * scale;
            dmap.index_axis_mut(Axis(0), bi).mapv_inplace(|_| v);
        }
        let mut dh = self
            .adv
            .backward_tangent(&tangent.adv, &dmap, Some(&mut grads.adv));
        for i in (0..self.trunk.len()).rev() {
            let da = act::piecewise_backward(&dh, &cache.mask[i]);
            dh = self.trunk[i].backward_tangent(&tangent.trunk[i], &da, Some(&mut grads.trunk[i]));
        }
    }

    /// Gradient-penalty value `coeff * mean_b (|grad_x f(x_b)| - 1)^2` where
    /// `f` is the per-sample mean adversarial score. When `grads` is given,
    /// the penalty's parameter gradients are accumulated via a tangent pass
    /// with the activation pattern frozen (the a.e. derivative).
    pub fn grad_penalty(
        &self,
        x: &Array4<F>,
        coeff: F,
        grads: Option<&mut ImageDiscGrads<F>>,
    ) -> F {
        let batch = x.shape()[0];
        let bf = F::from_f64(batch as f64);
        let (g, cache) = self.adv_mean_input_grad(x);
        let mut norms = Array1::zeros(batch);
        for bi in 0..batch {
            let mut acc = F::zero();
            for &v in g.index_axis(Axis(0), bi).iter() {
                acc = acc + v * v;
            }
            norms[bi] = acc.sqrt();
        }
        let mut value = F::zero();
        for bi in 0..batch {
            let d = norms[bi] - F::one();
            value = value + d * d;
        }
        value = coeff * value / bf;

        if let Some(gr) = grads {
            let tiny = F::from_f64(1e-12);
            let mut u = g;
            for bi in 0..batch {
                let n = norms[bi];
                let c = if n < tiny {
                    F::zero()
                } else {
                    coeff * F::from_f64(2.0) * (n - F::one()) / (n * bf)
                };
                u.index_axis_mut(Axis(0), bi).mapv_inplace(|v| v * c);
            }
            let (_scalars, tangent) = self.tangent_adv_mean(&cache, &u);
            let ones = Array1::from_elem(batch, F::one());
            self.tangent_backward(&cache, &tangent, &ones, gr);
        }
        value
    }

    pub fn zero_grads(&self) -> ImageDiscGrads<F> {
        ImageDiscGrads {
            trunk: self.trunk.iter().map(|c| c.zero_grads()).collect(),
            adv: self.adv.zero_grads(),
            cls1: self.cls1.zero_grads(),
            cls2: self.cls2.zero_grads(),
        }
    }

    pub fn plan(&self, image_size: usize) -> Vec<LayerPlan> {
        let mut rows = Vec::new();
        let mut hw = image_size;
        for (i, conv) in self.trunk.iter().enumerate() {
            hw = conv.out_hw(hw, hw).0;
            let w = conv.w.shape()[0];
            rows.push(LayerPlan {
                name: format!("dimg.conv{i}"),
                kind: format!("Conv({w},4,2) LReLU"),
                out: vec![w, hw, hw],
                params: conv.param_count(),
            });
        }
        let adv_hw = self.adv.out_hw(hw, hw).0;
        rows.push(LayerPlan {
            name: "dimg.adv".into(),
            kind: "Conv(1,4,2) patch scores".into(),
            out: vec![1, adv_hw, adv_hw],
            params: self.adv.param_count(),
        });
        let c1_hw = self.cls1.out_hw(hw, hw).0;
        let c1_w = self.cls1.w.shape()[0];
        rows.push(LayerPlan {
            name: "dimg.cls1".into(),
            kind: format!("Conv({c1_w},4,2) LReLU"),
            out: vec![c1_w, c1_hw, c1_hw],
            params: self.cls1.param_count(),
        });
        let k = self.class_count();
        rows.push(LayerPlan {
            name: "dimg.cls2".into(),
            kind: format!("Conv({k},4,1) logits"),
            out: vec![k, 1, 1],
            params: self.cls2.param_count(),
        });
        rows
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.trunk.len() {
            names.push(format!("dimg.conv{i}.w"));
            names.push(format!("dimg.conv{i}.b"));
        }
        for head in ["adv", "cls1", "cls2"] {
            names.push(format!("dimg.{head}.w"));
            names.push(format!("dimg.{head}.b"));
        }
        names
    }

    pub fn params(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for c in &self.trunk {
            out.push(c.w.as_slice().unwrap());
            out.push(c.b.as_slice().unwrap());
        }
        for head in [&self.adv, &self.cls1, &self.cls2] {
            out.push(head.w.as_slice().unwrap());
            out.push(head.b.as_slice().unwrap());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for c in &mut self.trunk {
            out.push(c.w.as_slice_mut().unwrap());
            out.push(c.b.as_slice_mut().unwrap());
        }
        for head in [&mut self.adv, &mut self.cls1, &mut self.cls2] {
            out.push(head.w.as_slice_mut().unwrap());
            out.push(head.b.as_slice_mut().unwrap());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|s| s.len()).sum()
    }
}

impl<F: Real> ImageDiscGrads<F> {
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for c in &self.trunk {
            out.push(c.dw.as_slice().unwrap());
            out.push(c.db.as_slice().unwrap());
        }
        for head in [&self.adv, &self.cls1, &self.cls2] {
            out.push(head.dw.as_slice().unwrap());
            out.push(head.db.as_slice().unwrap());
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Latent discriminator
// ---------------------------------------------------------------------------

/// Four fully connected layers (widths 64, 32, 16, 1) with leaky ReLU between
/// them and a terminal sigmoid. `forward` also exposes the pre-sigmoid logit
/// so losses can take gradients in logit space, which is exact and avoids
/// dividing by a saturated probability.
pub struct LatentDisc<F> {
    pub fcs: Vec<Linear<F>>,
}

pub struct LatentDiscGrads<F> {
    pub fcs: Vec<LinearGrads<F>>,
}

pub struct LatentDiscCache<F> {
    fc: Vec<LinearCache<F>>,
    mask: Vec<Array2<F>>,
}

impl<F: Real> LatentDisc<F> {
    pub fn new(latent_dim: usize) -> Self {
        let widths = [64usize, 32, 16, 1];
        let mut fcs = Vec::new();
        let mut d_in = latent_dim;
        for &w in &widths {
            fcs.push(Linear::new(d_in, w));
            d_in = w;
        }
        LatentDisc { fcs }
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        for fc in &mut self.fcs {
            fill_normal(&mut fc.w, GAN_WEIGHT_STD, rng);
        }
    }

    /// Returns `(probabilities, logits, cache)`, both of length batch.
    pub fn forward(&self, v: &Array2<F>) -> (Array1<F>, Array1<F>, LatentDiscCache<F>) {
        self.forward_inner(v, &mut None)
    }

    pub fn forward_traced(
        &self,
        v: &Array2<F>,
    ) -> (Array1<F>, Array1<F>, LatentDiscCache<F>, ShapeTrace) {
        let mut trace = ShapeTrace::new();
        let (p, l, cache) = self.forward_inner(v, &mut Some(&mut trace));
        (p, l, cache, trace)
    }

    fn forward_inner(
        &self,
        v: &Array2<F>,
        trace: &mut Option<&mut ShapeTrace>,
    ) -> (Array1<F>, Array1<F>, LatentDiscCache<F>) {
        let slope = F::from_f64(LRELU_SLOPE);
        let mut fc_caches = Vec::new();
        let mut masks = Vec::new();
        let mut h = v.clone();
        for (i, fc) in self.fcs.iter().enumerate() {
            let last = i + 1 == self.fcs.len();
            let (a, c) = fc.forward(&h);
            fc_caches.push(c);
            if last {
                push_trace(trace, &format!("dz.fc{i}"), a.shape());
                let logits = a.index_axis(Axis(1), 0).to_owned();
                let probs = logits.mapv(|x| F::one() / (F::one() + (-x).exp()));
                let cache = LatentDiscCache {
                    fc: fc_caches,
                    mask: masks,
                };
                return (probs, logits, cache);
            }
            let (y, m) = act::lrelu(&a, slope);
            push_trace(trace, &format!("dz.fc{i}"), y.shape());
            masks.push(m);
            h = y;
        }
        unreachable!("latent discriminator always has layers");
    }

    /// Backward from the gradient with respect to the pre-sigmoid logits.
    pub fn backward(
        &self,
        cache: &LatentDiscCache<F>,
        d_logits: &Array1<F>,
        mut grads: Option<&mut LatentDiscGrads<F>>,
    ) -> Array2<F> {
        let batch = d_logits.len();
        let mut dh = d_logits
            .to_owned()
            .into_shape((batch, 1))
            .expect("logit gradient reshapes to a column");
        let last = self.fcs.len() - 1;
        for i in (0..=last).rev() {
            if i != last {
                dh = act::piecewise_backward(&dh, &cache.mask[i]);
            }
            dh = self.fcs[i].backward(
                &cache.fc[i],
                &dh,
                grads.as_deref_mut().map(|g| &mut g.fcs[i]),
            );
        }
        dh
    }

    pub fn zero_grads(&self) -> LatentDiscGrads<F> {
        LatentDiscGrads {
            fcs: self.fcs.iter().map(|f| f.zero_grads()).collect(),
        }
    }

    pub fn plan(&self) -> Vec<LayerPlan> {
        self.fcs
            .iter()
            .enumerate()
            .map(|(i, fc)| {
                let w = fc.w.shape()[0];
                let kind = if i + 1 == self.fcs.len() {
                    "FC(1) Sigmoid".to_string()
                } else {
                    format!("FC({w}) LReLU")
                };
                LayerPlan {
                    name: format!("dz.fc{i}"),
                    kind,
                    out: vec![w],
                    params: fc.param_count(),
                }
            })
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.fcs.len())
            .flat_map(|i| [format!("dz.fc{i}.w"), format!("dz.fc{i}.b")])
            .collect()
    }

    pub fn params(&self) -> Vec<&[F]> {
        self.fcs
            .iter()
            .flat_map(|f| [f.w.as_slice().unwrap(), f.b.as_slice().unwrap()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        self.fcs
            .iter_mut()
            .flat_map(|f| {
                let Linear { w, b } = f;
                [w.as_slice_mut().unwrap(), b.as_slice_mut().unwrap()]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|s| s.len()).sum()
    }
}

impl<F: Real> LatentDiscGrads<F> {
    pub fn slices(&self) -> Vec<&[F]> {
        self.fcs
            .iter()
            .flat_map(|f| [f.dw.as_slice().unwrap(), f.db.as_slice().unwrap()])
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Recognizer
// ---------------------------------------------------------------------------

/// Expression recognizer: four stride-2 convs (the first two form the
/// backbone slot, trainable by default and freezable to emulate a pretrained
/// stem), then FC(2048) and FC(512) under ReLU. The 512-wide post-ReLU
/// activations are the published features; dropout applies only between the
/// features and the classifier layer, and only in training mode.
pub struct Recognizer<F> {
    pub convs: Vec<Conv2d<F>>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    pub cls: Linear<F>,
    pub backbone_frozen: bool,
    image_size: usize,
}

pub struct RecognizerGrads<F> {
    pub convs: Vec<Conv2dGrads<F>>,
    pub fc1: LinearGrads<F>,
    pub fc2: LinearGrads<F>,
    pub cls: LinearGrads<F>,
}

pub struct RecCache<F> {
    conv: Vec<Conv2dCache<F>>,
    cmask: Vec<Array4<F>>,
    pre_flat: (usize, usize, usize, usize),
    fc1: LinearCache<F>,
    m1: Array2<F>,
    fc2: LinearCache<F>,
    m2: Array2<F>,
    drop_mask: Option<Array2<F>>,
    cls: LinearCache<F>,
}

/// Features (post-ReLU, pre-dropout) and class logits.
pub struct RecOut<F> {
    pub features: Array2<F>,
    pub logits: Array2<F>,
}

const REC_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const REC_BACKBONE_LAYERS: usize = 2;

impl<F: Real> Recognizer<F> {
    pub fn new(image_size: usize, channels: usize, class_count: usize) -> Self {
        let mut convs = Vec::new();
        let mut c_in = channels;
        let mut hw = image_size;
        for &w in &REC_WIDTHS {
            convs.push(Conv2d::new(c_in, w, 3, 2, 1));
            c_in = w;
            hw = (hw + 1) / 2;
        }
        let flat = c_in * hw * hw;
        Recognizer {
            convs,
            fc1: Linear::new(flat, 2048),
            fc2: Linear::new(2048, 512),
            cls: Linear::new(512, class_count),
            backbone_frozen: false,
            image_size,
        }
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        for c in &mut self.convs {
            let fan_in = c.w.shape()[1] * c.kernel() * c.kernel();
            fill_normal(&mut c.w, he_std(fan_in), rng);
        }
        for fc in [&mut self.fc1, &mut self.fc2, &mut self.cls] {
            let std = he_std(fc.w.shape()[1]);
            fill_normal(&mut fc.w, std, rng);
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.fc2.w.shape()[0]
    }

    /// Training-mode forward: dropout between features and classifier.
    pub fn forward_train(
        &self,
        x: &Array4<F>,
        rng: &mut impl Rng,
    ) -> (RecOut<F>, RecCache<F>) {
        self.forward_inner(x, Some(rng), &mut None)
    }

    /// Evaluation-mode forward: deterministic, no dropout.
    pub fn forward_eval(&self, x: &Array4<F>) -> (RecOut<F>, RecCache<F>) {
        self.forward_inner::<rand::rngs::ThreadRng>(x, None, &mut None)
    }

    pub fn forward_traced(&self, x: &Array4<F>) -> (RecOut<F>, RecCache<F>, ShapeTrace) {
        let mut trace = ShapeTrace::new();
        let (out, cache) =
            self.forward_inner::<rand::rngs::ThreadRng>(x, None, &mut Some(&mut trace));
        (out, cache, trace)
    }

    fn forward_inner<R: Rng>(
        &self,
        x: &Array4<F>,
        mut rng: Option<&mut R>,
        trace: &mut Option<&mut ShapeTrace>,
    ) -> (RecOut<F>, RecCache<F>) {
        assert_eq!(x.shape()[2], self.image_size, "input size mismatch");
        let mut conv_caches = Vec::new();
        let mut cmasks = Vec::new();
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let (a, cc) = conv.forward(&h);
            let (y, m) = act::relu(&a);
            push_trace(trace, &format!("rec.conv{i}"), y.shape());
            conv_caches.push(cc);
            cmasks.push(m);
            h = y;
        }
        let pre_flat = h.dim();
        let flat = h
            .into_shape((pre_flat.0, pre_flat.1 * pre_flat.2 * pre_flat.3))
            .expect("feature map is standard layout");
        let (a1, fc1_cache) = self.fc1.forward(&flat);
        let (h1, m1) = act::relu(&a1);
        push_trace(trace, "rec.fc1", h1.shape());
        let (a2, fc2_cache) = self.fc2.forward(&h1);
        let (features, m2) = act::relu(&a2);
        push_trace(trace, "rec.fc2", features.shape());

        let (cls_in, drop_mask) = match rng.as_deref_mut() {
            Some(r) => {
                let (dropped, mask) = dropout(&features, DROPOUT_P, r);
                (dropped, Some(mask))
            }
            None => (features.clone(), None),
        };
        let (logits, cls_cache) = self.cls.forward(&cls_in);
        push_trace(trace, "rec.cls", logits.shape());

        let cache = RecCache {
            conv: conv_caches,
            cmask: cmasks,
            pre_flat,
            fc1: fc1_cache,
            m1,
            fc2: fc2_cache,
            m2,
            drop_mask,
            cls: cls_cache,
        };
        (RecOut { features, logits }, cache)
    }

    /// Backward from gradients on the logits and/or directly on the
    /// features (feature-space losses bypass dropout by construction).
    /// Returns the input-image gradient. With a frozen backbone, the first
    /// [`REC_BACKBONE_LAYERS`] convs still propagate but accumulate nothing.
    pub fn backward(
        &self,
        cache: &RecCache<F>,
        d_features: Option<&Array2<F>>,
        d_logits: Option<&Array2<F>>,
        mut grads: Option<&mut RecognizerGrads<F>>,
    ) -> Array4<F> {
        let batch = cache.m2.shape()[0];
        let mut dfeat = Array2::zeros((batch, self.feature_dim()));
        if let Some(dl) = d_logits {
            let d_cls_in = self
                .cls
                .backward(&cache.cls, dl, grads.as_deref_mut().map(|g| &mut g.cls));
            match &cache.drop_mask {
                Some(mask) => dfeat += &act::piecewise_backward(&d_cls_in, mask),
                None => dfeat += &d_cls_in,
            }
        }
        if let Some(df) = d_features {
            dfeat += df;
        }
        let da2 = act::piecewise_backward(&dfeat, &cache.m2);
        let dh1 = self
            .fc2
            .backward(&cache.fc2, &da2, grads.as_deref_mut().map(|g| &mut g.fc2));
        let da1 = act::piecewise_backward(&dh1, &cache.m1);
        let dflat = self
            .fc1
            .backward(&cache.fc1, &da1, grads.as_deref_mut().map(|g| &mut g.fc1));
        let mut dh = dflat
            .into_shape(cache.pre_flat)
            .expect("flat gradient is standard layout");
        for i in (0..self.convs.len()).rev() {
            let da = act::piecewise_backward(&dh, &cache.cmask[i]);
            let layer_grads = if self.backbone_frozen && i < REC_BACKBONE_LAYERS {
                None
            } else {
                grads.as_deref_mut().map(|g| &mut g.convs[i])
            };
            dh = self.convs[i].backward(&cache.conv[i], &da, layer_grads);
        }
        dh
    }

    pub fn zero_grads(&self) -> RecognizerGrads<F> {
        RecognizerGrads {
            convs: self.convs.iter().map(|c| c.zero_grads()).collect(),
            fc1: self.fc1.zero_grads(),
            fc2: self.fc2.zero_grads(),
            cls: self.cls.zero_grads(),
        }
    }

    pub fn plan(&self) -> Vec<LayerPlan> {
        let mut rows = Vec::new();
        let mut hw = self.image_size;
        for (i, conv) in self.convs.iter().enumerate() {
            hw = conv.out_hw(hw, hw).0;
            let w = conv.w.shape()[0];
            let backbone = if i < REC_BACKBONE_LAYERS {
                " backbone"
            } else {
                ""
            };
            rows.push(LayerPlan {
                name: format!("rec.conv{i}"),
                kind: format!("Conv({w},3,2) ReLU{backbone}"),
                out: vec![w, hw, hw],
                params: conv.param_count(),
            });
        }
        rows.push(LayerPlan {
            name: "rec.fc1".into(),
            kind: "FC(2048) ReLU".into(),
            out: vec![2048],
            params: self.fc1.param_count(),
        });
        rows.push(LayerPlan {
            name: "rec.fc2".into(),
            kind: "FC(512) ReLU Dropout(0.5) features".into(),
            out: vec![512],
            params: self.fc2.param_count(),
        });
        let k = self.cls.w.shape()[0];
        rows.push(LayerPlan {
            name: "rec.cls".into(),
            kind: format!("FC({k}) logits"),
            out: vec![k],
            params: self.cls.param_count(),
        });
        rows
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("rec.conv{i}.w"));
            names.push(format!("rec.conv{i}.b"));
        }
        for fc in ["fc1", "fc2", "cls"] {
            names.push(format!("rec.{fc}.w"));
            names.push(format!("rec.{fc}.b"));
        }
        names
    }

    pub fn params(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(c.w.as_slice().unwrap());
            out.push(c.b.as_slice().unwrap());
        }
        for fc in [&self.fc1, &self.fc2, &self.cls] {
            out.push(fc.w.as_slice().unwrap());
            out.push(fc.b.as_slice().unwrap());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(c.w.as_slice_mut().unwrap());
            out.push(c.b.as_slice_mut().unwrap());
        }
        for fc in [&mut self.fc1, &mut self.fc2, &mut self.cls] {
            let Linear { w, b } = fc;
            out.push(w.as_slice_mut().unwrap());
            out.push(b.as_slice_mut().unwrap());
        }
        out
    }

    /// Which parameter slots (in `params` order) the optimizer may update.
    pub fn trainable(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        for i in 0..self.convs.len() {
            let t = !(self.backbone_frozen && i < REC_BACKBONE_LAYERS);
            mask.push(t);
            mask.push(t);
        }
        mask.extend([true; 6]);
        mask
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|s| s.len()).sum()
    }
}

impl<F: Real> RecognizerGrads<F> {
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(c.dw.as_slice().unwrap());
            out.push(c.db.as_slice().unwrap());
        }
        for fc in [&self.fc1, &self.fc2, &self.cls] {
            out.push(fc.dw.as_slice().unwrap());
            out.push(fc.db.as_slice().unwrap());
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Identity embedder
// ---------------------------------------------------------------------------

/// Identity-feature extractor used by the identity-preservation loss. At
/// desk scale this is a small conv net pre-trained on subject classification
/// over the toy corpus, then frozen: gradients flow through it to its input,
/// but no optimizer ever updates it. The interface stands in for any
/// external pretrained face-recognition embedding at full scale.
pub struct IdentityEmbedder<F> {
    pub convs: Vec<Conv2d<F>>,
    pub fc: Linear<F>,
    image_size: usize,
}

pub struct IdentityEmbedderGrads<F> {
    convs: Vec<Conv2dGrads<F>>,
    fc: LinearGrads<F>,
}

pub struct EmbedCache<F> {
    conv: Vec<Conv2dCache<F>>,
    cmask: Vec<Array4<F>>,
    pre_flat: (usize, usize, usize, usize),
    fc: LinearCache<F>,
}

const EMBED_WIDTHS: [usize; 3] = [32, 64, 128];
const EMBED_DIM: usize = 64;

impl<F: Real> IdentityEmbedder<F> {
    pub fn new(image_size: usize, channels: usize) -> Self {
        let mut convs = Vec::new();
        let mut c_in = channels;
        let mut hw = image_size;
        for &w in &EMBED_WIDTHS {
            convs.push(Conv2d::new(c_in, w, 4, 2, 1));
            c_in = w;
            hw /= 2;
        }
        IdentityEmbedder {
            convs,
            fc: Linear::new(c_in * hw * hw, EMBED_DIM),
            image_size,
        }
    }

    pub fn init(&mut self, rng: &mut impl Rng) {
        for c in &mut self.convs {
            let fan_in = c.w.shape()[1] * c.kernel() * c.kernel();
            fill_normal(&mut c.w, he_std(fan_in), rng);
        }
        let std = he_std(self.fc.w.shape()[1]);
        fill_normal(&mut self.fc.w, std, rng);
    }

    pub fn embed_dim(&self) -> usize {
        EMBED_DIM
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array2<F>, EmbedCache<F>) {
        self.forward_inner(x, &mut None)
    }

    pub fn forward_traced(&self, x: &Array4<F>) -> (Array2<F>, EmbedCache<F>, ShapeTrace) {
        let mut trace = ShapeTrace::new();
        let (e, cache) = self.forward_inner(x, &mut Some(&mut trace));
        (e, cache, trace)
    }

    fn forward_inner(
        &self,
        x: &Array4<F>,
        trace: &mut Option<&mut ShapeTrace>,
    ) -> (Array2<F>, EmbedCache<F>) {
        assert_eq!(x.shape()[2], self.image_size, "input size mismatch");
        let mut conv_caches = Vec::new();
        let mut cmasks = Vec::new();
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let (a, cc) = conv.forward(&h);
            let (y, m) = act::relu(&a);
            push_trace(trace, &format!("fid.conv{i}"), y.shape());
            conv_caches.push(cc);
            cmasks.push(m);
            h = y;
        }
        let pre_flat = h.dim();
        let flat = h
            .into_shape((pre_flat.0, pre_flat.1 * pre_flat.2 * pre_flat.3))
            .expect("feature map is standard layout");
        let (e, fc_cache) = self.fc.forward(&flat);
        push_trace(trace, "fid.fc", e.shape());
        let cache = EmbedCache {
            conv: conv_caches,
            cmask: cmasks,
            pre_flat,
            fc: fc_cache,
        };
        (e, cache)
    }

    /// Input gradient of a loss on the embedding. `grads` is only used
    /// during pre-training; the trained embedder is frozen and callers pass
    /// `None`.
    pub fn backward(
        &self,
        cache: &EmbedCache<F>,
        d_emb: &Array2<F>,
        mut grads: Option<&mut IdentityEmbedderGrads<F>>,
    ) -> Array4<F> {
        let dflat = self
            .fc
            .backward(&cache.fc, d_emb, grads.as_deref_mut().map(|g| &mut g.fc));
        let mut dh = dflat
            .into_shape(cache.pre_flat)
            .expect("flat gradient is standard layout");
        for i in (0..self.convs.len()).rev() {
            let da = act::piecewise_backward(&dh, &cache.cmask[i]);
            dh = self.convs[i].backward(
                &cache.conv[i],
                &da,
                grads.as_deref_mut().map(|g| &mut g.convs[i]),
            );
        }
        dh
    }

    pub fn zero_grads(&self) -> IdentityEmbedderGrads<F> {
        IdentityEmbedderGrads {
            convs: self.convs.iter().map(|c| c.zero_grads()).collect(),
            fc: self.fc.zero_grads(),
        }
    }

    /// Pre-trains on subject classification with a throwaway linear head,
    /// then the caller treats the embedder as frozen. Returns the final
    /// batch's cross-entropy.
    pub fn pretrain(
        &mut self,
        images: &Array4<F>,
        subjects: &[usize],
        n_subjects: usize,
        iters: usize,
        batch: usize,
        lr: f64,
        rng: &mut impl Rng,
    ) -> f64 {
        assert_eq!(images.shape()[0], subjects.len());
        assert!(n_subjects >= 2, "need at least two subjects");
        let n = subjects.len();
        let mut head = Linear::<F>::new(EMBED_DIM, n_subjects);
        fill_normal(&mut head.w, he_std(EMBED_DIM), rng);

        let sizes: Vec<usize> = self
            .params()
            .iter()
            .map(|s| s.len())
            .chain([head.w.len(), head.b.len()])
            .collect();
        let mut opt = Adam::new(
            F::from_f64(lr),
            F::from_f64(0.9),
            F::from_f64(0.999),
            &sizes,
        );

        let mut last_loss = f64::NAN;
        for _ in 0..iters {
            let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
            let mut x = Array4::zeros((
                batch,
                images.shape()[1],
                images.shape()[2],
                images.shape()[3],
            ));
            for (row, &i) in idx.iter().enumerate() {
                x.index_axis_mut(Axis(0), row)
                    .assign(&images.index_axis(Axis(0), i));
            }

            let (emb, cache) = self.forward(&x);
            let (logits, head_cache) = head.forward(&emb);

            // Softmax cross-entropy over subjects, mean over the batch.
            let bf = F::from_f64(batch as f64);
            let mut dlogits = Array2::zeros(logits.raw_dim());
            let mut loss = 0.0;
            for bi in 0..batch {
                let row = logits.index_axis(Axis(0), bi);
                let max = row.iter().cloned().fold(F::from_f64(f64::MIN), F::max);
                let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
                let sum: F = exps.iter().fold(F::zero(), |a, &b| a + b);
                let target = subjects[idx[bi]];
                loss -= ((exps[target] / sum).to_f64()).ln();
                for j in 0..n_subjects {
                    let p = exps[j] / sum;
                    let y = if j == target { F::one() } else { F::zero() };
                    dlogits[[bi, j]] = (p - y) / bf;
                }
            }
            last_loss = loss / batch as f64;

            let mut grads = self.zero_grads();
            let mut head_grads = head.zero_grads();
            let demb = head.backward(&head_cache, &dlogits, Some(&mut head_grads));
            self.backward(&cache, &demb, Some(&mut grads));

            let grad_slices: Vec<&[F]> = grads
                .convs
                .iter()
                .flat_map(|c| [c.dw.as_slice().unwrap(), c.db.as_slice().unwrap()])
                .chain([grads.fc.dw.as_slice().unwrap(), grads.fc.db.as_slice().unwrap()])
                .chain([
                    head_grads.dw.as_slice().unwrap(),
                    head_grads.db.as_slice().unwrap(),
                ])
                .collect();
            let mut params: Vec<&mut [F]> = self.params_mut();
            let Linear { w, b } = &mut head;
            params.push(w.as_slice_mut().unwrap());
            params.push(b.as_slice_mut().unwrap());
            opt.step(&mut params, &grad_slices);
        }
        last_loss
    }

    pub fn plan(&self) -> Vec<LayerPlan> {
        let mut rows = Vec::new();
        let mut hw = self.image_size;
        for (i, conv) in self.convs.iter().enumerate() {
            hw = conv.out_hw(hw, hw).0;
            let w = conv.w.shape()[0];
            rows.push(LayerPlan {
                name: format!("fid.conv{i}"),
                kind: format!("Conv({w},4,2) ReLU"),
                out: vec![w, hw, hw],
                params: conv.param_count(),
            });
        }
        rows.push(LayerPlan {
            name: "fid.fc".into(),
            kind: format!("FC({EMBED_DIM}) identity features"),
            out: vec![EMBED_DIM],
            params: self.fc.param_count(),
        });
        rows
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("fid.conv{i}.w"));
            names.push(format!("fid.conv{i}.b"));
        }
        names.push("fid.fc.w".into());
        names.push("fid.fc.b".into());
        names
    }

    pub fn params(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(c.w.as_slice().unwrap());
            out.push(c.b.as_slice().unwrap());
        }
        out.push(self.fc.w.as_slice().unwrap());
        out.push(self.fc.b.as_slice().unwrap());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(c.w.as_slice_mut().unwrap());
            out.push(c.b.as_slice_mut().unwrap());
        }
        let Linear { w, b } = &mut self.fc;
        out.push(w.as_slice_mut().unwrap());
        out.push(b.as_slice_mut().unwrap());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|s| s.len()).sum()
    }
}

// ---------------------------------------------------------------------------
// The full set
// ---------------------------------------------------------------------------

/// All six parameterized components of one experiment.
pub struct Networks<F> {
    pub enc: Encoder<F>,
    pub dec: Decoder<F>,
    pub d_img: ImageDisc<F>,
    pub d_z: LatentDisc<F>,
    pub rec: Recognizer<F>,
    pub f_id: IdentityEmbedder<F>,
}

/// Builds and initializes every network from the experiment configuration.
/// Initialization consumes the generator in a fixed order (encoder, decoder,
/// image discriminator, latent discriminator, recognizer, embedder), so one
/// seed pins every weight.
pub fn build_networks<F: Real>(cfg: &ExperimentConfig, rng: &mut impl Rng) -> Networks<F> {
    let plan = width_plan(cfg.image_size);
    let mut enc = Encoder::new(cfg.image_size, cfg.channels, cfg.latent_dim);
    let mut dec = Decoder::new(cfg.image_size, cfg.channels, cfg.latent_dim, cfg.class_count);
    let mut d_img = ImageDisc::new(
        cfg.image_size,
        cfg.channels,
        cfg.class_count,
        &plan.trunk,
        plan.cls1,
    );
    let mut d_z = LatentDisc::new(cfg.latent_dim);
    let mut rec = Recognizer::new(cfg.image_size, cfg.channels, cfg.class_count);
    let mut f_id = IdentityEmbedder::new(cfg.image_size, cfg.channels);
    enc.init(rng);
    dec.init(rng);
    d_img.init(rng);
    d_z.init(rng);
    rec.init(rng);
    f_id.init(rng);
    Networks {
        enc,
        dec,
        d_img,
        d_z,
        rec,
        f_id,
    }
}

impl<F: Real> Networks<F> {
    /// Expected per-layer shape table for every network, in forward order.
    pub fn plan(&self, cfg: &ExperimentConfig) -> Vec<LayerPlan> {
        let mut rows = self.enc.plan(cfg.channels);
        rows.extend(self.dec.plan());
        rows.extend(self.d_img.plan(cfg.image_size));
        rows.extend(self.d_z.plan());
        rows.extend(self.rec.plan());
        rows.extend(self.f_id.plan());
        rows
    }

    /// Runs a traced forward through every network and checks each produced
    /// shape against the conv-arithmetic plan. Returns the printable table,
    /// or a description of the first mismatch.
    pub fn audit_shapes(&self, cfg: &ExperimentConfig) -> Result<String, String> {
        let b = 2;
        let s = cfg.image_size;
        let x = Array4::<F>::zeros((b, cfg.channels, s, s));
        let (z, _, enc_trace) = self.enc.forward_traced(&x);
        let u = Array2::<F>::zeros((b, cfg.class_count));
        let (img, _, dec_trace) = self.dec.forward_traced(&z, &u);
        assert_eq!(img.dim(), x.dim(), "decoder must invert the encoder shape");
        let (_, _, _, dimg_trace) = self.d_img.forward_traced(&x);
        let (_, _, _, dz_trace) = self.d_z.forward_traced(&z);
        let (_, _, rec_trace) = self.rec.forward_traced(&x);
        let (_, _, fid_trace) = self.f_id.forward_traced(&x);

        let mut traced = enc_trace;
        traced.extend(dec_trace);
        traced.extend(dimg_trace);
        traced.extend(dz_trace);
        traced.extend(rec_trace);
        traced.extend(fid_trace);

        let plan = self.plan(cfg);
        if plan.len() != traced.len() {
            return Err(format!(
                "planned {} layers but traced {}",
                plan.len(),
                traced.len()
            ));
        }
        let mut table = String::new();
        table.push_str(&format!(
            "{:<14} {:<34} {:<16} {:>10}\n",
            "layer", "kind", "output", "params"
        ));
        for (row, (tname, tshape)) in plan.iter().zip(&traced) {
            if &row.name != tname {
                return Err(format!("layer order mismatch: {} vs {tname}", row.name));
            }
            if &row.out != tshape {
                return Err(format!(
                    "{}: planned shape {:?} but forward produced {:?}",
                    row.name, row.out, tshape
                ));
            }
            let shape = tshape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            table.push_str(&format!(
                "{:<14} {:<34} {:<16} {:>10}\n",
                row.name, row.kind, shape, row.params
            ));
        }
        table.push_str(&format!(
            "totals: enc {} dec {} d_img {} d_z {} rec {} f_id {}\n",
            self.enc.param_count(),
            self.dec.param_count(),
            self.d_img.param_count(),
            self.d_z.param_count(),
            self.rec.param_count(),
            self.f_id.param_count(),
        ));
        Ok(table)
    }
}
