//! Instance normalization over spatial dimensions.

use ndarray::{Array1, Array2, Array4};

use crate::real::Real;

const EPS: f64 = 1e-5;

/// Per-sample, per-channel normalization with learnable scale and shift.
/// Statistics are computed over the spatial extent only, so each `[b, c]`
/// plane is standardized independently (biased variance).
pub struct InstanceNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

/// Gradient accumulators matching [`InstanceNorm`].
pub struct InstanceNormGrads<F> {
    pub dgamma: Array1<F>,
    pub dbeta: Array1<F>,
}

/// Values saved by the forward pass for reuse in backward.
pub struct InstanceNormCache<F> {
    xhat: Array4<F>,
    inv_std: Array2<F>,
}

impl<F: Real> InstanceNorm<F> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn zero_grads(&self) -> InstanceNormGrads<F> {
        InstanceNormGrads {
            dgamma: Array1::zeros(self.gamma.raw_dim()),
            dbeta: Array1::zeros(self.beta.raw_dim()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, InstanceNormCache<F>) {
        let (batch, channels, h, w) = x.dim();
        assert_eq!(channels, self.gamma.len(), "channel mismatch");
        let n = F::from_f64((h * w) as f64);
        let eps = F::from_f64(EPS);

        let mut xhat = Array4::zeros((batch, channels, h, w));
        let mut inv_std = Array2::zeros((batch, channels));
        for bi in 0..batch {
            for c in 0..channels {
                let plane = x.slice(ndarray::s![bi, c, .., ..]);
                let mut mean = F::zero();
                for &v in plane.iter() {
                    mean = mean + v;
                }
                mean = mean / n;
                let mut var = F::zero();
                for &v in plane.iter() {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var / n;
                let is = F::one() / (var + eps).sqrt();
                inv_std[[bi, c]] = is;
                let mut target = xhat.slice_mut(ndarray::s![bi, c, .., ..]);
                for (t, &v) in target.iter_mut().zip(plane.iter()) {
                    *t = (v - mean) * is;
                }
            }
        }
        let mut out = xhat.clone();
        for c in 0..channels {
            let (g, b) = (self.gamma[c], self.beta[c]);
            out.slice_mut(ndarray::s![.., c, .., ..])
                .mapv_inplace(|v| g * v + b);
        }
        (out, InstanceNormCache { xhat, inv_std })
    }

    /// Backward pass. Accumulates parameter gradients into `grads` when
    /// given and always returns the input gradient.
    pub fn backward(
        &self,
        cache: &InstanceNormCache<F>,
        dout: &Array4<F>,
        mut grads: Option<&mut InstanceNormGrads<F>>,
    ) -> Array4<F> {
        let (batch, channels, h, w) = cache.xhat.dim();
        assert_eq!(dout.dim(), (batch, channels, h, w));
        let n = F::from_f64((h * w) as f64);

        let mut dx = Array4::zeros((batch, channels, h, w));
        for bi in 0..batch {
            for c in 0..channels {
                let xhat = cache.xhat.slice(ndarray::s![bi, c, .., ..]);
                let dy = dout.slice(ndarray::s![bi, c, .., ..]);
                let mut sum_dy = F::zero();
                let mut sum_dy_xhat = F::zero();
                for (&d, &xh) in dy.iter().zip(xhat.iter()) {
                    sum_dy = sum_dy + d;
                    sum_dy_xhat = sum_dy_xhat + d * xh;
                }
                if let Some(g) = grads.as_deref_mut() {
                    g.dbeta[c] = g.dbeta[c] + sum_dy;
                    g.dgamma[c] = g.dgamma[c] + sum_dy_xhat;
                }
                let scale = self.gamma[c] * cache.inv_std[[bi, c]] / n;
                let mut target = dx.slice_mut(ndarray::s![bi, c, .., ..]);
                for ((t, &d), &xh) in target.iter_mut().zip(dy.iter()).zip(xhat.iter()) {
                    *t = scale * (n * d - sum_dy - xh * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

impl<F: Real> InstanceNormGrads<F> {
    pub fn scaled_add(&mut self, alpha: F, other: &InstanceNormGrads<F>) {
        self.dgamma.scaled_add(alpha, &other.dgamma);
        self.dbeta.scaled_add(alpha, &other.dbeta);
    }
}
