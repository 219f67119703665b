//! Adam optimizer over flat parameter slices.

use crate::real::Real;

/// Adam with bias correction. One instance per network; `step` counts are
/// tracked here so a restored run continues with the same effective rates.
///
/// Parameters are addressed positionally: the slices passed to [`Adam::step`]
/// must always arrive in the same order with the same lengths as the sizes
/// given to [`Adam::new`].
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
    pub t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: F, beta1: F, beta2: F, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: F::from_f64(1e-8),
            m: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            t: 0,
        }
    }

    /// One update. `params[i]` and `grads[i]` must match the `i`-th size
    /// given at construction.
    pub fn step(&mut self, params: &mut [&mut [F]], grads: &[&[F]]) {
        assert_eq!(params.len(), self.m.len(), "parameter group count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient group count changed");
        self.t += 1;
        let t = self.t as i32;
        let c1 = F::one() - self.beta1.powi(t);
        let c2 = F::one() - self.beta2.powi(t);
        for i in 0..params.len() {
            let p = &mut *params[i];
            let g = grads[i];
            assert_eq!(p.len(), self.m[i].len(), "parameter group {i} resized");
            assert_eq!(g.len(), self.m[i].len(), "gradient group {i} resized");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (F::one() - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (F::one() - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] = p[j] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Euclidean norm across a set of gradient slices, for diagnostics.
pub fn global_norm<F: Real>(slices: &[&[F]]) -> f64 {
    slices
        .iter()
        .flat_map(|s| s.iter())
        .map(|&g| {
            let v = g.to_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}
