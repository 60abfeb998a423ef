use crate::error::Result;
use crate::nn::Params;
use crate::tensor::Tensor;

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Params,
    pub v: Params,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        let zeros = |p: &Params| {
            let mut z = Params::new();
            for (k, v) in p.iter() {
                z.insert(k.clone(), Tensor::zeros(v.shape().to_vec()));
            }
            z
        };
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(params), v: zeros(params), t: 0 }
    }

    /// Applies one update with learning rate `lr`. Parameters missing from
    /// `grads` still advance their moments with a zero gradient.
    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = (lr / c1) as f32;
        let c2 = c2 as f32;
        let eps = self.eps as f32;
        for (name, p) in params.iter_mut() {
            let g = grads.get(name);
            let m = self.m.get_mut(name).expect("moment per parameter");
            let v = self.v.get_mut(name).expect("moment per parameter");
            for i in 0..p.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= step * mi / ((vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &Params) -> f64 {
    grads.iter().flat_map(|(_, g)| g.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Linear warm-up to `max_lr` over the first `pct_start` of training, then
/// linear decay towards zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
}

impl OneCycle {
    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total_steps.max(1) as f64;
        let warm = (self.pct_start * total).max(1.0);
        let s = step as f64;
        if s < warm {
            self.max_lr * (s + 1.0) / warm
        } else {
            self.max_lr * ((total - s) / (total - warm).max(1.0)).clamp(0.0, 1.0)
        }
    }
}
