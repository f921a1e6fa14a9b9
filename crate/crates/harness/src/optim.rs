//! AdamW with decoupled decay, global-norm clipping and poly decay.

use vpnext::ParamStore;
use vpnext_tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    settings: AdamWSettings,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(settings: AdamWSettings, params: &ParamStore<f32>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamW { settings, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update at learning rate `lr`. Decay is applied to matrices and
    /// kernels only and, like the adaptive step, is scaled by `lr`.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) {
        let AdamWSettings { beta1, beta2, eps, weight_decay } = self.settings;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let decay = if p.rank() >= 2 { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = *g as f64;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps) + decay * *w as f64;
                *w = (*w as f64 - lr * update) as f32;
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norms before and after.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> (f64, f64) {
    let before = global_norm(grads);
    if before > max_norm {
        let s = max_norm / before;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = (*x as f64 * s) as f32;
            }
        }
    }
    (before, global_norm(grads))
}

/// Polynomial decay from `base` to zero over `total` steps.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total as f64).max(0.0).powf(power)
}
