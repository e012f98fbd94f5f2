//! Adam with decoupled weight decay, cosine schedule with linear warmup, and
//! global-norm clipping.

use crate::autograd::Gradients;
use crate::model::{ParamId, Parameters};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f32) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: vec![None; n_params],
        }
    }

    /// Update every parameter in `ids` that has a gradient.
    pub fn step(&mut self, params: &mut Parameters, grads: &Gradients, ids: &[ParamId], lr: f32) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for &id in ids {
            let Some(g) = grads.get(id) else { continue };
            let w = params.get_mut(id);
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w.data[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w.data[i]);
            }
        }
    }
}

/// Learning rate at `step` (0-based) of `total`: linear warmup over the first
/// `warmup_ratio · total` steps, then cosine decay to zero.
pub fn cosine_lr(peak: f32, step: usize, total: usize, warmup_ratio: f32) -> f32 {
    let warmup = (warmup_ratio * total as f32).ceil() as usize;
    if step < warmup {
        return peak * (step + 1) as f32 / warmup as f32;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f32 / span as f32).min(1.0);
    peak * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
}

/// Scale `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f32) -> f32 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let total = 100;
        assert!((cosine_lr(1.0, 0, total, 0.05) - 0.2).abs() < 1e-6);
        assert!((cosine_lr(1.0, 4, total, 0.05) - 1.0).abs() < 1e-6);
        assert!(cosine_lr(1.0, 50, total, 0.05) < 1.0);
        assert!(cosine_lr(1.0, 99, total, 0.05) < 0.01);
        assert!((cosine_lr(2.0, 0, total, 0.0) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = Gradients {
            grads: vec![Some(vec![3.0, 4.0]), None],
        };
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 5.0).abs() < 1e-6);
        assert!((g.global_norm() - 1.0).abs() < 1e-6);
    }
}
