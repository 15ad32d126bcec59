//! AdamW with decoupled weight decay, a warmup-plus-cosine learning-rate
//! schedule and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::model::ModelParams;

use super::GradStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moment estimates, flattened in canonical tensor order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, num_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `params` in place:
    /// `θ ← θ − lr · (m̂ / (√v̂ + ε) + λ θ)`.
    pub fn update(&mut self, params: &mut ModelParams, grads: &GradStore, lr: f64) {
        let gs = grads.0.tensors();
        let pairs = params
            .tensors_mut()
            .into_iter()
            .zip(gs)
            .flat_map(|(t, g)| t.data.iter_mut().zip(g.data.iter().copied()));
        self.update_values(pairs, lr);
    }

    /// As [`AdamW::update`] for a flat parameter vector.
    pub fn update_slice(&mut self, theta: &mut [f64], grads: &[f64], lr: f64) {
        self.update_values(theta.iter_mut().zip(grads.iter().copied()), lr);
    }

    fn update_values<'a>(&mut self, pairs: impl Iterator<Item = (&'a mut f64, f64)>, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((theta, gi), (m, v)) in pairs.zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
            *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
            let step = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            *theta -= lr * (step + c.weight_decay * *theta);
        }
    }
}

/// Linear warmup over the first `warmup` fraction of steps, then cosine
/// decay from `base` to `min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base: f64, min: f64, warmup_frac: f64, total_steps: usize) -> Self {
        let warmup_steps = (warmup_frac * total_steps as f64).round() as usize;
        Self {
            base,
            min: min.min(base),
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate for 0-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min + 0.5 * (self.base - self.min) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_reaches_optimum() {
        // f(θ) = (θ − 3)², minimum at 3; no decay so the optimum is unbiased.
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, 1);
        let mut theta = [0.0];
        let sched = CosineSchedule::new(0.1, 1e-6, 0.05, 500);
        let mut reached = None;
        for k in 0..500 {
            let g = [2.0 * (theta[0] - 3.0)];
            opt.update_slice(&mut theta, &g, sched.lr(k));
            if reached.is_none() && (theta[0] - 3.0).abs() <= 1e-3 {
                reached = Some(k);
            }
        }
        assert!(reached.is_some(), "stalled at {}", theta[0]);
        assert!((theta[0] - 3.0).abs() <= 1e-3);
    }

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule::new(1e-3, 1e-6, 0.05, 200);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr(0) - 1e-4).abs() < 1e-18);
        assert!((s.lr(9) - 1e-3).abs() < 1e-18);
        assert!((s.lr(10) - 1e-3).abs() < 1e-15);
        assert!((s.lr(200) - 1e-6).abs() < 1e-15);
        for k in 10..199 {
            assert!(s.lr(k + 1) <= s.lr(k));
        }
    }
}
