//! Adam with decoupled weight decay, driven by a one-cycle schedule.

use crate::tensor::Tensor;
use std::f64::consts::PI;

/// Fraction of steps spent warming up.
pub const WARMUP_FRACTION: f64 = 0.3;
/// Final learning rate as a fraction of the peak.
pub const FINAL_LR_FRACTION: f64 = 1e-3;

/// Learning rate and first-moment coefficient for each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub total_steps: usize,
    pub lr_max: f64,
    pub momentum_lo: f64,
    pub momentum_hi: f64,
}

impl OneCycle {
    fn warmup(&self) -> f64 {
        WARMUP_FRACTION * self.total_steps as f64
    }

    /// Position within the decay phase, in [0, 1]; `None` during warmup.
    fn decay_progress(&self, step: usize) -> Option<f64> {
        let w = self.warmup();
        let t = step as f64;
        if t < w {
            return None;
        }
        let span = self.total_steps as f64 - w;
        Some(if span > 0.0 { ((t - w) / span).min(1.0) } else { 1.0 })
    }

    /// Linear 0 → lr_max over the warmup, then cosine down to lr_max/1000.
    pub fn lr(&self, step: usize) -> f64 {
        match self.decay_progress(step) {
            None => self.lr_max * step as f64 / self.warmup(),
            Some(p) => {
                let floor = self.lr_max * FINAL_LR_FRACTION;
                floor + (self.lr_max - floor) * 0.5 * (1.0 + (PI * p).cos())
            }
        }
    }

    /// β₁ mirrors the learning rate: high → low over the warmup, back to high.
    pub fn beta1(&self, step: usize) -> f64 {
        let (lo, hi) = (self.momentum_lo, self.momentum_hi);
        match self.decay_progress(step) {
            None => hi - (hi - lo) * step as f64 / self.warmup(),
            Some(p) => lo + (hi - lo) * 0.5 * (1.0 - (PI * p).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    beta1_product: f64,
    beta2_product: f64,
    steps: usize,
}

impl Adam {
    pub fn new(params: &[Tensor], beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta2,
            eps,
            weight_decay,
            m: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.numel()]).collect(),
            beta1_product: 1.0,
            beta2_product: 1.0,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One update. With a varying β₁ the first-moment bias correction uses
    /// the product of the β₁ values seen so far.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, beta1: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.steps += 1;
        self.beta1_product *= beta1;
        self.beta2_product *= self.beta2;
        let c1 = 1.0 - self.beta1_product;
        let c2 = 1.0 - self.beta2_product;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(total: usize) -> OneCycle {
        OneCycle {
            total_steps: total,
            lr_max: 4e-4,
            momentum_lo: 0.85,
            momentum_hi: 0.95,
        }
    }

    #[test]
    fn one_cycle_landmarks() {
        let s = schedule(100);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(30) - 4e-4).abs() < 1e-18);
        assert!((s.lr(15) - 2e-4).abs() < 1e-18);
        assert!((s.lr(100) - 4e-7).abs() < 1e-18);
        assert!(s.lr(99) > s.lr(100));
        assert_eq!(s.beta1(0), 0.95);
        assert!((s.beta1(30) - 0.85).abs() < 1e-15);
        assert!((s.beta1(100) - 0.95).abs() < 1e-15);
        for t in 0..100 {
            assert!(s.lr(t) <= 4e-4 + 1e-18);
            assert!((0.85 - 1e-15..=0.95 + 1e-15).contains(&s.beta1(t)));
        }
        let single = schedule(1);
        assert_eq!(single.lr(0), 0.0);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0])];
        let zero = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut adam = Adam::new(&params, 0.999, 1e-8, 0.0);
        adam.step(&mut params, &zero, 0.1, 0.9);
        assert_eq!(params[0].data(), &[1.0, -2.0]);
        let mut adam = Adam::new(&params, 0.999, 1e-8, 0.01);
        adam.step(&mut params, &zero, 0.1, 0.9);
        assert_eq!(params[0].data(), &[1.0 - 0.1 * 0.01, -2.0 + 0.1 * 0.02]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected first step is lr·sign(g) up to eps.
        let mut params = vec![Tensor::vector(vec![0.0, 0.0])];
        let grads = vec![Tensor::vector(vec![3.0, -0.5])];
        let mut adam = Adam::new(&params, 0.999, 1e-12, 0.0);
        adam.step(&mut params, &grads, 0.01, 0.9);
        assert!((params[0].data()[0] + 0.01).abs() < 1e-10);
        assert!((params[0].data()[1] - 0.01).abs() < 1e-10);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = vec![Tensor::vector(vec![5.0])];
        let mut adam = Adam::new(&params, 0.999, 1e-8, 0.0);
        for _ in 0..2000 {
            let x = params[0].data()[0];
            adam.step(&mut params, &[Tensor::vector(vec![2.0 * (x - 1.0)])], 0.01, 0.9);
        }
        assert!((params[0].data()[0] - 1.0).abs() < 1e-2);
    }
}
