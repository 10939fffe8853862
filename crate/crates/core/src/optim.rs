//! Adam with bias-corrected moments and a warmup/linear-decay schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    /// Learning rate for 1-based step `t`: linear ramp to `peak` over the
    /// warmup, then linear decay reaching zero after `total_steps`.
    pub fn at(&self, t: usize) -> f64 {
        if self.warmup_steps > 0 && t <= self.warmup_steps {
            return self.peak * t as f64 / self.warmup_steps as f64;
        }
        let decay_len = self.total_steps.saturating_sub(self.warmup_steps);
        if decay_len == 0 {
            return self.peak;
        }
        let left = self.total_steps.saturating_sub(t) as f64 + 1.0;
        self.peak * (left / decay_len as f64).min(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    /// One update. When `active` is given, only those coordinates are read
    /// or written; every other parameter and its moment state is left as is.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, active: Option<&[usize]>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let len = params.len();
        let mut update = |j: usize| {
            let g = grad[j];
            self.m[j] = self.beta1 * self.m[j] + (1.0 - self.beta1) * g;
            self.v[j] = self.beta2 * self.v[j] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[j] / bc1;
            let v_hat = self.v[j] / bc2;
            params[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        };
        match active {
            Some(idx) => idx.iter().for_each(|&j| update(j)),
            None => (0..len).for_each(update),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule {
            peak: 1.0,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert!((s.at(5) - 0.5).abs() < 1e-12);
        assert!((s.at(10) - 1.0).abs() < 1e-12);
        assert!(s.at(60) < 1.0 && s.at(60) > s.at(100));
        assert!(s.at(110) > 0.0);
    }

    #[test]
    fn masked_step_leaves_frozen_state_alone() {
        let mut adam = Adam::new(3);
        let mut p = vec![1.0, 1.0, 1.0];
        adam.step(&mut p, &[1.0, 1.0, 1.0], 0.1, Some(&[1]));
        assert_eq!(p[0], 1.0);
        assert_eq!(p[2], 1.0);
        assert!(p[1] < 1.0);
        assert_eq!(adam.m[0], 0.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(2);
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            adam.step(&mut p, &g, 0.01, None);
        }
        assert!(p[0].abs() < 1e-2 && p[1].abs() < 1e-2);
    }
}
