//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

/// SGD with heavy-ball momentum and coupled L2
/// weight decay: `v = mu * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n: usize, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.velocity.len());
        assert_eq!(grads.len(), self.velocity.len());
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= lr * *v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Half-cosine decay from `base` at progress 0 to 0 at progress 1.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut opt = Sgd::new(2, 0.0, 0.0);
        let mut p = vec![1.0, -2.0];
        opt.step(&mut p, &[0.5, -1.0], 0.1);
        assert_eq!(p, vec![0.95, -1.9]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = Sgd::new(1, 0.9, 0.0);
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0], 1.0);
        opt.step(&mut p, &[1.0], 1.0);
        assert!((p[0] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_has_lr_magnitude() {
        let mut opt = Adam::new(2);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[3.0, -0.01], 0.001);
        assert!((p[0] + 0.001).abs() < 1e-9);
        assert!((p[1] - 0.001).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut opt = Adam::new(1);
        let mut p = vec![5.0];
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.5)];
            opt.step(&mut p, &g, 0.05);
        }
        assert!((p[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
    }
}
