//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use ndarray::{ArrayD, Zip};

use crate::model::Parameters;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(params: &Parameters, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Weight decay applies to matrices only, not to biases or
    /// layer-norm parameters.
    pub fn step(&mut self, params: &mut Parameters, grads: &Parameters, lr: f64) {
        self.t += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let g = grads.tensors();
        let (m, v) = (&mut self.m, &mut self.v);
        params.for_each_mut(|i, mut p| {
            let decay = if p.ndim() == 2 { wd } else { 0.0 };
            Zip::from(&mut p)
                .and(&g[i].1)
                .and(&mut m[i])
                .and(&mut v[i])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p -= lr * (update + decay * *p);
                });
        });
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to 0
/// at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, warmup_fraction: f64, total: usize) -> Self {
        let warmup = (warmup_fraction * total as f64).ceil() as usize;
        LinearSchedule {
            peak,
            warmup: warmup.min(total),
            total,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.peak * step as f64 / self.warmup as f64
        } else if self.total > self.warmup {
            let left = self.total.saturating_sub(step) as f64;
            self.peak * (left / (self.total - self.warmup) as f64).max(0.0)
        } else {
            self.peak
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    #[test]
    fn warmup_then_decay() {
        let s = LinearSchedule::new(1e-5, 0.1, 200);
        assert_eq!(s.warmup, 20);
        assert!(s.lr(0) < s.lr(20));
        assert_eq!(s.lr(20), 1e-5);
        assert!(s.lr(10) > s.lr(5));
        assert!(s.lr(100) < s.lr(20));
        assert_eq!(s.lr(200), 0.0);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let c = ModelConfig::tiny(8);
        let mut p = Parameters::init(&c, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let before = p.clone();
        let mut g = p.zeros_like();
        g.out_b.fill(3.0);
        let mut opt = AdamW::new(&p, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut p, &g, 0.01);
        // bias-corrected first step is lr * sign(g)
        for (a, b) in p.out_b.iter().zip(before.out_b.iter()) {
            assert!((b - a - 0.01).abs() < 1e-9);
        }
        assert_eq!(p.head_w, before.head_w);
    }
}
