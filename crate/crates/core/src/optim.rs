//! Adam with a linear warmup-then-decay schedule and separate learning rates
//! for encoder and verbalizer parameters.

use crate::model::{Grads, Model};

/// Linear warmup to `base` over `warmup` steps, then linear decay to 0 at `total`.
pub fn linear_schedule(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    base * (total.saturating_sub(step)) as f64 / (total - warmup) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(model: &mut Model) -> Self {
        let shapes: Vec<usize> = model.params_mut().iter().map(|(_, p)| p.len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One bias-corrected update; verbalizer groups use `lr_verbalizer`.
    pub fn step(&mut self, model: &mut Model, grads: &Grads, lr_encoder: f64, lr_verbalizer: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let flat = Model::grads_flat(grads);
        for (k, ((group, params), g)) in model.params_mut().into_iter().zip(flat).enumerate() {
            let lr = if group.is_verbalizer() { lr_verbalizer } else { lr_encoder };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..params.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}
