//! Optimizers and learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::params::{lit, ModelConfig, Params, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Cosine annealing from `base` to 0 over `total` steps after a linear warmup.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (PI * t).cos())
}

pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Params<T>,
    v: Params<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Params::zeros(cfg), v: Params::zeros(cfg), t: 0 }
    }

    pub fn step(&mut self, params: &mut Params<T>, grad: &Params<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (lit::<T>(self.beta1), lit::<T>(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = lit::<T>(lr * c2.sqrt() / c1);
        let eps = lit::<T>(self.eps * c2.sqrt());
        let (one, m, v) = (T::one(), self.m.tensors_mut(), self.v.tensors_mut());
        for (((p, g), m), v) in params.tensors_mut().into_iter().zip(grad.tensors()).zip(m).zip(v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                p[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

pub fn sgd_step<T: Scalar>(params: &mut Params<T>, grad: &Params<T>, lr: f64) {
    params.add_scaled(grad, lit(-lr));
}
