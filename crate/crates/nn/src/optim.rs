//! Adam with an optional step-decay schedule.

use candle_core::{Result, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Multiply the rate by `decay_gamma` every `decay_every` steps (0 = never).
    pub decay_every: usize,
    pub decay_gamma: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, decay_every: 0, decay_gamma: 1.0 }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.decay_every == 0 {
            self.lr
        } else {
            self.lr * self.decay_gamma.powi((step / self.decay_every) as i32)
        }
    }
}

pub struct Adam {
    inner: AdamW,
    cfg: AdamConfig,
}

impl Adam {
    pub fn new(vars: Vec<Var>, cfg: AdamConfig) -> Result<Self> {
        let params = ParamsAdamW { lr: cfg.lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: 1e-8, weight_decay: 0.0 };
        Ok(Self { inner: AdamW::new(vars, params)?, cfg })
    }

    /// Backpropagates `loss` and applies one update at the scheduled rate.
    pub fn step(&mut self, loss: &Tensor, step: usize) -> Result<()> {
        self.inner.set_learning_rate(self.cfg.lr_at(step));
        self.inner.backward_step(loss)
    }

    pub fn learning_rate(&self) -> f64 {
        self.inner.learning_rate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_decay_schedule() {
        let c = AdamConfig { lr: 0.01, decay_every: 100, decay_gamma: 0.5, ..Default::default() };
        assert_eq!(c.lr_at(0), 0.01);
        assert_eq!(c.lr_at(99), 0.01);
        assert_eq!(c.lr_at(100), 0.005);
        assert_eq!(c.lr_at(250), 0.0025);
    }
}
