use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::validation("total_steps", "must be > 0"));
    }
    if step > total {
        return Err(Error::Range {
            what: "schedule step",
            value: step.to_string(),
            range: format!("[0, {total}]"),
        });
    }
    if step == 0 {
        return Ok(lr_max);
    }
    if step == total {
        return Ok(lr_min);
    }
    let progress = step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::teacher()
    }
}

impl OptimizerConfig {
    /// Adam, 2e-4 annealed to 2e-6, batch 64, 20 epochs.
    pub fn teacher() -> Self {
        OptimizerConfig {
            lr_max: 2e-4,
            lr_min: 2e-6,
            batch_size: 64,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Same as [`teacher`](Self::teacher) with 40 epochs.
    pub fn student() -> Self {
        OptimizerConfig {
            epochs: 40,
            ..Self::teacher()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::validation("optimizer.lr", "need 0 <= lr_min <= lr_max"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("optimizer.epochs", "must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("optimizer.batch_size", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::validation("optimizer.beta", "betas in [0, 1), eps > 0"));
        }
        Ok(())
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: i32,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    pub fn new(n: usize, config: &OptimizerConfig) -> Self {
        Adam {
            beta1: config.beta1 as f32,
            beta2: config.beta2 as f32,
            eps: config.eps as f32,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = lr as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 2e-4, 2e-6).unwrap(), 2e-4);
        assert_eq!(cosine_lr(100, 100, 2e-4, 2e-6).unwrap(), 2e-6);
        let mid = cosine_lr(50, 100, 2e-4, 2e-6).unwrap();
        assert!((mid - 1.01e-4).abs() < 1e-15);
        assert!(cosine_lr(101, 100, 2e-4, 2e-6).is_err());
        assert!(cosine_lr(0, 0, 2e-4, 2e-6).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2, &OptimizerConfig::teacher());
        let mut p = [1.0f32, -1.0];
        adam.step(&mut p, &[0.5, -3.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }
}
