//! AdamW with decoupled weight decay and a linear warmup / linear decay schedule.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.base_lr)));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    /// Learning rate for the update taken at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} is past the schedule end {}",
                self.total_steps
            )));
        }
        let warmup = self.warmup_steps();
        if step < warmup {
            return Ok(self.base_lr * step as f64 / warmup as f64);
        }
        let decay_len = self.total_steps - warmup;
        if decay_len == 0 {
            return Ok(self.base_lr);
        }
        Ok(self.base_lr * (self.total_steps - step) as f64 / decay_len as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("eps must be positive and weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the number of updates taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.values().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Applies one update with learning rate `lr`. Parameters are untouched
    /// if any gradient is non-finite or misshapen.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.first.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.names().iter().zip(params.values()).zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
            }
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *w -= lr * (update + weight_decay * *w);
            }
        }
        Ok(())
    }
}
