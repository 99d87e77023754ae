use serde::{Deserialize, Serialize};

use super::params::Params;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Moment buffers and step counter for Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &Params) -> Result<Self> {
        if !(config.lr >= 0.0) || !(config.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {config:?}")));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config(format!("Adam betas must lie in [0, 1): {config:?}")));
        }
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Ok(Self { config, first_moment: zeros.clone(), second_moment: zeros, step_count: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// Applies one update from the gradients stored on `params`.
    ///
    /// A missing gradient counts as zero. Any non-finite gradient rejects the
    /// whole update and leaves both the parameters and this state untouched.
    pub fn step(&mut self, params: &mut Params) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, store has {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for ((name, t), m) in params.iter().zip(&self.first_moment) {
            if t.numel() != m.len() {
                return Err(Error::shape(format!("parameter {name} changed shape to {:?}", t.shape())));
            }
            if let Some(g) = t.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {name}[{i}] is {}", g[i])));
                }
            }
        }

        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step_count += 1;
        let bc1 = 1.0 - beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - beta2.powi(self.step_count as i32);
        for ((t, m), v) in params.tensors_mut().iter_mut().zip(&mut self.first_moment).zip(&mut self.second_moment) {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
