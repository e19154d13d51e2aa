use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam hyper-parameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (first, second) = sizes
            .into_iter()
            .map(|n| (vec![0.0; n], vec![0.0; n]))
            .unzip();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over all parameters.
    pub fn step<'a>(
        &mut self,
        lr: f32,
        params: impl IntoIterator<Item = (&'a mut [f32], &'a [f32])>,
    ) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut count = 0;
        for (i, (value, grad)) in params.into_iter().enumerate() {
            let (Some(m), Some(v)) = (self.first.get_mut(i), self.second.get_mut(i)) else {
                return Err(Error::invalid(
                    "adam_step",
                    "more parameters than moment buffers",
                ));
            };
            if m.len() != value.len() || grad.len() != value.len() {
                return Err(Error::invalid(
                    "adam_step",
                    format!(
                        "parameter {i}: value {} / grad {} / moments {}",
                        value.len(),
                        grad.len(),
                        m.len()
                    ),
                ));
            }
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                value[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            count += 1;
        }
        if count != self.first.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("expected {} parameters, got {count}", self.first.len()),
            ));
        }
        Ok(())
    }
}
