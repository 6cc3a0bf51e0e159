use serde::{Deserialize, Serialize};

use super::{NeuralError, Param};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one fixed, ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Param]) -> Self {
        Self {
            config,
            step: 0,
            moments: params
                .iter()
                .map(|p| (vec![0.0; p.len()], vec![0.0; p.len()]))
                .collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the accumulated grads.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<(), NeuralError> {
        if params.len() != self.moments.len() || params.iter().zip(&self.moments).any(|(p, m)| p.len() != m.0.len()) {
            return Err(NeuralError::OptimizerMismatch);
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (p, (m, v)) in params.iter_mut().zip(&mut self.moments) {
            for ((x, g), (mi, vi)) in p
                .values
                .data
                .iter_mut()
                .zip(&p.grad.data)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
