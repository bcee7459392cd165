use serde::{Deserialize, Serialize};

use crate::error::{GradError, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the joint gradient to at most this L2 norm before the update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Moment buffers, one per parameter in store order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::default(),
        }
    }

    fn ensure_buffers(&mut self, params: &ParamStore) -> Result<()> {
        if self.state.first_moment.is_empty() {
            for (_, p) in params.iter() {
                self.state.first_moment.push(vec![0.0; p.tensor.numel()]);
                self.state.second_moment.push(vec![0.0; p.tensor.numel()]);
            }
            return Ok(());
        }
        if self.state.first_moment.len() != params.len() {
            return Err(GradError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.state.first_moment.len()],
                rhs: vec![params.len()],
            });
        }
        for ((_, p), m) in params.iter().zip(&self.state.first_moment) {
            if m.len() != p.tensor.numel() {
                return Err(GradError::ShapeMismatch {
                    op: "adam_step",
                    lhs: vec![m.len()],
                    rhs: p.tensor.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update of every grad-enabled parameter.
    /// Gradients are cleared afterwards.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let missing: Vec<String> = params
            .iter()
            .filter(|(_, p)| p.tensor.grad_enabled() && p.tensor.grad().is_none())
            .map(|(_, p)| p.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(GradError::MissingGrad(missing));
        }
        self.ensure_buffers(params)?;

        let mut clip = 1.0;
        if let Some(max_norm) = self.config.clip_norm {
            let sq: f64 = params
                .iter()
                .filter_map(|(_, p)| p.tensor.grad())
                .flat_map(|g| g.iter())
                .map(|g| g * g)
                .sum();
            let norm = sq.sqrt();
            if norm > max_norm {
                clip = max_norm / norm;
            }
        }

        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (i, p) in params.iter_mut().enumerate() {
            if !p.tensor.grad_enabled() {
                continue;
            }
            let grad = p.tensor.take_grad().expect("checked above");
            let lr = learning_rate * p.lr_scale;
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[k] * clip;
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
