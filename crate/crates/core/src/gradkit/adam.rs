use serde::{Deserialize, Serialize};

use super::{GradError, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) weight decay; `0.0` disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates for every tensor of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| p.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One bias-corrected Adam update using the gradients held by `params`.
    /// Parameters without an accumulated gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), GradError> {
        if !(self.config.lr > 0.0) {
            return Err(GradError::Contract(format!("learning rate must be positive, got {}", self.config.lr)));
        }
        if params.len() != self.m.len() {
            return Err(GradError::Contract(format!(
                "optimizer tracks {} tensors, parameter set has {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, t) in params.tensors().iter().enumerate() {
            if t.len() != self.m[i].len() {
                return Err(GradError::Shape {
                    op: "adam_step",
                    detail: format!("tensor {i}: {} values, moments hold {}", t.len(), self.m[i].len()),
                });
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, tensor) in params.tensors_mut().iter_mut().enumerate() {
            if !tensor.requires_grad() {
                continue;
            }
            let grad = tensor.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = tensor.data_mut();
            if weight_decay != 0.0 {
                data.iter_mut().for_each(|w| *w -= lr * weight_decay * *w);
            }
            let Some(grad) = grad else { continue };
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut ParamSet) -> Result<(), GradError> {
    state.step(params)
}
