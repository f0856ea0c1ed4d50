use serde::{Deserialize, Serialize};

use super::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// First and second moment buffers, one pair per parameter in set order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update using each parameter's accumulated
/// gradient. Parameters without a gradient are treated as having a zero one.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, cfg: &AdamConfig, lr: f64) {
    if state.m.len() != params.len() {
        *state = AdamState::new(params);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let zeros;
        let grad: &[f64] = match &p.grad {
            Some(g) => g.data(),
            None => {
                zeros = vec![0.0; p.value.numel()];
                &zeros
            }
        };
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}
