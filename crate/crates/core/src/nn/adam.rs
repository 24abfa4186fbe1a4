use serde::{Deserialize, Serialize};

use super::{Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators, one pair per parameter in the order they are passed
/// to [`adam_step`].
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> impl Iterator<Item = (&Tensor, &Tensor)> {
        self.first.iter().zip(&self.second)
    }
}

/// One bias-corrected Adam update over `params` using their accumulated
/// gradients. The parameter list must keep the same order across calls.
pub fn adam_step(params: &mut [&mut Parameter], state: &mut OptimizerState) {
    if state.first.is_empty() {
        state.first = params.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
        state.second = state.first.clone();
    }
    assert_eq!(state.first.len(), params.len(), "parameter list changed between steps");
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        let grad = p.grad().data().to_vec();
        let value = p.value_mut().data_mut();
        for (((x, g), m), v) in value
            .iter_mut()
            .zip(&grad)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}
