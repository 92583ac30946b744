use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn zeros(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self { v: m.clone(), m }
    }
}

/// Bias-corrected Adam update; `step` counts from 1.
pub fn adam_update(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &AdamConfig,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::InvalidParam("adam step counts from 1".into()));
    }
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape(
            format!("{} tensors", params.len()),
            format!("{} gradients / {} moments", grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() || p.len() != state.v[i].len() {
            return Err(Error::shape(format!("tensor {i} of size {}", p.len()), format!("size {}", g.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of tensor {i}")));
        }
    }
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
