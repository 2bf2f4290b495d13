use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Adam hyperparameters. Defaults are standard small-transformer settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 3e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

/// Per-parameter-group Adam accumulators.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Tensor,
    v: Tensor,
    t: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamState { m: Tensor::zeros(rows, cols), v: Tensor::zeros(rows, cols), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update without weight decay.
///
/// A group whose gradient is identically zero is skipped outright: neither
/// the parameters nor the moment buffers nor the step counter move. Together
/// with the absence of weight decay this keeps unrouted experts bit-identical
/// across steps even when they carry nonzero historical moments.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(Error::Config(format!(
            "adam_step shape mismatch: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if grad.all_zero() {
        return Ok(());
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (i, p) in param.data_mut().iter_mut().enumerate() {
        let g = grad.data()[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}
