//! Plain SGD and bias-corrected Adam over the trainable tensors. The frozen
//! projection is not reachable from here.

use serde::{Deserialize, Serialize};

use super::{PolicyParams, Weights};
use crate::error::{Error, Result};

fn check_shapes(params: &PolicyParams, grads: &Weights) -> Result<()> {
    if !params.weights.same_shape(grads) {
        return Err(Error::Validation(
            "gradient tensors do not match parameter shapes".into(),
        ));
    }
    Ok(())
}

/// `theta <- theta - lr * g`.
pub fn sgd_step(params: &mut PolicyParams, grads: &Weights, lr: f64) -> Result<()> {
    check_shapes(params, grads)?;
    params.weights.axpy(-lr, grads);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Weights,
    pub v: Weights,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &PolicyParams) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &PolicyParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: params.weights.zeros_like(),
            v: params.weights.zeros_like(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

pub fn adam_step(
    state: &mut AdamState,
    params: &mut PolicyParams,
    grads: &Weights,
    lr: f64,
) -> Result<()> {
    check_shapes(params, grads)?;
    if !state.m.same_shape(grads) {
        return Err(Error::Validation("adam state does not match parameters".into()));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .weights
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + state.eps);
    }
    Ok(())
}
