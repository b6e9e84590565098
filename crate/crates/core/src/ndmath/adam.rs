use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, ParamBlock};
use super::tensor::Tensor;
use super::{NdError, Result};

/// Per-parameter Adam moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
}

impl AdamState {
    pub fn zeros(shape: &[usize]) -> Self {
        AdamState {
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            step_count: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyperParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyperParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyperParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn update_one(
    name: &str,
    value: &mut Tensor,
    state: &mut AdamState,
    grad: &Tensor,
    hp: &AdamHyperParams,
) -> Result<()> {
    if grad.shape() != value.shape() {
        return Err(NdError::ShapeMismatch(format!(
            "gradient shape {:?} does not match parameter {name} shape {:?}",
            grad.shape(),
            value.shape()
        )));
    }
    if !grad.all_finite() {
        return Err(NdError::NonFinite(format!("gradient for parameter {name}")));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    let p = value.data_mut();
    for ((pi, (mi, vi)), &gi) in p.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(grad.data()) {
        *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
        *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *pi -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Standard Adam update with bias correction, in place.
pub fn adam_step(params: &mut ParamBlock, grads: &Gradients, hp: &AdamHyperParams) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(NdError::ShapeMismatch(format!(
            "gradients have {} layers, params have {}",
            grads.layers.len(),
            params.layers.len()
        )));
    }
    for (i, (layer, (dw, db))) in params.layers.iter_mut().zip(&grads.layers).enumerate() {
        update_one(
            &format!("layer{i}.weight"),
            &mut layer.weight,
            &mut layer.weight_adam,
            dw,
            hp,
        )?;
        update_one(
            &format!("layer{i}.bias"),
            &mut layer.bias,
            &mut layer.bias_adam,
            db,
            hp,
        )?;
    }
    Ok(())
}
