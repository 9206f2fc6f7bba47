//! AdamW with decoupled weight decay.
//!
//! Per step `t` and parameter θ with gradient g:
//!
//! ```text
//! θ ← θ · (1 − lr·λ)
//! m ← β₁ m + (1 − β₁) g
//! v ← β₂ v + (1 − β₂) g²
//! θ ← θ − lr · (m / (1 − β₁ᵗ)) / (√(v / (1 − β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use super::grad::{Gradients, Trainable};
use super::model::TinyLM;
use super::tensor::Tensor;
use crate::error::{input, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    /// Zeroed accumulators shaped like `params`.
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn for_model(config: AdamWConfig, model: &TinyLM) -> Self {
        Self::new(config, &model.params())
    }
}

/// One AdamW update of `params` in place. Entries of `mask` that are `false`
/// leave the corresponding tensor (and its moments) untouched.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
    mask: Option<&[bool]>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return input(format!(
            "optimizer received {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return input(format!(
                "shape mismatch at parameter {i}: {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            ));
        }
        if mask.map_or(true, |m| m[i]) && !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - c.learning_rate * c.weight_decay;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if !mask.map_or(true, |m| m[i]) {
            continue;
        }
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (k, (theta, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *theta *= decay;
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            let m_hat = m[k] / bias1;
            let v_hat = v[k] / bias2;
            *theta -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Applies [`adamw_step`] to the trainable parameters of a model.
pub fn step_model(
    model: &mut TinyLM,
    grads: &Gradients,
    state: &mut OptimizerState,
    trainable: &Trainable,
) -> Result<()> {
    let num_layers = model.num_layers();
    let mask: Vec<bool> = (0..grads.tensors.len())
        .map(|i| trainable.contains_param(i, num_layers))
        .collect();
    let mut params = model.params_mut();
    adamw_step(&mut params, &grads.tensors, state, Some(&mask))
}
