//! AdamW with decoupled weight decay.
//!
//! ```text
//! m ← β₁·m + (1 − β₁)·g
//! v ← β₂·v + (1 − β₂)·g²
//! θ ← θ − lr·( m̂ / (√v̂ + ε) + wd·θ )      m̂ = m/(1 − β₁ᵗ), v̂ = v/(1 − β₂ᵗ)
//! ```
//!
//! Decay is applied to weight matrices only; biases and layer-norm
//! parameters get `wd = 0`.

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamKind};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers, one pair per parameter tensor in visit order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub hyper: AdamWConfig,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, hyper: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> =
            params.to_tensor_list().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, t: 0, hyper }
    }
}

/// One AdamW update of a flat slice. `t` is the (already incremented) step count.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    wd: f64,
    hyper: AdamWConfig,
) {
    let AdamWConfig { beta1, beta2, eps } = hyper;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
    }
}

pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let grads = grads.to_tensor_list();
    if grads.len() != state.m.len() {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    state.t += 1;
    let t = state.t;
    let hyper = state.hyper;
    let mut idx = 0;
    let mut mismatch = None;
    params.visit_mut(&mut |name, kind, theta| {
        let i = idx;
        idx += 1;
        if theta.shape() != grads[i].shape() || theta.shape() != state.m[i].shape() {
            mismatch.get_or_insert_with(|| name.to_string());
            return;
        }
        let wd = if kind == ParamKind::Weight { weight_decay } else { 0.0 };
        adamw_update(
            theta.data_mut(),
            grads[i].data(),
            state.m[i].data_mut(),
            state.v[i].data_mut(),
            t,
            lr,
            wd,
            hyper,
        );
    });
    match mismatch {
        Some(name) => Err(Error::Shape(format!("gradient shape mismatch for {name}"))),
        None => Ok(()),
    }
}
