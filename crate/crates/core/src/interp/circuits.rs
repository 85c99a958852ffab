use serde::Serialize;

use crate::error::Result;
use crate::model::{HeadId, ModelParams};
use crate::numerics::{svd, Tensor};

/// QK and OV circuits of one head, in model and vocabulary space.
#[derive(Debug, Clone, PartialEq)]
pub struct CircuitMatrices {
    pub head: HeadId,
    /// `W_V·W_O`, `[d_model × d_model]`.
    pub ov_model: Tensor,
    /// `W_E·W_V·W_O·W_U`, `[d_vocab × d_vocab]`.
    pub ov_full: Tensor,
    /// `W_Q·W_Kᵀ`, `[d_model × d_model]`.
    pub qk_model: Tensor,
    /// `W_E·W_Q·W_Kᵀ·W_Eᵀ`, `[d_vocab × d_vocab]`.
    pub qk_full: Tensor,
}

pub fn circuits(params: &ModelParams, id: HeadId) -> Result<CircuitMatrices> {
    id.check(&params.config)?;
    let h = params.head(id);
    let ov_model = h.w_v.matmul(&h.w_o)?;
    let qk_model = h.w_q.matmul_nt(&h.w_k)?;
    let ov_full = params.w_e.matmul(&ov_model)?.matmul(&params.w_u)?;
    let qk_full = params.w_e.matmul(&qk_model)?.matmul_nt(&params.w_e)?;
    Ok(CircuitMatrices { head: id, ov_model, ov_full, qk_model, qk_full })
}

/// Head-summed `Σ_h W_V·W_O` of one layer.
pub fn layer_ov(params: &ModelParams, layer: usize) -> Result<Tensor> {
    let d = params.config.d_model;
    let mut acc = Tensor::zeros(&[d, d]);
    for h in 0..params.config.n_heads {
        acc.add_assign(&circuits(params, HeadId::new(layer, h))?.ov_model)?;
    }
    Ok(acc)
}

/// Spectral summary used to judge how low-rank a circuit is.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CircuitSummary {
    pub head: HeadId,
    pub circuit: &'static str,
    pub frobenius: f64,
    pub trace: f64,
    pub rank: usize,
    /// `(Σσ)² / Σσ²`: 1 for a rank-one matrix, `k` for `k` equal singular values.
    pub effective_rank: f64,
    pub top_singular_share: f64,
}

pub fn summarize(head: HeadId, circuit: &'static str, m: &Tensor) -> Result<CircuitSummary> {
    let s = svd(m)?;
    let sum: f64 = s.sigma.iter().sum();
    let sq: f64 = s.sigma.iter().map(|x| x * x).sum();
    let (effective_rank, top_singular_share) =
        if sq > 0.0 { (sum * sum / sq, s.sigma[0] * s.sigma[0] / sq) } else { (0.0, 0.0) };
    Ok(CircuitSummary {
        head,
        circuit,
        frobenius: m.frobenius_norm(),
        trace: m.trace(),
        rank: s.rank(),
        effective_rank,
        top_singular_share,
    })
}
