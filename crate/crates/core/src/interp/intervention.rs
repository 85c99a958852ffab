use serde::Serialize;

use crate::error::Result;
use crate::model::{HeadId, ModelParams};
use crate::numerics::{pseudoinverse, sample_normal, svd, Rng, Tensor};
use crate::recurrence::RecurrenceSample;
use crate::training::evaluate;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectorCheck {
    pub head: HeadId,
    /// `max |P² − P|` for `P = W_Q·W_Kᵀ`.
    pub idempotence: f64,
    /// `max |P − Pᵀ|`.
    pub symmetry: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QkPinvReport {
    pub heads: Vec<HeadId>,
    pub baseline_mse: f64,
    pub new_mse: f64,
    pub checks: Vec<ProjectorCheck>,
}

/// Replaces each head's `W_Q` with Gaussian noise of std `1/√d_model` and sets
/// `W_Kᵀ = W_Q⁺`, so `W_Q·W_Kᵀ` becomes an orthogonal projector. Biases stay.
pub fn apply_qk_pinv(
    params: &ModelParams,
    heads: &[HeadId],
    rng: &mut Rng,
) -> Result<(ModelParams, Vec<ProjectorCheck>)> {
    let cfg = params.config;
    let mut out = params.clone();
    let mut checks = Vec::with_capacity(heads.len());
    for &id in heads {
        id.check(&cfg)?;
        let w_q = sample_normal(rng, &[cfg.d_model, cfg.d_head]).scale(1.0 / (cfg.d_model as f64).sqrt());
        let w_k = pseudoinverse(&w_q)?.transpose();
        let p = w_q.matmul_nt(&w_k)?;
        checks.push(ProjectorCheck {
            head: id,
            idempotence: p.matmul(&p)?.max_abs_diff(&p),
            symmetry: p.max_abs_diff(&p.transpose()),
            rank: svd(&p)?.rank(),
        });
        let head = out.head_mut(id);
        head.w_q = w_q;
        head.w_k = w_k;
    }
    Ok((out, checks))
}

pub fn qk_pinv_intervention(
    params: &ModelParams,
    heads: &[HeadId],
    rng: &mut Rng,
    eval_set: &[RecurrenceSample],
) -> Result<QkPinvReport> {
    let (patched, checks) = apply_qk_pinv(params, heads, rng)?;
    Ok(QkPinvReport {
        heads: heads.to_vec(),
        baseline_mse: evaluate(params, eval_set)?,
        new_mse: evaluate(&patched, eval_set)?,
        checks,
    })
}

/// `W_Q·W_Kᵀ` of a head, for inspecting the result of the intervention.
pub fn qk_product(params: &ModelParams, id: HeadId) -> Result<Tensor> {
    let h = params.head(id);
    h.w_q.matmul_nt(&h.w_k)
}
