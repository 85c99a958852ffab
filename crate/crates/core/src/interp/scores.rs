use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{HeadId, ModelParams};
use crate::numerics::{eigenvalues, Tensor};

use super::circuits::circuits;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CircuitKind {
    /// `W_E·W_V·W_O·W_U`.
    OvFull,
    /// `W_V·W_O`.
    OvModel,
}

impl CircuitKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::OvFull => "ov_full",
            Self::OvModel => "ov_model",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigScore {
    pub head: HeadId,
    pub score: f64,
    pub circuit: CircuitKind,
}

/// `Σ λ / Σ |λ|`, real part; +1 for copying, −1 for negative copying.
pub fn eigenvalue_score(m: &Tensor) -> Result<f64> {
    let lambdas = eigenvalues(m)?;
    let total_modulus: f64 = lambdas.iter().map(|l| l.modulus()).sum();
    if total_modulus <= 1e-12 * m.frobenius_norm() || total_modulus == 0.0 {
        return Err(Error::UndefinedScore);
    }
    let sum: f64 = lambdas.iter().map(|l| l.re).sum();
    Ok((sum / total_modulus).clamp(-1.0, 1.0))
}

pub fn eig_scores_all(params: &ModelParams, kind: CircuitKind) -> Result<Vec<EigScore>> {
    HeadId::all(&params.config)
        .into_iter()
        .map(|head| {
            let c = circuits(params, head)?;
            let m = match kind {
                CircuitKind::OvFull => &c.ov_full,
                CircuitKind::OvModel => &c.ov_model,
            };
            Ok(EigScore { head, score: eigenvalue_score(m)?, circuit: kind })
        })
        .collect()
}
