use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ActivationCache, ModelParams};
use crate::numerics::{dot, norm, svd, Tensor};

use super::circuits::layer_ov;

/// Orthonormal basis of the row space of `W_E` inside the model dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingSubspace {
    /// `[rank × d_model]`, rows orthonormal.
    pub basis: Tensor,
}

impl EmbeddingSubspace {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let s = svd(&params.w_e)?;
        let rank = s.rank();
        Ok(Self { basis: s.vt.slice_rows(0, rank) })
    }

    pub fn rank(&self) -> usize {
        self.basis.rows()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for k in 0..self.basis.rows() {
            let b = self.basis.row(k);
            let c = dot(v, b);
            for (o, bj) in out.iter_mut().zip(b) {
                *o += c * bj;
            }
        }
        out
    }

    /// `‖v − Π(v)‖ / ‖v‖`.
    pub fn orthogonal_fraction(&self, v: &[f64]) -> Result<f64> {
        let n = norm(v);
        if n == 0.0 {
            return Err(Error::Argument("orthogonal fraction of the zero vector".into()));
        }
        let p = self.project(v);
        let resid: Vec<f64> = v.iter().zip(&p).map(|(a, b)| a - b).collect();
        Ok((norm(&resid) / n).clamp(0.0, 1.0))
    }
}

pub fn orthogonal_fraction(params: &ModelParams, v: &[f64]) -> Result<f64> {
    if v.len() != params.config.d_model {
        return Err(Error::Shape(format!("vector of length {}, d_model is {}", v.len(), params.config.d_model)));
    }
    EmbeddingSubspace::new(params)?.orthogonal_fraction(v)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrthoFractionReport {
    pub layer: usize,
    pub embedding_rank: usize,
    pub vectors: usize,
    pub mean_fraction: f64,
    pub min_fraction: f64,
    pub max_fraction: f64,
    #[serde(skip)]
    pub fractions: Vec<f64>,
}

/// Orthogonal fraction of `x·OV_layer` for every cached head input `x`.
pub fn layer_orthogonal_fraction(
    params: &ModelParams,
    cache: &ActivationCache,
    layer: usize,
) -> Result<OrthoFractionReport> {
    let lc = cache
        .layers
        .get(layer)
        .ok_or_else(|| Error::Argument(format!("layer {layer} out of range")))?;
    let space = EmbeddingSubspace::new(params)?;
    let moved = lc.ln1.out.matmul(&layer_ov(params, layer)?)?;
    let fractions: Vec<f64> = (0..moved.rows())
        .filter(|&i| norm(moved.row(i)) > 0.0)
        .map(|i| space.orthogonal_fraction(moved.row(i)))
        .collect::<Result<_>>()?;
    if fractions.is_empty() {
        return Err(Error::Argument("OV circuit moves nothing on these inputs".into()));
    }
    Ok(OrthoFractionReport {
        layer,
        embedding_rank: space.rank(),
        vectors: fractions.len(),
        mean_fraction: fractions.iter().sum::<f64>() / fractions.len() as f64,
        min_fraction: fractions.iter().copied().fold(f64::INFINITY, f64::min),
        max_fraction: fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        fractions,
    })
}
