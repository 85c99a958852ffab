use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ActivationCache, HeadId, ModelParams};
use crate::numerics::{linear_fit, norm, LinearFit, Rng, Tensor};

use super::circuits::{circuits, layer_ov};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VectorKind {
    /// Post-`ln1` residual vectors from the cache.
    Residual,
    /// Isotropic random directions rescaled to the residual vectors' norms.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "scope", rename_all = "lowercase")]
pub enum OvScope {
    /// `Σ_h W_V·W_O` of the layer.
    Layer,
    Head { head: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearityReport {
    pub layer: usize,
    pub scope: OvScope,
    pub vector_kind: VectorKind,
    /// One fit over every `(x_d, (x·OV)_d)` pair.
    pub pooled: LinearFit,
    /// Fits of each vector's own `d_model` points, averaged.
    pub mean_vector_slope: f64,
    pub mean_vector_intercept: f64,
    pub mean_vector_r2: f64,
    pub min_vector_slope: f64,
    pub max_vector_slope: f64,
    pub vectors: usize,
    #[serde(skip)]
    pub per_vector: Vec<LinearFit>,
    #[serde(skip)]
    pub points: Vec<(f64, f64)>,
}

/// The vectors fed to the OV circuit: cached head inputs or norm-matched noise.
pub fn probe_vectors(
    cache: &ActivationCache,
    layer: usize,
    kind: VectorKind,
    rng: &mut Rng,
) -> Result<Tensor> {
    let lc = cache
        .layers
        .get(layer)
        .ok_or_else(|| Error::Argument(format!("layer {layer} out of range")))?;
    let x = lc.ln1.out.clone();
    if x.rows() == 0 {
        return Err(Error::Argument("empty activation cache".into()));
    }
    match kind {
        VectorKind::Residual => Ok(x),
        VectorKind::Random => {
            let mut out = Tensor::zeros(x.shape());
            for i in 0..x.rows() {
                let target = norm(x.row(i));
                let mut v: Vec<f64> = (0..x.cols()).map(|_| rng.normal()).collect();
                let len = norm(&v);
                v.iter_mut().for_each(|e| *e *= target / len);
                out.row_mut(i).copy_from_slice(&v);
            }
            Ok(out)
        }
    }
}

/// Fits `(x_d, (x·OV)_d)` for the given probe vectors.
pub fn fit_ov(ov: &Tensor, vectors: &Tensor) -> Result<(LinearFit, Vec<LinearFit>, Vec<(f64, f64)>)> {
    let y = vectors.matmul(ov)?;
    let mut points = Vec::with_capacity(vectors.len());
    let mut per_vector = Vec::with_capacity(vectors.rows());
    for i in 0..vectors.rows() {
        let pts: Vec<(f64, f64)> = vectors.row(i).iter().copied().zip(y.row(i).iter().copied()).collect();
        if let Ok(fit) = linear_fit(&pts) {
            per_vector.push(fit);
        }
        points.extend(pts);
    }
    Ok((linear_fit(&points)?, per_vector, points))
}

pub fn ov_linearity(
    params: &ModelParams,
    cache: &ActivationCache,
    layer: usize,
    scope: OvScope,
    kind: VectorKind,
    rng: &mut Rng,
) -> Result<LinearityReport> {
    let ov = match scope {
        OvScope::Layer => layer_ov(params, layer)?,
        OvScope::Head { head } => circuits(params, HeadId::new(layer, head))?.ov_model,
    };
    let vectors = probe_vectors(cache, layer, kind, rng)?;
    let (pooled, per_vector, points) = fit_ov(&ov, &vectors)?;
    let k = per_vector.len().max(1) as f64;
    let mean = |f: fn(&LinearFit) -> f64| per_vector.iter().map(f).sum::<f64>() / k;
    Ok(LinearityReport {
        layer,
        scope,
        vector_kind: kind,
        pooled,
        mean_vector_slope: mean(|f| f.slope),
        mean_vector_intercept: mean(|f| f.intercept),
        mean_vector_r2: mean(|f| f.r2),
        min_vector_slope: per_vector.iter().map(|f| f.slope).fold(f64::INFINITY, f64::min),
        max_vector_slope: per_vector.iter().map(|f| f.slope).fold(f64::NEG_INFINITY, f64::max),
        vectors: per_vector.len(),
        per_vector,
        points,
    })
}
