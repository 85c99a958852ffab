use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{layer_norm, run, ActivationCache, ModelParams};
use crate::numerics::{cosine, Tensor};
use crate::recurrence::RecurrenceSample;

/// Point in the residual stream that gets unembedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    /// The raw embedding `x·W_E + W_P`, before any layer.
    Embed,
    AfterLayer { layer: usize },
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Embed => write!(f, "embed"),
            Self::AfterLayer { layer } => write!(f, "after_L{layer}"),
        }
    }
}

fn stage_tensor(cache: &ActivationCache, stage: Stage) -> Result<&Tensor> {
    match stage {
        Stage::Embed => Ok(&cache.embed),
        Stage::AfterLayer { layer } => cache
            .layers
            .get(layer)
            .map(|l| &l.resid_post)
            .ok_or_else(|| Error::Argument(format!("layer {layer} out of range"))),
    }
}

/// `ln_final(resid)·W_U` for every flattened row of the cache at `stage`.
pub fn project_stage(params: &ModelParams, cache: &ActivationCache, stage: Stage) -> Result<Tensor> {
    let resid = stage_tensor(cache, stage)?;
    let (g, b) = (params.ln_final.w.data(), params.ln_final.b.data());
    let mut normed = Tensor::zeros(resid.shape());
    for i in 0..resid.rows() {
        normed.row_mut(i).copy_from_slice(&layer_norm(resid.row(i), g, b));
    }
    normed.matmul(&params.w_u)
}

/// Projection of one sample's residual stream after `after_layer`, `[n × d_vocab]`.
pub fn resid_projection(
    params: &ModelParams,
    cache: &ActivationCache,
    sample: usize,
    after_layer: usize,
) -> Result<Tensor> {
    if sample >= cache.batch {
        return Err(Error::Argument(format!("sample {sample} out of range")));
    }
    let n = cache.seq_len;
    Ok(project_stage(params, cache, Stage::AfterLayer { layer: after_layer })?.slice_rows(sample * n, (sample + 1) * n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageSimilarity {
    #[serde(flatten)]
    pub stage: Stage,
    pub mean_cosine: f64,
    pub mse: f64,
}

/// Agreement of each stage's projection with `targets` (`[b·n × d_vocab]`).
pub fn stage_similarities(
    params: &ModelParams,
    cache: &ActivationCache,
    targets: &Tensor,
) -> Result<Vec<StageSimilarity>> {
    let stages = std::iter::once(Stage::Embed)
        .chain((0..cache.layers.len()).map(|layer| Stage::AfterLayer { layer }));
    stages
        .map(|stage| {
            let p = project_stage(params, cache, stage)?;
            if p.shape() != targets.shape() {
                return Err(Error::Shape(format!("targets {:?} vs projection {:?}", targets.shape(), p.shape())));
            }
            let rows = p.rows() as f64;
            let mean_cosine = (0..p.rows()).map(|i| cosine(p.row(i), targets.row(i))).sum::<f64>() / rows;
            let mse = p.sub(targets)?.data().iter().map(|e| e * e).sum::<f64>() / p.len() as f64;
            Ok(StageSimilarity { stage, mean_cosine, mse })
        })
        .collect()
}

/// Per-position comparison of the `a_n → a_n + α·a_{n−1}` estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrudeRow {
    pub position: usize,
    pub cos_input: f64,
    pub cos_resid_l0: f64,
    pub cos_estimate: f64,
    pub mse_input: f64,
    pub mse_resid_l0: f64,
    pub mse_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrudeReport {
    pub alpha: f64,
    pub c: f64,
    /// `c + α`; positive whenever `c > −2` and `α > 2`.
    pub shift: f64,
    /// `max |(a_m + α·a_{m−1}) − ((c + α)·a_{m−1} + d)|`.
    pub estimate_identity_residual: f64,
    /// `max |a_{m+1} − (c²·a_{m−1} + (c + 1)·d)|`.
    pub truth_expansion_residual: f64,
    pub rows: Vec<CrudeRow>,
    /// Series for plotting, each `[n × D]`, indexed by position `m`:
    /// input `a_m`, layer-0 projection, estimate (row 0 repeats `a_0`), truth `a_{m+1}`.
    #[serde(skip)]
    pub series: [Tensor; 4],
}

pub const SERIES_NAMES: [&str; 4] = ["input", "resid_after_L0", "estimate", "truth"];

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn crude_estimate_report(params: &ModelParams, sample: &RecurrenceSample, alpha: f64) -> Result<CrudeReport> {
    if !alpha.is_finite() {
        return Err(Error::Argument("alpha must be finite".into()));
    }
    let cache = run(params, &sample.input_tensor(), None)?;
    let resid = if cache.layers.is_empty() {
        project_stage(params, &cache, Stage::Embed)?
    } else {
        project_stage(params, &cache, Stage::AfterLayer { layer: 0 })?
    };
    let input = sample.input_tensor();
    let truth = sample.target_tensor();
    let (n, dim) = (sample.len(), sample.dim());
    let c = sample.params.c;
    let d = &sample.params.d;

    let mut estimate = Tensor::zeros(&[n, dim]);
    estimate.row_mut(0).copy_from_slice(input.row(0));
    let (mut id_res, mut truth_res) = (0.0_f64, 0.0_f64);
    let mut rows = Vec::with_capacity(n.saturating_sub(1));
    for m in 1..n {
        let (cur, prev) = (input.row(m), input.row(m - 1));
        let est: Vec<f64> = cur.iter().zip(prev).map(|(a, p)| a + alpha * p).collect();
        for j in 0..dim {
            id_res = id_res.max((est[j] - ((c + alpha) * prev[j] + d[j])).abs());
            truth_res = truth_res.max((truth.get(m, j) - (c * c * prev[j] + (c + 1.0) * d[j])).abs());
        }
        let t = truth.row(m);
        rows.push(CrudeRow {
            position: m,
            cos_input: cosine(cur, t),
            cos_resid_l0: cosine(resid.row(m), t),
            cos_estimate: cosine(&est, t),
            mse_input: mse(cur, t),
            mse_resid_l0: mse(resid.row(m), t),
            mse_estimate: mse(&est, t),
        });
        estimate.row_mut(m).copy_from_slice(&est);
    }
    Ok(CrudeReport {
        alpha,
        c,
        shift: c + alpha,
        estimate_identity_residual: id_res,
        truth_expansion_residual: truth_res,
        rows,
        series: [input, resid, estimate, truth],
    })
}
