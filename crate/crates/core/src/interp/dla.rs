//! Direct logit attribution.
//!
//! Each unit's residual contribution is centered, divided by the final layer
//! norm's divisor *from the full forward pass*, scaled by `γ_final` and
//! unembedded. Freezing the divisor makes the map linear, so the unit
//! attributions plus the `β_final` term add up to the model's own output
//! dotted with the reference.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ActivationCache, HeadId, ModelParams};
use crate::numerics::{dot, Tensor};
use crate::recurrence::SequenceBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DlaVariant {
    /// Dot with `a_{m+1}`.
    Target,
    /// Dot with `a_{m+1} − a_m`.
    Delta,
}

impl DlaVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Target => "target",
            Self::Delta => "delta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DlaUnit {
    /// Token plus positional embedding.
    Embed,
    Head { layer: usize, head: usize },
    /// Attention output bias `b_O`.
    AttnBias { layer: usize },
    /// MLP output including `b_out`.
    Mlp { layer: usize },
    /// The `β` of the final layer norm.
    FinalBias,
}

impl DlaUnit {
    pub fn head(id: HeadId) -> Self {
        Self::Head { layer: id.layer, head: id.head }
    }

    pub fn is_head(&self) -> bool {
        matches!(self, Self::Head { .. })
    }

    pub fn is_mlp(&self) -> bool {
        matches!(self, Self::Mlp { .. })
    }
}

impl fmt::Display for DlaUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Embed => write!(f, "embed"),
            Self::Head { layer, head } => write!(f, "L{layer}H{head}"),
            Self::AttnBias { layer } => write!(f, "L{layer}.b_O"),
            Self::Mlp { layer } => write!(f, "L{layer}.mlp"),
            Self::FinalBias => write!(f, "ln_final.b"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DlaRow {
    pub unit: DlaUnit,
    /// Attribution per position, averaged over the samples of the cache.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DlaResult {
    pub variant: DlaVariant,
    pub seq_len: usize,
    pub samples: usize,
    pub rows: Vec<DlaRow>,
    /// Summed attribution of the units not listed in `rows`.
    pub rest: Vec<f64>,
    /// `⟨output_m, reference_m⟩`, averaged like `rows`.
    pub total: Vec<f64>,
    /// Largest per-sample, per-position gap between the unit sum and `total`.
    pub additivity_residual: f64,
}

impl DlaResult {
    /// Keeps the rows matching `keep`, folding the others into `rest`.
    pub fn select(mut self, keep: impl Fn(&DlaUnit) -> bool) -> Self {
        let (kept, dropped): (Vec<_>, Vec<_>) = self.rows.into_iter().partition(|r| keep(&r.unit));
        for row in dropped {
            for (r, v) in self.rest.iter_mut().zip(&row.values) {
                *r += v;
            }
        }
        self.rows = kept;
        self
    }

    pub fn row(&self, unit: DlaUnit) -> Option<&DlaRow> {
        self.rows.iter().find(|r| r.unit == unit)
    }
}

/// References for each flattened position, `[b·n × D]`.
pub fn references(batch: &SequenceBatch, variant: DlaVariant) -> Result<Tensor> {
    let (b, n) = (batch.batch_size(), batch.seq_len());
    let dim = batch.targets.shape()[2];
    let targets = batch.targets.clone().reshape(&[b * n, dim])?;
    match variant {
        DlaVariant::Target => Ok(targets),
        DlaVariant::Delta => targets.sub(&batch.inputs.clone().reshape(&[b * n, dim])?),
    }
}

/// Attribution of contribution `v` given the frozen divisor and `W_U·ref`.
fn attribute(v: &[f64], scale: f64, gamma: &[f64], w_ref: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().zip(gamma).zip(w_ref).map(|((x, g), w)| (x - mean) / scale * g * w).sum()
}

/// Attribution of every unit; `reference` is `[b·n × D]` (see [`references`]).
pub fn dla(
    params: &ModelParams,
    cache: &ActivationCache,
    reference: &Tensor,
    variant: DlaVariant,
) -> Result<DlaResult> {
    let (b, n) = (cache.batch, cache.seq_len);
    let cfg = params.config;
    if reference.shape() != [b * n, cfg.d_vocab] {
        return Err(Error::Shape(format!(
            "reference {:?} does not match cache [{} x {}]",
            reference.shape(),
            b * n,
            cfg.d_vocab
        )));
    }
    if cache.layers.len() != cfg.n_layers {
        return Err(Error::Shape("cache was produced by a different model".into()));
    }
    let gamma = params.ln_final.w.data();
    let scale = cache.ln_final_scale();

    let mut units: Vec<(DlaUnit, Box<dyn Fn(usize) -> Vec<f64> + '_>)> = Vec::new();
    units.push((DlaUnit::Embed, Box::new(|r| cache.embed.row(r).to_vec())));
    for (l, lc) in cache.layers.iter().enumerate() {
        for h in 0..cfg.n_heads {
            units.push((DlaUnit::Head { layer: l, head: h }, Box::new(move |r| lc.head_out[h].row(r).to_vec())));
        }
        let b_o = params.layers[l].b_o.data();
        units.push((DlaUnit::AttnBias { layer: l }, Box::new(move |_| b_o.to_vec())));
        units.push((DlaUnit::Mlp { layer: l }, Box::new(move |r| lc.mlp_out.row(r).to_vec())));
    }

    let mut rows: Vec<DlaRow> =
        units.iter().map(|(u, _)| DlaRow { unit: *u, values: vec![0.0; n] }).collect();
    rows.push(DlaRow { unit: DlaUnit::FinalBias, values: vec![0.0; n] });
    let mut total = vec![0.0; n];
    let mut residual: f64 = 0.0;
    let beta_logits = Tensor::from_parts(vec![1, cfg.d_model], params.ln_final.b.data().to_vec())
        .matmul(&params.w_u)?;

    for s in 0..b {
        for m in 0..n {
            let r = s * n + m;
            let reference_row = reference.row(r);
            // ⟨u·W_U, ref⟩ = ⟨u, W_U·ref⟩
            let w_ref: Vec<f64> = (0..cfg.d_model).map(|i| dot(params.w_u.row(i), reference_row)).collect();
            let mut sum = 0.0;
            for (k, (_, contribution)) in units.iter().enumerate() {
                let a = attribute(&contribution(r), scale[r], gamma, &w_ref);
                rows[k].values[m] += a;
                sum += a;
            }
            let beta = dot(beta_logits.row(0), reference_row);
            rows.last_mut().expect("final bias row").values[m] += beta;
            sum += beta;
            let t = dot(cache.output.row(r), reference_row);
            total[m] += t;
            residual = residual.max((sum - t).abs());
        }
    }
    let inv = 1.0 / b as f64;
    for row in &mut rows {
        row.values.iter_mut().for_each(|v| *v *= inv);
    }
    total.iter_mut().for_each(|v| *v *= inv);
    Ok(DlaResult {
        variant,
        seq_len: n,
        samples: b,
        rows,
        rest: vec![0.0; n],
        total,
        additivity_residual: residual,
    })
}

pub fn dla_heads(
    params: &ModelParams,
    cache: &ActivationCache,
    reference: &Tensor,
    variant: DlaVariant,
) -> Result<DlaResult> {
    Ok(dla(params, cache, reference, variant)?.select(DlaUnit::is_head))
}

pub fn dla_mlp(
    params: &ModelParams,
    cache: &ActivationCache,
    reference: &Tensor,
    variant: DlaVariant,
) -> Result<DlaResult> {
    Ok(dla(params, cache, reference, variant)?.select(DlaUnit::is_mlp))
}
