use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{run, HeadId, ModelParams};
use crate::numerics::Tensor;
use crate::recurrence::{RecurrenceSample, SequenceBatch};
use crate::training::{evaluate, length_groups, per_sample_mse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    Mean,
    Zero,
}

impl AblationMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Zero => "zero",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub heads: Vec<HeadId>,
    pub mode: AblationMode,
    pub baseline_mse: f64,
    pub ablated_mse: f64,
    pub population_size: usize,
    pub eval_size: usize,
}

impl AblationReport {
    pub fn ratio(&self) -> f64 {
        self.ablated_mse / self.baseline_mse
    }
}

/// Running mean that reproduces a constant input bit for bit.
#[derive(Debug, Clone)]
struct Anchored {
    first: Option<Vec<f64>>,
    offset: Vec<f64>,
    count: usize,
}

impl Anchored {
    fn new(dim: usize) -> Self {
        Self { first: None, offset: vec![0.0; dim], count: 0 }
    }

    fn push(&mut self, x: &[f64]) {
        let first = self.first.get_or_insert_with(|| x.to_vec());
        for ((o, v), f) in self.offset.iter_mut().zip(x).zip(first.iter()) {
            *o += v - f;
        }
        self.count += 1;
    }

    fn mean(&self) -> Option<Vec<f64>> {
        let first = self.first.as_ref()?;
        let n = self.count as f64;
        Some(first.iter().zip(&self.offset).map(|(f, o)| f + o / n).collect())
    }
}

/// Per-position mean output `[n_ctx × d_model]` of each head over `population`.
///
/// Positions no population sample reaches take the mean over all positions.
pub fn head_means(
    params: &ModelParams,
    heads: &[HeadId],
    population: &[RecurrenceSample],
) -> Result<HashMap<HeadId, Tensor>> {
    if population.is_empty() {
        return Err(Error::Argument("mean ablation needs a non-empty population".into()));
    }
    let cfg = params.config;
    let mut per_pos: HashMap<HeadId, Vec<Anchored>> =
        heads.iter().map(|h| (*h, vec![Anchored::new(cfg.d_model); cfg.n_ctx])).collect();
    let mut overall: HashMap<HeadId, Anchored> =
        heads.iter().map(|h| (*h, Anchored::new(cfg.d_model))).collect();
    for idx in length_groups(population).into_values() {
        let batch = SequenceBatch::from_samples(idx.iter().map(|&i| population[i].clone()).collect())?;
        let n = batch.seq_len();
        let cache = run(params, &batch.inputs, None)?;
        for h in heads {
            let out = &cache.layers[h.layer].head_out[h.head];
            for r in 0..out.rows() {
                per_pos.get_mut(h).expect("head registered")[r % n].push(out.row(r));
                overall.get_mut(h).expect("head registered").push(out.row(r));
            }
        }
    }
    let mut means = HashMap::new();
    for h in heads {
        let fallback = overall[h].mean().expect("population is non-empty");
        let mut t = Tensor::zeros(&[cfg.n_ctx, cfg.d_model]);
        for (i, acc) in per_pos[h].iter().enumerate() {
            t.row_mut(i).copy_from_slice(&acc.mean().unwrap_or_else(|| fallback.clone()));
        }
        means.insert(*h, t);
    }
    Ok(means)
}

/// Mean masked MSE over `eval_set` with the listed heads' outputs replaced.
pub fn evaluate_ablated(
    params: &ModelParams,
    heads: &[HeadId],
    mode: AblationMode,
    population: &[RecurrenceSample],
    eval_set: &[RecurrenceSample],
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty dataset".into()));
    }
    for h in heads {
        h.check(&params.config)?;
    }
    let means = match mode {
        AblationMode::Mean => head_means(params, heads, population)?,
        AblationMode::Zero => HashMap::new(),
    };
    let mut losses = vec![0.0; eval_set.len()];
    for idx in length_groups(eval_set).into_values() {
        let batch = SequenceBatch::from_samples(idx.iter().map(|&i| eval_set[i].clone()).collect())?;
        let n = batch.seq_len();
        let mut hook = |id: HeadId, out: &mut Tensor| {
            if !heads.contains(&id) {
                return;
            }
            match mode {
                AblationMode::Zero => out.data_mut().fill(0.0),
                AblationMode::Mean => {
                    let m = &means[&id];
                    for r in 0..out.rows() {
                        out.row_mut(r).copy_from_slice(m.row(r % n));
                    }
                }
            }
        };
        let cache = run(params, &batch.inputs, Some(&mut hook))?;
        for (&i, loss) in idx.iter().zip(per_sample_mse(&cache.output, &batch)?) {
            losses[i] = loss;
        }
    }
    // Same summation order as `evaluate`, so a no-op ablation reproduces it exactly.
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

pub fn ablate(
    params: &ModelParams,
    heads: &[HeadId],
    mode: AblationMode,
    population: &[RecurrenceSample],
    eval_set: &[RecurrenceSample],
) -> Result<AblationReport> {
    let ablated_mse = evaluate_ablated(params, heads, mode, population, eval_set)?;
    Ok(AblationReport {
        heads: heads.to_vec(),
        mode,
        baseline_mse: evaluate(params, eval_set)?,
        ablated_mse,
        population_size: if mode == AblationMode::Mean { population.len() } else { 0 },
        eval_size: eval_set.len(),
    })
}
