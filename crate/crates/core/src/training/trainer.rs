use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{run, ModelConfig, ModelParams};
use crate::numerics::{mix_seed, Rng, Tensor};
use crate::recurrence::{
    generate_dataset, make_batch_with, RecurrenceSample, SequenceBatch, MAX_LEN, MIN_LEN,
};

use super::backward::loss_and_gradients;
use super::loss::masked_mse;
use super::optim::{adamw_step, AdamWConfig, OptimizerState};

/// Losses above this abort training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;
const EVAL_SALT: u64 = 0x5eed_e7a1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Evaluate every this many steps (and always after the last); 0 disables.
    pub eval_every: usize,
    pub eval_samples: usize,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn paper(seed: u64) -> Self {
        Self {
            steps: 100_000,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 0.01,
            min_len: MIN_LEN,
            max_len: MAX_LEN,
            seed,
            eval_every: 5_000,
            eval_samples: 1_000,
            model: ModelConfig::paper(),
        }
    }

    pub fn desk(seed: u64) -> Self {
        Self { steps: 20_000, eval_every: 1_000, model: ModelConfig::desk(), ..Self::paper(seed) }
    }

    pub fn tiny(seed: u64) -> Self {
        Self {
            steps: 200,
            eval_every: 50,
            eval_samples: 64,
            model: ModelConfig::tiny(),
            ..Self::paper(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(Error::Argument("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Argument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Argument(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.min_len < MIN_LEN || self.min_len > self.max_len || self.max_len > MAX_LEN {
            return Err(Error::Argument(format!(
                "need {MIN_LEN} <= min_len <= max_len <= {MAX_LEN}, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        if self.max_len > self.model.n_ctx {
            return Err(Error::ContextLength { len: self.max_len, n_ctx: self.model.n_ctx });
        }
        if self.eval_every > 0 && self.eval_samples == 0 {
            return Err(Error::Argument("eval_samples must be at least 1 when evaluating".into()));
        }
        Ok(())
    }

    /// Seed of the held-out evaluation set; independent of the training stream.
    pub fn eval_seed(&self) -> u64 {
        mix_seed(self.seed, EVAL_SALT)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub train_mse: f64,
    pub eval_mse: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn push(&mut self, row: TraceRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Argument(format!(
                    "trace steps must increase: {} after {}",
                    row.step, last.step
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn last_eval(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_mse)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "train_mse", "eval_mse"])?;
        for r in &self.rows {
            let eval = r.eval_mse.map(|e| e.to_string()).unwrap_or_default();
            w.write_record([r.step.to_string(), r.train_mse.to_string(), eval])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut trace = Self::default();
        let mut r = csv::Reader::from_path(path)?;
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| Error::Dataset(format!("bad number {s:?}: {e}")))
            };
            let step = field(0)
                .parse::<usize>()
                .map_err(|e| Error::Dataset(format!("bad step {:?}: {e}", field(0))))?;
            let eval = match field(2) {
                "" => None,
                s => Some(parse(s)?),
            };
            trace.push(TraceRow { step, train_mse: parse(field(1))?, eval_mse: eval })?;
        }
        Ok(trace)
    }
}

/// Owns everything that changes during training.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ModelParams,
    pub state: OptimizerState,
    pub trace: LossTrace,
    step: usize,
    batch_rng: Rng,
    eval_set: Vec<RecurrenceSample>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(config.model, &mut Rng::with_stream(config.seed, INIT_STREAM))?;
        let eval_set = if config.eval_every > 0 {
            eval_samples(&config, config.eval_samples)?
        } else {
            Vec::new()
        };
        Ok(Self {
            state: OptimizerState::new(&params, AdamWConfig::default()),
            params,
            trace: LossTrace::default(),
            step: 0,
            batch_rng: Rng::with_stream(config.seed, BATCH_STREAM),
            eval_set,
            config,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.steps
    }

    /// Draws a fresh batch, takes one optimizer step and records the trace row.
    pub fn step(&mut self) -> Result<TraceRow> {
        let cfg = self.config;
        let batch = make_batch_with(
            cfg.model.d_vocab,
            cfg.batch_size,
            cfg.min_len,
            cfg.max_len,
            &mut self.batch_rng,
        )?;
        let step = self.step + 1;
        let (loss, grads) = match loss_and_gradients(&self.params, &batch) {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if loss > DIVERGENCE_THRESHOLD {
            self.trace.push(TraceRow { step, train_mse: loss, eval_mse: None })?;
            return Err(Error::Divergence { step, loss });
        }
        adamw_step(&mut self.params, &grads, &mut self.state, cfg.lr, cfg.weight_decay)?;
        self.step = step;
        let eval_due =
            cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps);
        let eval_mse = if eval_due { Some(evaluate(&self.params, &self.eval_set)?) } else { None };
        let row = TraceRow { step, train_mse: loss, eval_mse };
        self.trace.push(row)?;
        Ok(row)
    }

    /// Runs to `config.steps`, calling `on_step` after each step.
    pub fn run(&mut self, mut on_step: impl FnMut(&TraceRow)) -> Result<()> {
        while !self.is_finished() {
            let row = self.step()?;
            on_step(&row);
        }
        Ok(())
    }
}

/// Full training run. On divergence the error carries the step; use
/// [`Trainer`] directly to keep the partial trace.
pub fn train(config: TrainConfig) -> Result<(ModelParams, LossTrace)> {
    let mut trainer = Trainer::new(config)?;
    trainer.run(|_| {})?;
    Ok((trainer.params, trainer.trace))
}

/// The held-out evaluation samples for a run.
pub fn eval_samples(config: &TrainConfig, count: usize) -> Result<Vec<RecurrenceSample>> {
    generate_dataset(config.model.d_vocab, count, config.min_len, config.max_len, config.eval_seed())?
        .iter()
        .map(|r| r.to_sample())
        .collect()
}

/// Groups sample indices by sequence length so each group runs as one batch.
pub fn length_groups(samples: &[RecurrenceSample]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.len()).or_default().push(i);
    }
    groups
}

/// Masked MSE of each sample of a batch given the flattened predictions.
pub fn per_sample_mse(pred: &Tensor, batch: &SequenceBatch) -> Result<Vec<f64>> {
    let (b, n) = (batch.batch_size(), batch.seq_len());
    let dim = batch.targets.shape()[2];
    let pred = pred.clone().reshape(&[b * n, dim])?;
    let target = batch.targets.clone().reshape(&[b * n, dim])?;
    (0..b)
        .map(|s| masked_mse(&pred.slice_rows(s * n, (s + 1) * n), &target.slice_rows(s * n, (s + 1) * n)))
        .collect()
}

/// Masked MSE of every sample, in input order.
pub fn sample_losses(params: &ModelParams, samples: &[RecurrenceSample]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; samples.len()];
    for idx in length_groups(samples).into_values() {
        let batch = SequenceBatch::from_samples(idx.iter().map(|&i| samples[i].clone()).collect())?;
        let cache = run(params, &batch.inputs, None)?;
        for (&i, loss) in idx.iter().zip(per_sample_mse(&cache.output, &batch)?) {
            out[i] = loss;
        }
    }
    Ok(out)
}

/// Mean per-sample masked MSE over a dataset.
pub fn evaluate(params: &ModelParams, samples: &[RecurrenceSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("cannot evaluate on an empty dataset".into()));
    }
    let losses = sample_losses(params, samples)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_recipe() {
        let p = TrainConfig::paper(0);
        assert_eq!((p.steps, p.batch_size, p.lr, p.weight_decay), (100_000, 16, 1e-4, 0.01));
        assert_eq!(p.model, ModelConfig::paper());
        let d = TrainConfig::desk(0);
        assert_eq!((d.steps, d.batch_size, d.lr, d.weight_decay), (20_000, 16, 1e-4, 0.01));
        assert_eq!(d.model, ModelConfig::desk());
        assert!(p.validate().is_ok() && d.validate().is_ok());
    }

    #[test]
    fn validation_rejects_bad_lengths() {
        let mut c = TrainConfig::tiny(0);
        c.min_len = 2;
        assert!(c.validate().is_err());
        c.min_len = 10;
        c.max_len = 5;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::tiny(0);
        c.steps = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn trace_steps_must_increase() {
        let mut t = LossTrace::default();
        t.push(TraceRow { step: 1, train_mse: 1.0, eval_mse: None }).unwrap();
        assert!(t.push(TraceRow { step: 1, train_mse: 1.0, eval_mse: None }).is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let mut t = LossTrace::default();
        t.push(TraceRow { step: 1, train_mse: 0.5, eval_mse: None }).unwrap();
        t.push(TraceRow { step: 2, train_mse: 0.25, eval_mse: Some(0.125) }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        t.save_csv(&path).unwrap();
        assert_eq!(LossTrace::read_csv(&path).unwrap(), t);
    }

    #[test]
    fn evaluate_rejects_empty() {
        let p = ModelParams::zeros(ModelConfig::tiny());
        assert!(evaluate(&p, &[]).is_err());
    }
}
