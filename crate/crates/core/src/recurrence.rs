//! Affine recurrence sampling, normalization and classification.
//!
//! A sample draws `c`, `d` and `a_0` uniformly from `[-2, 2]`, rolls the
//! recurrence forward, then divides everything (including `d`) by
//! `m / r`, where `m` is the largest vector norm among the inputs and
//! `r ~ U[1, 2)`. The scaled sequence obeys the same recurrence with the
//! same `c` and the scaled offset.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mix_seed, norm, Rng, Tensor};

pub const MIN_LEN: usize = 3;
pub const MAX_LEN: usize = 14;
pub const PARAM_RANGE: (f64, f64) = (-2.0, 2.0);

/// Generative parameters of `a_n = c·a_{n-1} + d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub c: f64,
    pub d: Vec<f64>,
    pub a0: Vec<f64>,
}

/// `c·prev + d`.
pub fn step(params: &AffineParams, prev: &[f64]) -> Result<Vec<f64>> {
    if prev.len() != params.d.len() {
        return Err(Error::Argument(format!(
            "vector has dimension {}, offset has {}",
            prev.len(),
            params.d.len()
        )));
    }
    Ok(prev.iter().zip(&params.d).map(|(p, d)| params.c * p + d).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SequenceClass {
    Alternating,
    Decay,
    Growth,
    Constant,
}

impl SequenceClass {
    pub const ALL: [SequenceClass; 4] =
        [Self::Alternating, Self::Decay, Self::Growth, Self::Constant];

    pub fn name(self) -> &'static str {
        match self {
            Self::Alternating => "alternating",
            Self::Decay => "decay",
            Self::Growth => "growth",
            Self::Constant => "constant",
        }
    }
}

/// `c < 0` alternates, `0 ≤ c < 1` decays, `c = 1` is constant, `c > 1` grows.
pub fn classify(c: f64) -> SequenceClass {
    if c < 0.0 {
        SequenceClass::Alternating
    } else if c < 1.0 {
        SequenceClass::Decay
    } else if c == 1.0 {
        SequenceClass::Constant
    } else {
        SequenceClass::Growth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vectors: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    pub scale: f64,
}

/// Divides `vectors` and `d` by `m / r` so the largest norm becomes `r`.
pub fn normalize(vectors: &[Vec<f64>], d: &[f64], r: f64) -> Result<Normalized> {
    if !(1.0..=2.0).contains(&r) {
        return Err(Error::Argument(format!("normalization target {r} outside [1, 2]")));
    }
    let m = vectors.iter().map(|v| norm(v)).fold(0.0, f64::max);
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::DegenerateSample);
    }
    let scale = m / r;
    let div = |v: &[f64]| v.iter().map(|x| x / scale).collect::<Vec<_>>();
    Ok(Normalized { vectors: vectors.iter().map(|v| div(v)).collect(), d: div(d), scale })
}

/// One normalized sequence `a_0 … a_{n-1}` plus the next term `a_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrenceSample {
    pub vectors: Vec<Vec<f64>>,
    pub target_next: Vec<f64>,
    /// Normalized `d` and `a0`; `c` is scale-free.
    pub params: AffineParams,
    /// The divisor `m / r` that was applied.
    pub scale: f64,
    /// The `r` drawn from `[1, 2)`.
    pub norm_factor: f64,
}

impl RecurrenceSample {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.target_next.len()
    }

    pub fn class(&self) -> SequenceClass {
        classify(self.params.c)
    }

    /// Model input `[n × D]`.
    pub fn input_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.len(), self.dim()], self.vectors.concat())
    }

    /// Shift-by-one targets `[n × D]`: `a_1 … a_n`.
    pub fn target_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * self.dim());
        for v in self.vectors.iter().skip(1) {
            data.extend_from_slice(v);
        }
        data.extend_from_slice(&self.target_next);
        Tensor::from_parts(vec![self.len(), self.dim()], data)
    }

    /// Largest `|a_i − (c·a_{i−1} + d)|` over the sequence including `a_n`.
    pub fn recurrence_residual(&self) -> f64 {
        let all: Vec<&Vec<f64>> = self.vectors.iter().chain([&self.target_next]).collect();
        all.windows(2)
            .flat_map(|w| {
                w[1].iter()
                    .zip(w[0])
                    .zip(&self.params.d)
                    .map(|((cur, prev), d)| (cur - (self.params.c * prev + d)).abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn max_norm(&self) -> f64 {
        self.vectors.iter().map(|v| norm(v)).fold(0.0, f64::max)
    }
}

fn check_len(n: usize) -> Result<()> {
    if !(MIN_LEN..=MAX_LEN).contains(&n) {
        return Err(Error::Argument(format!(
            "sequence length {n} outside [{MIN_LEN}, {MAX_LEN}]"
        )));
    }
    Ok(())
}

/// Raw (pre-normalization) terms `a_0 … a_n`, i.e. `n + 1` vectors.
pub fn roll_out(params: &AffineParams, n: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(params.a0.clone());
    for i in 0..n {
        let next = step(params, &out[i])?;
        out.push(next);
    }
    Ok(out)
}

/// Draws the raw parameters, resampling the (measure-zero) all-zero case.
pub fn generate(dim: usize, n: usize, rng: &mut Rng) -> Result<RecurrenceSample> {
    check_len(n)?;
    if dim == 0 {
        return Err(Error::Argument("vector dimension must be at least 1".into()));
    }
    let (lo, hi) = PARAM_RANGE;
    loop {
        let a0: Vec<f64> = (0..dim).map(|_| rng.uniform(lo, hi)).collect();
        let c = rng.uniform(lo, hi);
        let d: Vec<f64> = (0..dim).map(|_| rng.uniform(lo, hi)).collect();
        let r = rng.uniform(1.0, 2.0);
        let raw = AffineParams { c, d, a0 };
        let terms = roll_out(&raw, n)?;
        // m is taken over a_0 … a_{n-1}; a_n is scaled along with them.
        let normalized = match normalize(&terms[..n], &raw.d, r) {
            Ok(v) => v,
            Err(Error::DegenerateSample) => continue,
            Err(e) => return Err(e),
        };
        let target_next: Vec<f64> = terms[n].iter().map(|x| x / normalized.scale).collect();
        let params =
            AffineParams { c, d: normalized.d, a0: normalized.vectors[0].clone() };
        return Ok(RecurrenceSample {
            vectors: normalized.vectors,
            target_next,
            params,
            scale: normalized.scale,
            norm_factor: r,
        });
    }
}

/// A batch of equal-length sequences flattened to `[batch·n × D]`.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub lengths: Vec<usize>,
    pub samples: Vec<RecurrenceSample>,
}

impl SequenceBatch {
    pub fn from_samples(samples: Vec<RecurrenceSample>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Argument("empty batch".into()))?;
        let (n, dim) = (first.len(), first.dim());
        if samples.iter().any(|s| s.len() != n || s.dim() != dim) {
            return Err(Error::Argument("batch samples must share length and dimension".into()));
        }
        let b = samples.len();
        let mut inputs = Vec::with_capacity(b * n * dim);
        let mut targets = Vec::with_capacity(b * n * dim);
        for s in &samples {
            inputs.extend(s.input_tensor().into_data());
            targets.extend(s.target_tensor().into_data());
        }
        Ok(Self {
            inputs: Tensor::from_parts(vec![b, n, dim], inputs),
            targets: Tensor::from_parts(vec![b, n, dim], targets),
            lengths: vec![n; b],
            samples,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq_len(&self) -> usize {
        self.lengths.first().copied().unwrap_or(0)
    }
}

/// One length drawn from `min_len..=max_len`, shared by the whole batch.
pub fn make_batch_with(
    dim: usize,
    batch_size: usize,
    min_len: usize,
    max_len: usize,
    rng: &mut Rng,
) -> Result<SequenceBatch> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    check_len(min_len)?;
    check_len(max_len)?;
    if min_len > max_len {
        return Err(Error::Argument(format!("min_len {min_len} > max_len {max_len}")));
    }
    let n = rng.int_inclusive(min_len, max_len);
    let samples = (0..batch_size).map(|_| generate(dim, n, rng)).collect::<Result<Vec<_>>>()?;
    SequenceBatch::from_samples(samples)
}

pub fn make_batch(dim: usize, batch_size: usize, rng: &mut Rng) -> Result<SequenceBatch> {
    make_batch_with(dim, batch_size, MIN_LEN, MAX_LEN, rng)
}

/// Fixed evaluation set: sample `i` is drawn from its own seed `mix_seed(seed, i)`
/// with a uniformly drawn length, so any sample can be regenerated alone.
pub fn generate_dataset(
    dim: usize,
    count: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<DatasetRecord>> {
    check_len(min_len)?;
    check_len(max_len)?;
    if min_len > max_len {
        return Err(Error::Argument(format!("min_len {min_len} > max_len {max_len}")));
    }
    (0..count as u64)
        .map(|i| {
            let sample_seed = mix_seed(seed, i);
            let mut rng = Rng::new(sample_seed);
            let n = rng.int_inclusive(min_len, max_len);
            let sample = generate(dim, n, &mut rng)?;
            Ok(DatasetRecord::new(sample, sample_seed))
        })
        .collect()
}

/// One line of the JSONL dataset format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub vectors: Vec<Vec<f64>>,
    pub target_next: Vec<f64>,
    pub c: f64,
    pub d: Vec<f64>,
    pub length: usize,
    pub scale: f64,
    pub norm_factor: f64,
    pub seed: u64,
}

impl DatasetRecord {
    pub fn new(sample: RecurrenceSample, seed: u64) -> Self {
        Self {
            length: sample.len(),
            c: sample.params.c,
            d: sample.params.d,
            vectors: sample.vectors,
            target_next: sample.target_next,
            scale: sample.scale,
            norm_factor: sample.norm_factor,
            seed,
        }
    }

    pub fn to_sample(&self) -> Result<RecurrenceSample> {
        let dim = self.target_next.len();
        if self.vectors.len() != self.length
            || self.d.len() != dim
            || self.vectors.iter().any(|v| v.len() != dim)
        {
            return Err(Error::Dataset(format!(
                "inconsistent record (seed {}): length/dimension mismatch",
                self.seed
            )));
        }
        check_len(self.length)?;
        let finite = self.vectors.iter().flatten().chain(&self.target_next).chain(&self.d);
        if finite.clone().any(|v| !v.is_finite()) || !self.c.is_finite() {
            return Err(Error::NonFinite(format!("dataset record with seed {}", self.seed)));
        }
        Ok(RecurrenceSample {
            params: AffineParams { c: self.c, d: self.d.clone(), a0: self.vectors[0].clone() },
            vectors: self.vectors.clone(),
            target_next: self.target_next.clone(),
            scale: self.scale,
            norm_factor: self.norm_factor,
        })
    }
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RecurrenceSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
        out.push(record.to_sample()?);
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("{} contains no samples", path.display())));
    }
    Ok(out)
}
