//! `recurlens analyze <analysis>`: one bundle of CSV, JSON and SVG per analysis.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use super::{Bundle, CliError, CliResult, CommonArgs, KvFile, Resolver};
use crate::interp::{self, report, report::num, report::Table, AblationMode, CircuitKind, DlaVariant, OvScope, VectorKind};
use crate::model::{self, ActivationCache, HeadId, ModelParams};
use crate::numerics::{mix_seed, Rng, Tensor};
use crate::recurrence::{classify, generate, read_jsonl, RecurrenceSample, SequenceBatch, SequenceClass, MAX_LEN, MIN_LEN};

const DEFAULT_SAMPLES: usize = 256;
const SAMPLE_STREAM: u64 = 0xa11a_5e75;
const POPULATION_STREAM: u64 = 0xb0b_0a75;
const EVAL_STREAM: u64 = 0xe7a1_5e75;

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(subcommand)]
    pub analysis: Analysis,
}

/// Options every analysis accepts.
#[derive(Debug, Clone, Args)]
pub struct Shared {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Output directory; must not exist.
    #[arg(long)]
    pub out: PathBuf,
    /// Analyse the raw weights instead of the folded model.
    #[arg(long)]
    pub no_fold: bool,
    /// JSONL dataset to analyse; by default samples are generated from the seed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of generated samples.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Sequence length of the analysed batch (generated, or filtered from --data).
    #[arg(long)]
    pub len: Option<usize>,
    /// Keep only sequences of this class.
    #[arg(long, value_enum)]
    pub class: Option<ClassArg>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClassArg {
    Alternating,
    Decay,
    Growth,
}

impl ClassArg {
    fn class(self) -> SequenceClass {
        match self {
            Self::Alternating => SequenceClass::Alternating,
            Self::Decay => SequenceClass::Decay,
            Self::Growth => SequenceClass::Growth,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Target,
    Delta,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VectorsArg {
    Residual,
    Random,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Mean,
    Zero,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CircuitArg {
    OvFull,
    OvModel,
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Attention patterns and previous-token statistics.
    ///
    /// attention_stats.csv: layer,head,prev_mass,pos1_mass,alternation,prev_argmax_frac,checkerboard,previous_token
    /// attention_mean.csv: layer,head,dest,src,weight (averaged over samples)
    Attention {
        #[command(flatten)]
        shared: Shared,
        /// Only this layer.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Direct attribution of every head to the prediction, per position.
    ///
    /// dla.csv: unit,position,value (units: embed, L<l>H<h>, L<l>.b_O, L<l>.mlp, ln_final.b, rest, total)
    Dla {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Direct attribution of each MLP block, per position.
    ///
    /// dla.csv: unit,position,value
    DlaMlp {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
    /// Linear fit of a layer's combined (or one head's) OV map on residual vectors.
    ///
    /// ov_per_vector.csv: vector,slope,intercept,r2
    OvLinearity {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        layer: Option<usize>,
        /// Fit a single head instead of the summed layer map.
        #[arg(long)]
        head: Option<usize>,
        #[arg(long, value_enum)]
        vectors: Option<VectorsArg>,
    },
    /// Fraction of each layer input lying outside the embedding subspace.
    ///
    /// ortho_fraction.csv: layer,vector,fraction
    OrthoFraction {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Mean or zero ablation of a set of heads.
    ///
    /// ablation.csv: heads,mode,baseline_mse,ablated_mse,ratio (the whole set, then each head alone)
    Ablate {
        #[command(flatten)]
        shared: Shared,
        /// Ablate every head of this layer.
        #[arg(long, conflicts_with = "heads")]
        layer: Option<usize>,
        /// Comma-separated LAYER.HEAD list.
        #[arg(long, value_delimiter = ',')]
        heads: Option<Vec<HeadId>>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Samples used to estimate mean activations.
        #[arg(long)]
        population: Option<usize>,
        /// Generated evaluation samples (ignored with --data).
        #[arg(long)]
        eval_samples: Option<usize>,
    },
    /// Eigenvalue score of every head's OV circuit.
    ///
    /// eig_scores.csv: layer,head,circuit,score (empty score when undefined)
    EigScores {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, value_enum)]
        circuit: Option<CircuitArg>,
    },
    /// Replace W_Q by a random matrix and W_K by its transposed pseudoinverse.
    ///
    /// qk_pinv.csv: head,idempotence,symmetry,rank
    QkPinv {
        #[command(flatten)]
        shared: Shared,
        /// Comma-separated LAYER.HEAD list.
        #[arg(long, value_delimiter = ',', required = true)]
        heads: Vec<HeadId>,
        #[arg(long)]
        eval_samples: Option<usize>,
    },
    /// Unembed the residual stream after a layer.
    ///
    /// resid_projection.csv: position,component,input,projection,target (one sample)
    /// stage_similarity.csv: stage,mean_cosine,mse (whole batch)
    ResidProjection {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        after_layer: Option<usize>,
        /// Index of the sample to export.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Compare the layer-0 residual with the estimate a_n + alpha·a_{n-1}.
    ///
    /// crude_estimate.csv: position,cos_input,cos_resid_l0,cos_estimate,mse_input,mse_resid_l0,mse_estimate
    /// crude_series.csv: series,position,component,value
    CrudeEstimate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        sample: Option<usize>,
    },
    /// OV and QK circuit matrices and their spectra.
    ///
    /// circuits.csv: layer,head,circuit,frobenius,trace,rank,effective_rank,top_singular_share
    /// matrices/L<l>H<h>_<ov|qk>.csv: row-major matrix, no header
    Circuits {
        #[command(flatten)]
        shared: Shared,
        /// Comma-separated LAYER.HEAD list; defaults to every head.
        #[arg(long, value_delimiter = ',')]
        heads: Option<Vec<HeadId>>,
        /// W_V·W_O and W_Q·W_Kᵀ in model space instead of the vocabulary-space products.
        #[arg(long)]
        model_space: bool,
    },
}

impl Analysis {
    fn name(&self) -> &'static str {
        match self {
            Self::Attention { .. } => "attention",
            Self::Dla { .. } => "dla",
            Self::DlaMlp { .. } => "dla-mlp",
            Self::OvLinearity { .. } => "ov-linearity",
            Self::OrthoFraction { .. } => "ortho-fraction",
            Self::Ablate { .. } => "ablate",
            Self::EigScores { .. } => "eig-scores",
            Self::QkPinv { .. } => "qk-pinv",
            Self::ResidProjection { .. } => "resid-projection",
            Self::CrudeEstimate { .. } => "crude-estimate",
            Self::Circuits { .. } => "circuits",
        }
    }

    fn shared(&self) -> &Shared {
        match self {
            Self::Attention { shared, .. }
            | Self::Dla { shared, .. }
            | Self::DlaMlp { shared, .. }
            | Self::OvLinearity { shared, .. }
            | Self::OrthoFraction { shared, .. }
            | Self::Ablate { shared, .. }
            | Self::EigScores { shared, .. }
            | Self::QkPinv { shared, .. }
            | Self::ResidProjection { shared, .. }
            | Self::CrudeEstimate { shared, .. }
            | Self::Circuits { shared, .. } => shared,
        }
    }
}

/// Everything an analysis needs once flags are resolved.
struct Ctx {
    params: ModelParams,
    seed: u64,
    resolver: Resolver,
    config: BTreeMap<&'static str, serde_json::Value>,
    shared: Shared,
}

impl Ctx {
    fn opt<T>(&mut self, key: &'static str, flag: Option<T>, default: T) -> CliResult<T>
    where
        T: std::str::FromStr + Serialize,
        T::Err: std::fmt::Display,
    {
        let v = self.resolver.or(key, flag, default)?;
        self.config.insert(key, json!(v));
        Ok(v)
    }

    fn choice<E: ValueEnum + Clone>(&mut self, key: &'static str, flag: Option<E>, default: E) -> CliResult<E> {
        let name = |e: &E| e.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default();
        let raw = self.resolver.get::<String>(key, flag.as_ref().map(name))?;
        let v = match raw {
            None => default,
            Some(s) => E::from_str(&s, true).map_err(|e| CliError::Usage(format!("{key}: {e}")))?,
        };
        self.config.insert(key, json!(name(&v)));
        Ok(v)
    }

    fn layer(&self, layer: usize) -> CliResult<usize> {
        if layer >= self.params.config.n_layers {
            return Err(CliError::Usage(format!("layer {layer} out of range (model has {})", self.params.config.n_layers)));
        }
        Ok(layer)
    }

    fn heads(&self, heads: &[HeadId]) -> CliResult<()> {
        for h in heads {
            h.check(&self.params.config)?;
        }
        Ok(())
    }

    /// The equal-length analysis batch described by --data/--samples/--len/--class.
    fn batch(&mut self) -> CliResult<Vec<RecurrenceSample>> {
        let class = self.choice_opt_class()?;
        let len_flag = self.shared.len;
        let samples = match self.shared.data.clone() {
            Some(path) => {
                let all: Vec<RecurrenceSample> = read_jsonl(&path)?
                    .into_iter()
                    .filter(|s| class.is_none_or(|c| s.class() == c))
                    .collect();
                let len = match self.resolver.get("len", len_flag)? {
                    Some(l) => l,
                    None => modal_length(&all).ok_or_else(|| CliError::Data(format!("{} has no matching samples", path.display())))?,
                };
                self.config.insert("len", json!(len));
                let kept: Vec<RecurrenceSample> = all.into_iter().filter(|s| s.len() == len).collect();
                if kept.is_empty() {
                    return Err(CliError::Data(format!("{} has no matching samples of length {len}", path.display())));
                }
                kept
            }
            None => {
                let count = self.opt("samples", self.shared.samples, DEFAULT_SAMPLES)?;
                let len = self.opt("len", len_flag, MAX_LEN)?;
                generated(self.params.config.d_vocab, count, len, len, class, mix_seed(self.seed, SAMPLE_STREAM))?
            }
        };
        if samples[0].dim() != self.params.config.d_vocab {
            return Err(CliError::Data(format!(
                "dataset dimension {} does not match model d_vocab {}",
                samples[0].dim(),
                self.params.config.d_vocab
            )));
        }
        if samples[0].len() > self.params.config.n_ctx {
            return Err(CliError::Usage(format!("length {} exceeds the context of {}", samples[0].len(), self.params.config.n_ctx)));
        }
        Ok(samples)
    }

    /// Mixed-length evaluation set: --data as given, else `count` generated samples.
    fn eval_set(&mut self, count_flag: Option<usize>) -> CliResult<Vec<RecurrenceSample>> {
        let class = self.choice_opt_class()?;
        match self.shared.data.clone() {
            Some(path) => {
                let set: Vec<RecurrenceSample> =
                    read_jsonl(&path)?.into_iter().filter(|s| class.is_none_or(|c| s.class() == c)).collect();
                if set.is_empty() {
                    return Err(CliError::Data(format!("{} has no matching samples", path.display())));
                }
                Ok(set)
            }
            None => {
                let count = self.opt("eval_samples", count_flag, 1000)?;
                let d = self.params.config.d_vocab;
                generated(d, count, MIN_LEN, MAX_LEN, class, mix_seed(self.seed, EVAL_STREAM))
            }
        }
    }

    fn choice_opt_class(&mut self) -> CliResult<Option<SequenceClass>> {
        let class = match self.shared.class {
            Some(c) => Some(c),
            None => match self.resolver.get::<String>("class", None)? {
                None => None,
                Some(s) => Some(ClassArg::from_str(&s, true).map_err(|e| CliError::Usage(format!("class: {e}")))?),
            },
        };
        if let Some(c) = class {
            self.config.insert("class", json!(c.class().name()));
        }
        Ok(class.map(ClassArg::class))
    }
}

fn modal_length(samples: &[RecurrenceSample]) -> Option<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.len()).or_default() += 1;
    }
    // Ties go to the longest length.
    counts.into_iter().max_by_key(|&(len, n)| (n, len)).map(|(len, _)| len)
}

/// Deterministic samples: candidate `i` uses seed `mix_seed(seed, i)`.
fn generated(
    dim: usize,
    count: usize,
    min_len: usize,
    max_len: usize,
    class: Option<SequenceClass>,
    seed: u64,
) -> CliResult<Vec<RecurrenceSample>> {
    if count == 0 {
        return Err(CliError::Usage("sample count must be at least 1".into()));
    }
    if min_len < MIN_LEN || max_len > MAX_LEN || min_len > max_len {
        return Err(CliError::Usage(format!("length must lie in {MIN_LEN}..={MAX_LEN}")));
    }
    let mut out = Vec::with_capacity(count);
    let limit = 1000 * count as u64;
    let mut i = 0u64;
    while out.len() < count {
        if i >= limit {
            return Err(CliError::Data("could not draw enough samples of the requested class".into()));
        }
        let mut rng = Rng::new(mix_seed(seed, i));
        let n = rng.int_inclusive(min_len, max_len);
        let s = generate(dim, n, &mut rng)?;
        if class.is_none_or(|c| classify(s.params.c) == c) {
            out.push(s);
        }
        i += 1;
    }
    Ok(out)
}

fn cache_of(params: &ModelParams, samples: &[RecurrenceSample]) -> CliResult<(SequenceBatch, ActivationCache)> {
    let batch = SequenceBatch::from_samples(samples.to_vec())?;
    let cache = model::run(params, &batch.inputs, None)?;
    Ok((batch, cache))
}

/// Splits a `[k, n, m]` tensor into `k` matrices.
fn split_first(t: &Tensor) -> Vec<Tensor> {
    let s = t.shape();
    let (n, m) = (s[1], s[2]);
    t.data()
        .chunks(n * m)
        .map(|c| Tensor::from_vec(&[n, m], c.to_vec()).expect("chunk has n·m entries"))
        .collect()
}

fn write_matrix(path: &std::path::Path, m: &Tensor) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(crate::Error::from)?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|&x| num(x))).map_err(crate::Error::from)?;
    }
    w.flush().map_err(crate::Error::Io)?;
    Ok(())
}

fn fit_cells(f: &crate::numerics::LinearFit) -> [String; 3] {
    [num(f.slope), num(f.intercept), num(f.r2)]
}

pub fn run(args: &AnalyzeArgs) -> CliResult<()> {
    let analysis = &args.analysis;
    let shared = analysis.shared().clone();
    let mut resolver = Resolver::new(KvFile::load(shared.common.config.as_deref())?);
    let seed = resolver.seed(shared.common.seed)?;
    let raw = model::load(&shared.ckpt)?;
    let params = if shared.no_fold { raw } else { model::fold(&raw) };
    let mut config = BTreeMap::new();
    config.insert("ckpt", json!(shared.ckpt.display().to_string()));
    config.insert("fold", json!(!shared.no_fold));
    if let Some(d) = &shared.data {
        config.insert("data", json!(d.display().to_string()));
    }
    let mut ctx = Ctx { params, seed, resolver, config, shared };

    // Resolve everything before creating the output directory.
    let job = prepare(&mut ctx, analysis)?;
    let Ctx { params, resolver, config, shared, .. } = ctx;
    resolver.finish()?;
    let config_json = serde_json::to_value(&config).map_err(|e| CliError::Data(e.to_string()))?;
    let mut bundle = Bundle::create(&shared.out, &format!("analyze {}", analysis.name()), seed, config_json)?;
    bundle.add_input(&shared.ckpt)?;
    if let Some(d) = &shared.data {
        bundle.add_input(d)?;
    }
    let written = execute(&params, job, seed, &bundle)?;
    for name in &written {
        bundle.record(name)?;
    }
    let dir = bundle.finish()?;
    println!("{} -> {}", analysis.name(), dir.display());
    Ok(())
}

/// A fully resolved analysis.
enum Job {
    Attention { samples: Vec<RecurrenceSample>, layers: Vec<usize> },
    Dla { samples: Vec<RecurrenceSample>, variant: DlaVariant, mlp: bool },
    OvLinearity { samples: Vec<RecurrenceSample>, layer: usize, scope: OvScope, kind: VectorKind },
    OrthoFraction { samples: Vec<RecurrenceSample>, layers: Vec<usize> },
    Ablate { heads: Vec<HeadId>, mode: AblationMode, population: Vec<RecurrenceSample>, eval: Vec<RecurrenceSample> },
    EigScores { kind: CircuitKind },
    QkPinv { heads: Vec<HeadId>, eval: Vec<RecurrenceSample> },
    ResidProjection { samples: Vec<RecurrenceSample>, after_layer: usize, sample: usize },
    CrudeEstimate { sample: RecurrenceSample, alpha: f64 },
    Circuits { heads: Vec<HeadId>, model_space: bool },
}

fn all_layers(ctx: &mut Ctx, layer: Option<usize>) -> CliResult<Vec<usize>> {
    match ctx.resolver.get("layer", layer)? {
        Some(l) => {
            ctx.config.insert("layer", json!(l));
            Ok(vec![ctx.layer(l)?])
        }
        None => Ok((0..ctx.params.config.n_layers).collect()),
    }
}

fn variant(ctx: &mut Ctx, flag: Option<VariantArg>) -> CliResult<DlaVariant> {
    Ok(match ctx.choice("variant", flag, VariantArg::Target)? {
        VariantArg::Target => DlaVariant::Target,
        VariantArg::Delta => DlaVariant::Delta,
    })
}

fn prepare(ctx: &mut Ctx, analysis: &Analysis) -> CliResult<Job> {
    let cfg = ctx.params.config;
    Ok(match analysis {
        Analysis::Attention { layer, .. } => {
            let layers = all_layers(ctx, *layer)?;
            Job::Attention { samples: ctx.batch()?, layers }
        }
        Analysis::Dla { variant: v, .. } => Job::Dla { variant: variant(ctx, *v)?, samples: ctx.batch()?, mlp: false },
        Analysis::DlaMlp { variant: v, .. } => Job::Dla { variant: variant(ctx, *v)?, samples: ctx.batch()?, mlp: true },
        Analysis::OvLinearity { layer, head, vectors, .. } => {
            let layer = ctx.opt("layer", *layer, 0)?;
            ctx.layer(layer)?;
            let scope = match ctx.resolver.get("head", *head)? {
                Some(h) => {
                    ctx.config.insert("head", json!(h));
                    ctx.heads(&[HeadId::new(layer, h)])?;
                    OvScope::Head { head: h }
                }
                None => OvScope::Layer,
            };
            let kind = match ctx.choice("vectors", *vectors, VectorsArg::Residual)? {
                VectorsArg::Residual => VectorKind::Residual,
                VectorsArg::Random => VectorKind::Random,
            };
            Job::OvLinearity { samples: ctx.batch()?, layer, scope, kind }
        }
        Analysis::OrthoFraction { layer, .. } => {
            let layers = all_layers(ctx, *layer)?;
            Job::OrthoFraction { samples: ctx.batch()?, layers }
        }
        Analysis::Ablate { layer, heads, mode, population, eval_samples, .. } => {
            let heads = match (ctx.resolver.get("layer", *layer)?, heads) {
                (_, Some(h)) => h.clone(),
                (Some(l), None) => {
                    ctx.layer(l)?;
                    (0..cfg.n_heads).map(|h| HeadId::new(l, h)).collect()
                }
                (None, None) => return Err(CliError::Usage("ablate needs --layer or --heads".into())),
            };
            ctx.heads(&heads)?;
            ctx.config.insert("heads", json!(heads.iter().map(ToString::to_string).collect::<Vec<_>>()));
            let mode = match ctx.choice("mode", *mode, ModeArg::Mean)? {
                ModeArg::Mean => AblationMode::Mean,
                ModeArg::Zero => AblationMode::Zero,
            };
            let pop_count = ctx.opt("population", *population, 1000)?;
            let population =
                generated(cfg.d_vocab, pop_count, MIN_LEN, MAX_LEN.min(cfg.n_ctx), None, mix_seed(ctx.seed, POPULATION_STREAM))?;
            Job::Ablate { heads, mode, population, eval: ctx.eval_set(*eval_samples)? }
        }
        Analysis::EigScores { circuit, .. } => Job::EigScores {
            kind: match ctx.choice("circuit", *circuit, CircuitArg::OvFull)? {
                CircuitArg::OvFull => CircuitKind::OvFull,
                CircuitArg::OvModel => CircuitKind::OvModel,
            },
        },
        Analysis::QkPinv { heads, eval_samples, .. } => {
            ctx.heads(heads)?;
            ctx.config.insert("heads", json!(heads.iter().map(ToString::to_string).collect::<Vec<_>>()));
            Job::QkPinv { heads: heads.clone(), eval: ctx.eval_set(*eval_samples)? }
        }
        Analysis::ResidProjection { after_layer, sample, .. } => {
            let after_layer = ctx.opt("after_layer", *after_layer, 0)?;
            ctx.layer(after_layer)?;
            let sample = ctx.opt("sample", *sample, 0)?;
            let samples = ctx.batch()?;
            if sample >= samples.len() {
                return Err(CliError::Usage(format!("sample {sample} out of range ({} samples)", samples.len())));
            }
            Job::ResidProjection { samples, after_layer, sample }
        }
        Analysis::CrudeEstimate { alpha, sample, .. } => {
            let alpha = ctx.opt("alpha", *alpha, interp::DEFAULT_ALPHA)?;
            if !alpha.is_finite() {
                return Err(CliError::Usage("alpha must be finite".into()));
            }
            let index = ctx.opt("sample", *sample, 0)?;
            let samples = ctx.batch()?;
            let sample = samples
                .get(index)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("sample {index} out of range ({} samples)", samples.len())))?;
            Job::CrudeEstimate { sample, alpha }
        }
        Analysis::Circuits { heads, model_space, .. } => {
            let heads = heads.clone().unwrap_or_else(|| HeadId::all(&cfg));
            ctx.heads(&heads)?;
            ctx.config.insert("heads", json!(heads.iter().map(ToString::to_string).collect::<Vec<_>>()));
            ctx.config.insert("model_space", json!(model_space));
            Job::Circuits { heads, model_space: *model_space }
        }
    })
}

/// Runs the analysis and returns the names of the files written into the bundle.
fn execute(params: &ModelParams, job: Job, seed: u64, bundle: &Bundle) -> CliResult<Vec<String>> {
    let mut files = Vec::new();
    let mut emit = |name: &str| {
        files.push(name.to_string());
        bundle.path(name)
    };
    match job {
        Job::Attention { samples, layers } => {
            let (_, cache) = cache_of(params, &samples)?;
            let mut stats_t = Table::new([
                "layer", "head", "prev_mass", "pos1_mass", "alternation", "prev_argmax_frac", "checkerboard", "previous_token",
            ]);
            let mut mean_t = Table::new(["layer", "head", "dest", "src", "weight"]);
            let mut stats_all = Vec::new();
            for &layer in &layers {
                let stats = interp::attention_stats(&cache, layer)?;
                for s in &stats {
                    stats_t.push(vec![
                        s.head.layer.to_string(),
                        s.head.head.to_string(),
                        num(s.prev_mass),
                        num(s.pos1_mass),
                        num(s.alternation),
                        num(s.prev_argmax_frac),
                        s.checkerboard.to_string(),
                        s.is_previous_token().to_string(),
                    ])?;
                }
                stats_all.extend(stats);
                let means = split_first(&interp::mean_patterns(&cache, layer)?);
                for (h, m) in means.iter().enumerate() {
                    for i in 0..m.rows() {
                        for j in 0..=i {
                            mean_t.push(vec![layer.to_string(), h.to_string(), i.to_string(), j.to_string(), num(m.get(i, j))])?;
                        }
                    }
                }
                let panels: Vec<(String, Tensor)> =
                    means.into_iter().enumerate().map(|(h, m)| (format!("L{layer}H{h}"), m)).collect();
                report::heatmap_grid(&emit(&format!("attention_L{layer}.svg")), &format!("Mean attention, layer {layer}"), &panels)?;
                let first = split_first(&interp::attention_patterns(&cache, layer, 0)?);
                let panels: Vec<(String, Tensor)> =
                    first.into_iter().enumerate().map(|(h, m)| (format!("L{layer}H{h}"), m)).collect();
                report::heatmap_grid(
                    &emit(&format!("attention_L{layer}_sample0.svg")),
                    &format!("Attention of sample 0 ({}), layer {layer}", samples[0].class().name()),
                    &panels,
                )?;
            }
            stats_t.write(&emit("attention_stats.csv"))?;
            mean_t.write(&emit("attention_mean.csv"))?;
            report::write_json(
                &emit("attention.json"),
                &json!({ "samples": samples.len(), "seq_len": cache.seq_len, "checkerboard_threshold": interp::CHECKERBOARD_THRESHOLD, "heads": stats_all }),
            )?;
        }
        Job::Dla { samples, variant, mlp } => {
            let (batch, cache) = cache_of(params, &samples)?;
            let reference = interp::references(&batch, variant)?;
            let full = interp::dla(params, &cache, &reference, variant)?;
            let result = if mlp { full.select(|u| u.is_mlp()) } else { full.select(|u| u.is_head()) };
            let mut t = Table::new(["unit", "position", "value"]);
            let mut labels = Vec::new();
            let mut heat = Vec::new();
            for row in &result.rows {
                labels.push(row.unit.to_string());
                heat.extend_from_slice(&row.values);
                for (p, v) in row.values.iter().enumerate() {
                    t.push(vec![row.unit.to_string(), p.to_string(), num(*v)])?;
                }
            }
            for (name, values) in [("rest", &result.rest), ("total", &result.total)] {
                for (p, v) in values.iter().enumerate() {
                    t.push(vec![name.to_string(), p.to_string(), num(*v)])?;
                }
            }
            t.write(&emit("dla.csv"))?;
            let n = result.seq_len;
            let mean_abs: Vec<f64> =
                result.rows.iter().map(|r| r.values.iter().map(|v| v.abs()).sum::<f64>() / n as f64).collect();
            report::write_json(
                &emit("dla.json"),
                &json!({
                    "variant": variant.name(),
                    "samples": result.samples,
                    "seq_len": n,
                    "additivity_residual": result.additivity_residual,
                    "mean_abs": result.rows.iter().zip(&mean_abs).map(|(r, m)| json!({ "unit": r.unit.to_string(), "mean_abs": m })).collect::<Vec<_>>(),
                }),
            )?;
            if !result.rows.is_empty() {
                let m = Tensor::from_vec(&[result.rows.len(), n], heat)?;
                let what = if mlp { "MLP" } else { "head" };
                report::heatmap(&emit("dla.svg"), &format!("{what} attribution ({}), units × position", variant.name()), &m)?;
                report::bar_chart(&emit("dla_mean_abs.svg"), &format!("Mean |{what} attribution|"), &labels, &mean_abs)?;
            }
        }
        Job::OvLinearity { samples, layer, scope, kind } => {
            let (_, cache) = cache_of(params, &samples)?;
            let mut rng = Rng::with_stream(seed, 3);
            let rep = interp::ov_linearity(params, &cache, layer, scope, kind, &mut rng)?;
            let mut t = Table::new(["vector", "slope", "intercept", "r2"]);
            for (i, f) in rep.per_vector.iter().enumerate() {
                let [a, b, c] = fit_cells(f);
                t.push(vec![i.to_string(), a, b, c])?;
            }
            t.write(&emit("ov_per_vector.csv"))?;
            report::write_json(&emit("ov_linearity.json"), &rep)?;
            let title = match scope {
                OvScope::Layer => format!("Layer {layer} OV"),
                OvScope::Head { head } => format!("L{layer}H{head} OV"),
            };
            report::scatter_fit(&emit("ov_linearity.svg"), &title, &rep.points, &rep.pooled)?;
        }
        Job::OrthoFraction { samples, layers } => {
            let (_, cache) = cache_of(params, &samples)?;
            let mut t = Table::new(["layer", "vector", "fraction"]);
            let mut reports = Vec::new();
            for &layer in &layers {
                let rep = interp::layer_orthogonal_fraction(params, &cache, layer)?;
                for (i, f) in rep.fractions.iter().enumerate() {
                    t.push(vec![layer.to_string(), i.to_string(), num(*f)])?;
                }
                reports.push(rep);
            }
            t.write(&emit("ortho_fraction.csv"))?;
            report::write_json(&emit("ortho_fraction.json"), &reports)?;
            let labels: Vec<String> = reports.iter().map(|r| format!("L{}", r.layer)).collect();
            let means: Vec<f64> = reports.iter().map(|r| r.mean_fraction).collect();
            report::bar_chart(&emit("ortho_fraction.svg"), "Mean fraction outside the embedding subspace", &labels, &means)?;
        }
        Job::Ablate { heads, mode, population, eval } => {
            let mut t = Table::new(["heads", "mode", "baseline_mse", "ablated_mse", "ratio"]);
            let mut reports = vec![interp::ablate(params, &heads, mode, &population, &eval)?];
            if heads.len() > 1 {
                for &h in &heads {
                    reports.push(interp::ablate(params, &[h], mode, &population, &eval)?);
                }
            }
            for r in &reports {
                let names: Vec<String> = r.heads.iter().map(ToString::to_string).collect();
                t.push(vec![names.join(" "), mode.name().into(), num(r.baseline_mse), num(r.ablated_mse), num(r.ratio())])?;
            }
            t.write(&emit("ablation.csv"))?;
            report::write_json(&emit("ablation.json"), &reports)?;
            let labels: Vec<String> = std::iter::once("none".to_string())
                .chain(reports.iter().map(|r| r.heads.iter().map(ToString::to_string).collect::<Vec<_>>().join("+")))
                .collect();
            let values: Vec<f64> = std::iter::once(reports[0].baseline_mse).chain(reports.iter().map(|r| r.ablated_mse)).collect();
            report::bar_chart(&emit("ablation.svg"), &format!("MSE after {} ablation", mode.name()), &labels, &values)?;
        }
        Job::EigScores { kind } => {
            let mut t = Table::new(["layer", "head", "circuit", "score"]);
            let mut labels = Vec::new();
            let mut values = Vec::new();
            let mut rows = Vec::new();
            for head in HeadId::all(&params.config) {
                let c = interp::circuits(params, head)?;
                let m = match kind {
                    CircuitKind::OvFull => &c.ov_full,
                    CircuitKind::OvModel => &c.ov_model,
                };
                let score = match interp::eigenvalue_score(m) {
                    Ok(s) => Some(s),
                    Err(crate::Error::UndefinedScore) => None,
                    Err(e) => return Err(e.into()),
                };
                t.push(vec![head.layer.to_string(), head.head.to_string(), kind.name().into(), score.map(num).unwrap_or_default()])?;
                labels.push(format!("{}.{}", head.layer, head.head));
                values.push(score.unwrap_or(0.0));
                rows.push(json!({ "layer": head.layer, "head": head.head, "score": score }));
            }
            t.write(&emit("eig_scores.csv"))?;
            report::write_json(&emit("eig_scores.json"), &json!({ "circuit": kind.name(), "heads": rows }))?;
            report::bar_chart(&emit("eig_scores.svg"), &format!("Eigenvalue score ({})", kind.name()), &labels, &values)?;
        }
        Job::QkPinv { heads, eval } => {
            let mut rng = Rng::with_stream(seed, 4);
            let rep = interp::qk_pinv_intervention(params, &heads, &mut rng, &eval)?;
            let mut t = Table::new(["head", "idempotence", "symmetry", "rank"]);
            for c in &rep.checks {
                t.push(vec![c.head.to_string(), num(c.idempotence), num(c.symmetry), c.rank.to_string()])?;
            }
            t.write(&emit("qk_pinv.csv"))?;
            report::write_json(
                &emit("qk_pinv.json"),
                &json!({
                    "heads": rep.heads.iter().map(ToString::to_string).collect::<Vec<_>>(),
                    "baseline_mse": rep.baseline_mse,
                    "new_mse": rep.new_mse,
                    "ratio": rep.new_mse / rep.baseline_mse,
                    "eval_samples": eval.len(),
                    "checks": rep.checks,
                }),
            )?;
            report::bar_chart(
                &emit("qk_pinv.svg"),
                "MSE before and after the QK pseudoinverse intervention",
                &["original".to_string(), "intervened".to_string()],
                &[rep.baseline_mse, rep.new_mse],
            )?;
        }
        Job::ResidProjection { samples, after_layer, sample } => {
            let (batch, cache) = cache_of(params, &samples)?;
            let proj = interp::resid_projection(params, &cache, sample, after_layer)?;
            let s = &samples[sample];
            let (input, target) = (s.input_tensor(), s.target_tensor());
            let mut t = Table::new(["position", "component", "input", "projection", "target"]);
            for p in 0..proj.rows() {
                for k in 0..proj.cols() {
                    t.push(vec![p.to_string(), k.to_string(), num(input.get(p, k)), num(proj.get(p, k)), num(target.get(p, k))])?;
                }
            }
            t.write(&emit("resid_projection.csv"))?;
            let (b, n) = (batch.batch_size(), batch.seq_len());
            let targets = batch.targets.clone().reshape(&[b * n, params.config.d_vocab])?;
            let sims = interp::stage_similarities(params, &cache, &targets)?;
            let mut st = Table::new(["stage", "mean_cosine", "mse"]);
            for sim in &sims {
                st.push(vec![sim.stage.to_string(), num(sim.mean_cosine), num(sim.mse)])?;
            }
            st.write(&emit("stage_similarity.csv"))?;
            report::write_json(
                &emit("resid_projection.json"),
                &json!({ "after_layer": after_layer, "sample": sample, "class": s.class().name(), "c": s.params.c, "stages": sims }),
            )?;
            report::heatmap_grid(
                &emit("resid_projection.svg"),
                &format!("Sample {sample}: residual after layer {after_layer}, unembedded"),
                &[("input a_m".into(), input), ("projection".into(), proj), ("target a_(m+1)".into(), target)],
            )?;
        }
        Job::CrudeEstimate { sample, alpha } => {
            let rep = interp::crude_estimate_report(params, &sample, alpha)?;
            let mut t = Table::new(["position", "cos_input", "cos_resid_l0", "cos_estimate", "mse_input", "mse_resid_l0", "mse_estimate"]);
            for r in &rep.rows {
                t.push(vec![
                    r.position.to_string(),
                    num(r.cos_input),
                    num(r.cos_resid_l0),
                    num(r.cos_estimate),
                    num(r.mse_input),
                    num(r.mse_resid_l0),
                    num(r.mse_estimate),
                ])?;
            }
            t.write(&emit("crude_estimate.csv"))?;
            let mut st = Table::new(["series", "position", "component", "value"]);
            for (name, m) in interp::SERIES_NAMES.iter().zip(&rep.series) {
                for p in 0..m.rows() {
                    for k in 0..m.cols() {
                        st.push(vec![name.to_string(), p.to_string(), k.to_string(), num(m.get(p, k))])?;
                    }
                }
            }
            st.write(&emit("crude_series.csv"))?;
            report::write_json(&emit("crude_estimate.json"), &rep)?;
            let x: Vec<f64> = rep.rows.iter().map(|r| r.position as f64).collect();
            let cos = vec![
                ("input".to_string(), rep.rows.iter().map(|r| r.cos_input).collect()),
                ("resid after L0".to_string(), rep.rows.iter().map(|r| r.cos_resid_l0).collect()),
                ("estimate".to_string(), rep.rows.iter().map(|r| r.cos_estimate).collect()),
            ];
            report::line_chart(&emit("crude_estimate.svg"), &format!("Cosine with the target (alpha {alpha})"), "position", "cosine", &x, &cos)?;
            let comp: Vec<(String, Vec<f64>)> = interp::SERIES_NAMES
                .iter()
                .zip(&rep.series)
                .map(|(name, m)| (name.to_string(), (0..m.rows()).map(|p| m.get(p, 0)).collect()))
                .collect();
            let xs: Vec<f64> = (0..rep.series[0].rows()).map(|p| p as f64).collect();
            report::line_chart(&emit("crude_series.svg"), "Component 0 of each series", "position", "value", &xs, &comp)?;
        }
        Job::Circuits { heads, model_space } => {
            let mut t = Table::new(["layer", "head", "circuit", "frobenius", "trace", "rank", "effective_rank", "top_singular_share"]);
            std::fs::create_dir(bundle.path("matrices")).map_err(|e| CliError::Data(e.to_string()))?;
            let mut summaries = Vec::new();
            let mut by_layer: BTreeMap<usize, Vec<(String, Tensor)>> = BTreeMap::new();
            for &head in &heads {
                let c = interp::circuits(params, head)?;
                let (ov, qk) = if model_space { (c.ov_model, c.qk_model) } else { (c.ov_full, c.qk_full) };
                for (name, m) in [("ov", ov), ("qk", qk)] {
                    let s = interp::summarize(head, name, &m)?;
                    t.push(vec![
                        head.layer.to_string(),
                        head.head.to_string(),
                        name.into(),
                        num(s.frobenius),
                        num(s.trace),
                        s.rank.to_string(),
                        num(s.effective_rank),
                        num(s.top_singular_share),
                    ])?;
                    summaries.push(s);
                    write_matrix(&emit(&format!("matrices/L{}H{}_{name}.csv", head.layer, head.head)), &m)?;
                    by_layer.entry(head.layer).or_default().push((format!("L{}H{} {}", head.layer, head.head, name.to_uppercase()), m));
                }
            }
            t.write(&emit("circuits.csv"))?;
            report::write_json(&emit("circuits.json"), &json!({ "space": if model_space { "model" } else { "vocab" }, "summaries": summaries }))?;
            for (layer, panels) in by_layer {
                report::heatmap_grid(&emit(&format!("circuits_L{layer}.svg")), &format!("Layer {layer} circuits"), &panels)?;
            }
        }
    }
    Ok(files)
}
