//! The `recurlens` command line.
//!
//! Exit codes: 0 success, 1 I/O or data error, 2 usage error, 3 training divergence.

mod analyze;
mod bundle;
mod config;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::error::Error;
use crate::interp::report::{self, Table};
use crate::model::{self, ModelConfig};
use crate::recurrence::{generate_dataset, read_jsonl, write_jsonl, SequenceClass, MAX_LEN, MIN_LEN};
use crate::training::{self, TrainConfig, Trainer};

pub use analyze::AnalyzeArgs;
pub use bundle::{sha256_file, Bundle, FileEntry, Manifest};
pub use config::{KvFile, Resolver, SEED_ENV};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Data(_) => 1,
            Self::Usage(_) => 2,
            Self::Diverged(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Data(m) => write!(f, "error: {m}"),
            Self::Diverged(m) => write!(f, "diverged: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } => Self::Diverged(e.to_string()),
            Error::Argument(_) | Error::ContextLength { .. } => Self::Usage(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "recurlens", version, about = "Train a transformer on affine recurrences and analyse its circuits")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a JSONL dataset of normalized recurrence samples.
    Gen(GenArgs),
    /// Train a model; writes model.ckpt, loss.csv, loss.svg and manifest.json.
    Train(TrainArgs),
    /// Masked MSE of a checkpoint on a dataset; writes eval.csv and eval.json.
    Eval(EvalArgs),
    /// Run one analysis on a checkpoint (folded unless --no-fold).
    Analyze(AnalyzeArgs),
}

/// Options shared by every command.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Random seed. Falls back to the config file, then RECURLENS_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat `key = value` file; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Vector dimension D (the model's d_vocab).
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Output JSONL file; must not exist.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Paper,
    Desk,
    Tiny,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Evaluate every N steps (0 disables); the last step is always evaluated.
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    /// Output directory; must not exist.
    #[arg(long)]
    pub out: PathBuf,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// JSONL dataset written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; must not exist. Without it only the MSE is printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn preset_config(preset: Preset, seed: u64) -> TrainConfig {
    match preset {
        Preset::Paper => TrainConfig::paper(seed),
        Preset::Desk => TrainConfig::desk(seed),
        Preset::Tiny => TrainConfig::tiny(seed),
    }
}

fn check_len_range(min_len: usize, max_len: usize) -> CliResult<()> {
    if min_len < MIN_LEN || max_len > MAX_LEN || min_len > max_len {
        return Err(CliError::Usage(format!(
            "need {MIN_LEN} <= min-len <= max-len <= {MAX_LEN}, got {min_len}..{max_len}"
        )));
    }
    Ok(())
}

fn cmd_gen(args: &GenArgs) -> CliResult<()> {
    let mut r = Resolver::new(KvFile::load(args.common.config.as_deref())?);
    let seed = r.seed(args.common.seed)?;
    let dim = r.or("dim", args.dim, ModelConfig::paper().d_vocab)?;
    let count = r.or("count", args.count, 1000)?;
    let min_len = r.or("min_len", args.min_len, MIN_LEN)?;
    let max_len = r.or("max_len", args.max_len, MAX_LEN)?;
    r.finish()?;
    if dim == 0 {
        return Err(CliError::Usage("--dim must be at least 1".into()));
    }
    if count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    check_len_range(min_len, max_len)?;
    if args.out.exists() {
        return Err(CliError::Data(format!("{} already exists", args.out.display())));
    }
    let records = generate_dataset(dim, count, min_len, max_len, seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::Data(e.to_string()))?;
    }
    write_jsonl(&args.out, &records)?;

    let mut counts: BTreeMap<&str, usize> = SequenceClass::ALL.iter().map(|c| (c.name(), 0)).collect();
    for rec in &records {
        *counts.entry(crate::recurrence::classify(rec.c).name()).or_default() += 1;
    }
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "wrote {count} samples (dim {dim}, lengths {min_len}..={max_len}, seed {seed}) to {}", args.out.display());
    for (name, n) in &counts {
        let _ = writeln!(out, "  {name:<12} {n:>7} ({:.1}%)", 100.0 * *n as f64 / count as f64);
    }
    Ok(())
}

fn resolve_train(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut r = Resolver::new(KvFile::load(args.common.config.as_deref())?);
    let seed = r.seed(args.common.seed)?;
    let base = preset_config(args.preset, seed);
    let cfg = TrainConfig {
        steps: r.or("steps", args.steps, base.steps)?,
        batch_size: r.or("batch_size", args.batch_size, base.batch_size)?,
        lr: r.or("lr", args.lr, base.lr)?,
        weight_decay: r.or("weight_decay", args.weight_decay, base.weight_decay)?,
        min_len: r.or("min_len", args.min_len, base.min_len)?,
        max_len: r.or("max_len", args.max_len, base.max_len)?,
        eval_every: r.or("eval_every", args.eval_every, base.eval_every)?,
        eval_samples: r.or("eval_samples", args.eval_samples, base.eval_samples)?,
        seed,
        model: base.model,
    };
    r.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let cfg = resolve_train(args)?;
    let config_json = serde_json::to_value(cfg).map_err(|e| CliError::Data(e.to_string()))?;
    if args.dry_run {
        println!("{}", serde_json::to_string_pretty(&config_json).map_err(|e| CliError::Data(e.to_string()))?);
        return Ok(());
    }
    let mut bundle = Bundle::create(&args.out, "train", cfg.seed, config_json)?;
    let mut trainer = Trainer::new(cfg)?;
    eprintln!(
        "training {} parameters for {} steps (batch {}, lr {}, wd {}, seed {})",
        trainer.params.num_parameters(),
        cfg.steps,
        cfg.batch_size,
        cfg.lr,
        cfg.weight_decay,
        cfg.seed
    );
    let start = std::time::Instant::now();
    let outcome = trainer.run(|row| {
        if let Some(e) = row.eval_mse {
            eprintln!(
                "step {:>7}  train {:.6}  eval {:.6}  ({:.0}s)",
                row.step,
                row.train_mse,
                e,
                start.elapsed().as_secs_f64()
            );
        }
    });
    trainer.trace.save_csv(&bundle.path("loss.csv"))?;
    bundle.record("loss.csv")?;
    if !trainer.trace.rows.is_empty() {
        plot_loss(&trainer.trace, &bundle.path("loss.svg"))?;
        bundle.record("loss.svg")?;
    }
    if let Err(e) = outcome {
        bundle.finish()?;
        return Err(e.into());
    }
    model::save(&trainer.params, &bundle.path("model.ckpt"))?;
    bundle.record("model.ckpt")?;
    let dir = bundle.finish()?;
    let last = trainer.trace.last().expect("at least one step");
    match trainer.trace.last_eval() {
        Some(e) => println!("final eval MSE {e:.6} (train {:.6}) -> {}", last.train_mse, dir.display()),
        None => println!("final train MSE {:.6} -> {}", last.train_mse, dir.display()),
    }
    Ok(())
}

fn plot_loss(trace: &training::LossTrace, path: &Path) -> CliResult<()> {
    let x: Vec<f64> = trace.rows.iter().map(|r| r.step as f64).collect();
    let log = |v: f64| if v > 0.0 { v.log10() } else { f64::NAN };
    let mut series = vec![("train".to_string(), trace.rows.iter().map(|r| log(r.train_mse)).collect::<Vec<_>>())];
    let evals: Vec<(f64, f64)> =
        trace.rows.iter().filter_map(|r| r.eval_mse.map(|e| (r.step as f64, log(e)))).collect();
    if evals.is_empty() {
        report::line_chart(path, "Loss", "step", "log10 MSE", &x, &series)?;
        return Ok(());
    }
    // The eval series is sparse; draw it on its own x grid by carrying values forward.
    let mut eval_full = Vec::with_capacity(x.len());
    let mut it = evals.iter().peekable();
    let mut current = f64::NAN;
    for &step in &x {
        while let Some(&&(s, v)) = it.peek() {
            if s <= step {
                current = v;
                it.next();
            } else {
                break;
            }
        }
        eval_full.push(current);
    }
    series.push(("eval".to_string(), eval_full));
    report::line_chart(path, "Loss", "step", "log10 MSE", &x, &series)?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let mut r = Resolver::new(KvFile::load(args.common.config.as_deref())?);
    let seed = r.seed(args.common.seed)?;
    r.finish()?;
    let params = model::load(&args.ckpt)?;
    let samples = read_jsonl(&args.data)?;
    if let Some(s) = samples.iter().find(|s| s.dim() != params.config.d_vocab) {
        return Err(CliError::Data(format!(
            "dataset dimension {} does not match model d_vocab {}",
            s.dim(),
            params.config.d_vocab
        )));
    }
    let losses = training::sample_losses(&params, &samples)?;
    let mse = losses.iter().sum::<f64>() / losses.len() as f64;
    println!("masked MSE {mse} over {} samples", samples.len());
    if let Some(out) = &args.out {
        let mut bundle = Bundle::create(
            out,
            "eval",
            seed,
            json!({ "ckpt": args.ckpt.display().to_string(), "data": args.data.display().to_string() }),
        )?;
        bundle.add_input(&args.ckpt)?;
        bundle.add_input(&args.data)?;
        let mut t = Table::new(["sample", "length", "class", "mse"]);
        for (i, (s, l)) in samples.iter().zip(&losses).enumerate() {
            t.push(vec![i.to_string(), s.len().to_string(), s.class().name().into(), report::num(*l)])?;
        }
        t.write(&bundle.path("eval.csv"))?;
        bundle.record("eval.csv")?;
        report::write_json(&bundle.path("eval.json"), &json!({ "mse": mse, "samples": samples.len() }))?;
        bundle.record("eval.json")?;
        bundle.finish()?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => analyze::run(a),
    }
}

/// Parses `std::env::args`, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
