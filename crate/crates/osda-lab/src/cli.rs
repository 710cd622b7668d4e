//! Argument definitions and the four subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use osda_core::data::{generate_task, OsdaTask, SynthConfig};
use osda_core::nn::ModelBundle;
use osda_core::optim::{LrSchedule, SgdConfig};
use osda_core::trainer::{train_observed, Ablations, Evaluation, GrlSchedule, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::fmt::{full, to_json, to_json_pretty};
use crate::predict::par_evaluate;
use crate::run::{self, Artifacts, RunManifest, RunWriter, Summary, TaskSummary};
use crate::table::{self, ClassCounts};

/// Rows per parallel prediction chunk.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Parser)]
#[command(name = "osda", version, about = "Open-set domain adaptation laboratory")]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic task as a feature table plus a task manifest.
    Generate(GenerateArgs),
    /// Pretrain and train on a task; writes the run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled task.
    Eval(EvalArgs),
    /// Train and evaluate over class-count settings and seeds.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub source_per_class: usize,
    #[arg(long, default_value_t = 100)]
    pub target_per_class: usize,
    /// Cluster standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub spread: f64,
    /// Distance between neighbouring cluster centres.
    #[arg(long, default_value_t = 4.0)]
    pub spacing: f64,
    /// Target rotation in degrees.
    #[arg(long, default_value_t = 25.0)]
    pub rotation: f64,
    /// Target translation per dimension, in units of the spread.
    #[arg(long, default_value_t = 0.5)]
    pub translation: f64,
    #[arg(long, default_value_t = 1.2)]
    pub spread_mult: f64,
    /// Identical source and target distributions.
    #[arg(long)]
    pub no_shift: bool,
}

impl SynthArgs {
    pub fn to_config(&self, seed: u64) -> SynthConfig {
        let cfg = SynthConfig {
            dim: self.dim,
            source_per_class: self.source_per_class,
            target_per_class: self.target_per_class,
            spread: self.spread,
            spacing: self.spacing,
            rotation_deg: self.rotation,
            translation: self.translation,
            spread_mult: self.spread_mult,
            seed,
        };
        if self.no_shift {
            cfg.without_shift()
        } else {
            cfg
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Threshold pairing weight, in [0.5, 1].
    #[arg(long, default_value_t = 0.5)]
    pub lambda1: f64,
    /// Fixed mixup ratio.
    #[arg(long, default_value_t = 0.5)]
    pub lambda2: f64,
    /// Beta concentration for `--beta-lambda2`.
    #[arg(long, default_value_t = 30.0)]
    pub r: f64,
    /// Number of CMMC classifiers.
    #[arg(long, default_value_t = 5)]
    pub m: usize,
    #[arg(long, default_value_t = 48)]
    pub batch_size: usize,
    /// Base learning rate.
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Learning-rate decay `gamma`.
    #[arg(long, default_value_t = 0.001)]
    pub gamma: f64,
    /// Learning-rate decay exponent.
    #[arg(long, default_value_t = 0.75)]
    pub beta_lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 200)]
    pub pre_iters: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub iters_per_epoch: usize,
    /// Hidden widths of the feature extractor.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 32])]
    pub hidden: Vec<usize>,
    /// Disable per-classifier input jitter.
    #[arg(long)]
    pub no_jitter: bool,
    /// Gradient-reversal coefficient.
    #[arg(long, default_value_t = 1.0)]
    pub grl_coeff: f64,
    /// Use the full reversal coefficient from the first step.
    #[arg(long)]
    pub no_grl_warmup: bool,
    #[arg(long)]
    pub no_adv_source_term: bool,
    #[arg(long)]
    pub no_gaux: bool,
    #[arg(long)]
    pub no_cmmc: bool,
    #[arg(long)]
    pub no_cmmc_h: bool,
    #[arg(long)]
    pub no_mixup: bool,
    #[arg(long)]
    pub beta_lambda2: bool,
    /// Let gradients flow through the adversarial sample weights.
    #[arg(long)]
    pub attached_weights: bool,
}

impl ConfigArgs {
    pub fn to_config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            r: self.r,
            m: self.m,
            batch_size: self.batch_size,
            lr: LrSchedule { base: self.lr, gamma: self.gamma, beta: self.beta_lr },
            sgd: SgdConfig { momentum: self.momentum, weight_decay: self.weight_decay, ..SgdConfig::default() },
            pre_iters: self.pre_iters,
            epochs: self.epochs,
            iters_per_epoch: self.iters_per_epoch,
            hidden: self.hidden.clone(),
            jitter: !self.no_jitter,
            grl: GrlSchedule { max_coeff: self.grl_coeff, warmup: !self.no_grl_warmup },
            ablations: Ablations {
                no_adv_source_term: self.no_adv_source_term,
                no_gaux: self.no_gaux,
                no_cmmc: self.no_cmmc,
                no_cmmc_h: self.no_cmmc_h,
                no_mixup: self.no_mixup,
                beta_lambda2: self.beta_lambda2,
                attached_weights: self.attached_weights,
            },
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_dir() -> PathBuf {
    std::env::var_os("OSDA_OUT_DIR").map_or_else(|| PathBuf::from("."), PathBuf::from)
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Number of shared classes.
    #[arg(long)]
    pub common: usize,
    /// Number of target classes, shared plus private.
    #[arg(long)]
    pub total: usize,
    #[arg(long)]
    pub seed: u64,
    /// Feature table path; defaults to `task.csv` under `$OSDA_OUT_DIR`.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub synth: SynthArgs,
}

/// Written next to a generated table, with extension `.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub tool: String,
    pub version: String,
    pub table: String,
    pub n_common: usize,
    pub n_total: usize,
    pub openness: f64,
    pub synth: SynthConfig,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(PathBuf, TaskManifest)> {
    ensure!(
        args.common >= 1 && args.common < args.total,
        "open-set tasks need 1 <= --common < --total (shared classes a strict subset), got {} and {}",
        args.common,
        args.total
    );
    let synth = args.synth.to_config(args.seed);
    let task = generate_task(&synth, args.common, args.total)?;
    let path = args.output.clone().unwrap_or_else(|| default_dir().join("task.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    table::save_task(&task, &path)?;
    let manifest = TaskManifest {
        tool: "osda".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        table: path.display().to_string(),
        n_common: task.n_common,
        n_total: task.n_total,
        openness: task.openness(),
        synth,
    };
    let mpath = path.with_extension("json");
    fs::write(&mpath, to_json_pretty(&manifest)? + "\n").with_context(|| format!("writing {}", mpath.display()))?;
    Ok((path, manifest))
}

#[derive(Debug, Clone, Args)]
pub struct TaskArgs {
    /// Feature table (`split,label,f1..fd`).
    #[arg(long)]
    pub task: PathBuf,
    /// Number of shared classes, when the source labels do not show all of them.
    #[arg(long)]
    pub common: Option<usize>,
    /// Number of target classes, when the target labels do not show all of them.
    #[arg(long)]
    pub total: Option<usize>,
}

impl TaskArgs {
    pub fn load(&self) -> Result<OsdaTask> {
        let counts = ClassCounts { n_common: self.common, n_total: self.total };
        table::load_feature_table(&self.task, counts).with_context(|| format!("loading {}", self.task.display()))
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub seed: u64,
    /// Run directory; defaults to `run-seed<seed>` under `$OSDA_OUT_DIR`.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Skip the per-epoch audit CSVs.
    #[arg(long)]
    pub no_audit: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub summary: Summary,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let task = args.task.load()?;
    let cfg = args.config.to_config(args.seed)?;
    let dir = args.out.clone().unwrap_or_else(|| default_dir().join(format!("run-seed{}", args.seed)));
    if task.n_source() < cfg.batch_size || task.n_target() < cfg.batch_size {
        log::warn!(
            "batch size {} exceeds a domain ({} source, {} target); batches wrap with repetition",
            cfg.batch_size,
            task.n_source(),
            task.n_target()
        );
    }
    let path_of = |name: &str| dir.join(name).display().to_string();
    let manifest = RunManifest {
        tool: "osda".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        task: TaskSummary::new(&args.task.task, &task),
        seed: args.seed,
        config: cfg.clone(),
        artifacts: Artifacts {
            checkpoint: path_of(run::CHECKPOINT),
            log: path_of(run::LOG),
            thresholds: path_of(run::THRESHOLDS),
            audit_dir: (!args.no_audit).then(|| path_of(run::AUDIT_DIR)),
        },
    };
    let mut writer = RunWriter::create(&dir, &manifest)?;
    let (bundle, log) = train_observed(&task, &cfg, &mut writer).context("training aborted")?;
    let fallbacks: usize = log.epochs.iter().map(|e| e.lambda2_fallbacks).sum();
    if fallbacks > 0 {
        log::warn!("Beta(omega r, h r) constraint failed for {fallbacks} gated samples; fixed lambda2 used");
    }
    let summary = Summary::new(&log, log.final_eval().copied());
    checkpoint::save(&bundle, &dir.join(run::CHECKPOINT))?;
    writer.finish(&summary, &log.thresholds)?;
    Ok(TrainOutcome { dir, summary })
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// Run directory written by `train`; supplies checkpoint and config.
    #[arg(long, conflicts_with_all = ["checkpoint", "seed"])]
    pub run: Option<PathBuf>,
    #[arg(long, requires = "seed")]
    pub checkpoint: Option<PathBuf>,
    /// Seed of the evaluation pairing stream, as used by `train`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed threshold instead of the self-tuned one.
    #[arg(long)]
    pub manual_h: Option<f64>,
    /// Also write the result to this JSON file.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Evaluation> {
    let task = args.task.load()?;
    let (bundle, cfg): (ModelBundle, TrainConfig) = match (&args.run, &args.checkpoint, args.seed) {
        (Some(dir), _, _) => {
            let manifest = RunManifest::load(&dir.join(run::MANIFEST))?;
            (checkpoint::load(&dir.join(run::CHECKPOINT))?, manifest.config)
        }
        (None, Some(path), Some(seed)) => (checkpoint::load(path)?, args.config.to_config(seed)?),
        _ => bail!("pass --run <dir>, or --checkpoint <file> with --seed"),
    };
    if let Some(h) = args.manual_h {
        ensure!((0.0..=1.0).contains(&h), "--manual-h must lie in [0, 1], got {h}");
    }
    let eval = par_evaluate(&task, &bundle, &cfg, args.manual_h, cfg.decision_rule(), EVAL_CHUNK)
        .context("checkpoint does not fit the task")?;
    if let Some(path) = &args.output {
        fs::write(path, to_json_pretty(&eval)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(eval)
}

/// `|C^S|:|C^T|`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassPair {
    pub common: usize,
    pub total: usize,
}

impl std::str::FromStr for ClassPair {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once(':').ok_or_else(|| format!("expected COMMON:TOTAL, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
        Ok(Self { common: parse(a)?, total: parse(b)? })
    }
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Class-count settings, e.g. `3:4,3:6,3:12`.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub pairs: Vec<ClassPair>,
    /// Seeds; each seeds both task generation and training.
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
    pub seeds: Vec<u64>,
    /// Result table; defaults to `sweep.csv` under `$OSDA_OUT_DIR`.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[command(flatten)]
    pub synth: SynthArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub pair: ClassPair,
    pub seed: u64,
    pub outcome: Result<(f64, Evaluation), String>,
}

/// Mean over the successful cells of one setting.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub pair: ClassPair,
    pub ok: usize,
    pub failed: usize,
    pub final_h: f64,
    pub os: f64,
    pub os_star: f64,
    pub unk: f64,
    pub h_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
}

fn run_cell(args: &SweepArgs, pair: ClassPair, seed: u64) -> Result<(f64, Evaluation)> {
    let task = generate_task(&args.synth.to_config(seed), pair.common, pair.total)?;
    let cfg = args.config.to_config(seed)?;
    let (_, log) = train_observed(&task, &cfg, &mut ())?;
    let h = log.final_h().context("no epochs were run")?;
    let eval = log.final_eval().copied().context("no evaluation recorded")?;
    Ok((h, eval))
}

pub fn sweep(args: &SweepArgs) -> Result<SweepTable> {
    ensure!(!args.pairs.is_empty(), "empty sweep: pass at least one --pairs entry");
    ensure!(!args.seeds.is_empty(), "empty sweep: pass at least one seed");
    let jobs: Vec<(ClassPair, u64)> = args.pairs.iter().flat_map(|&p| args.seeds.iter().map(move |&s| (p, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build()?;
    let cells: Vec<CellResult> = pool.install(|| {
        jobs.par_iter()
            .map(|&(pair, seed)| {
                let outcome = run_cell(args, pair, seed).map_err(|e| format!("{e:#}"));
                if let Err(e) = &outcome {
                    log::warn!("cell {}:{} seed {seed} failed: {e}", pair.common, pair.total);
                }
                CellResult { pair, seed, outcome }
            })
            .collect()
    });
    let aggregates = args
        .pairs
        .iter()
        .map(|&pair| {
            let ok: Vec<&(f64, Evaluation)> =
                cells.iter().filter(|c| c.pair == pair).filter_map(|c| c.outcome.as_ref().ok()).collect();
            let n = ok.len() as f64;
            let mean = |f: &dyn Fn(&(f64, Evaluation)) -> f64| if ok.is_empty() { f64::NAN } else { ok.iter().map(|c| f(c)).sum::<f64>() / n };
            Aggregate {
                pair,
                ok: ok.len(),
                failed: cells.iter().filter(|c| c.pair == pair && c.outcome.is_err()).count(),
                final_h: mean(&|c| c.0),
                os: mean(&|c| c.1.metrics.os),
                os_star: mean(&|c| c.1.metrics.os_star),
                unk: mean(&|c| c.1.metrics.unk),
                h_score: mean(&|c| c.1.metrics.h_score),
            }
        })
        .collect();
    Ok(SweepTable { cells, aggregates })
}

pub const SWEEP_HEADER: [&str; 12] =
    ["row", "common", "total", "openness", "seed", "status", "final_h", "os", "os_star", "unk", "h_score", "error"];

pub fn write_sweep(path: &Path, table: &SweepTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(SWEEP_HEADER)?;
    let o = |p: ClassPair| full(osda_core::data::openness(p.common, p.total));
    let num = |v: f64| if v.is_finite() { full(v) } else { String::new() };
    for c in &table.cells {
        let (status, vals, err) = match &c.outcome {
            Ok((h, e)) => ("ok", [*h, e.metrics.os, e.metrics.os_star, e.metrics.unk, e.metrics.h_score].map(num), String::new()),
            Err(e) => ("failed", Default::default(), e.clone()),
        };
        let mut row = vec!["cell".into(), c.pair.common.to_string(), c.pair.total.to_string(), o(c.pair), c.seed.to_string(), status.into()];
        row.extend(vals);
        row.push(err);
        w.write_record(&row)?;
    }
    for a in &table.aggregates {
        let status = if a.ok == 0 { "failed" } else { "ok" };
        let mut row = vec!["mean".into(), a.pair.common.to_string(), a.pair.total.to_string(), o(a.pair), String::new(), status.into()];
        row.extend([a.final_h, a.os, a.os_star, a.unk, a.h_score].map(num));
        row.push(if a.failed > 0 { format!("{} of {} cells failed", a.failed, a.failed + a.ok) } else { String::new() });
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(PathBuf, SweepTable)> {
    let table = sweep(args)?;
    let path = args.output.clone().unwrap_or_else(|| default_dir().join("sweep.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_sweep(&path, &table)?;
    Ok((path, table))
}

/// Runs one parsed command line and prints its machine-readable result.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => {
            let (path, m) = cmd_generate(a)?;
            println!("{}", to_json(&serde_json::json!({"table": path, "n_common": m.n_common, "n_total": m.n_total, "openness": m.openness}))?);
        }
        Command::Train(a) => {
            let out = cmd_train(a)?;
            println!("{}", to_json(&serde_json::json!({"run": out.dir, "summary": out.summary}))?);
        }
        Command::Eval(a) => println!("{}", to_json(&cmd_eval(a)?)?),
        Command::Sweep(a) => {
            let (path, table) = cmd_sweep(a)?;
            let failed = table.cells.iter().filter(|c| c.outcome.is_err()).count();
            println!("{}", to_json(&serde_json::json!({"table": path, "cells": table.cells.len(), "failed": failed}))?);
        }
    }
    Ok(())
}
