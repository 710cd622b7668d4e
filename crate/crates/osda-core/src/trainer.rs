//! Pretraining, the alternating DMC / threshold / CMMC epochs, the test-time
//! decision rule and evaluation.
//!
//! The learning-rate schedule advances once per optimizer step across all
//! phases: pretraining, DMC and CMMC steps share one counter.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Tensor;
use crate::cmmc::{self, CmmcBatch, CmmcContext, CriteriaScores, Lambda2Policy};
use crate::data::{DomainBatches, OsdaTask};
use crate::dmc::{self, AdvWeights, DmcBatchLoss, DmcOptions};
use crate::metrics::{compute_metrics, Metrics, Prediction};
use crate::nn::{argmax, JitterBank, ModelBundle, DEFAULT_HIDDEN};
use crate::optim::{LrSchedule, OptimizerState, SgdConfig};
use crate::rng::{self, Rng};
use crate::threshold::{check_lambda1, compute_threshold, ThresholdEntry, ThresholdSchedule};
use crate::{Error, Result};

/// Structural switches for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Ablations {
    pub no_adv_source_term: bool,
    /// `P_common = P1`; `G^aux` is neither used nor trained.
    pub no_gaux: bool,
    /// No CMMC training; predict by comparing `G^C` confidence with `h`.
    pub no_cmmc: bool,
    /// No CMMC training; predict by the argmax of `G^C` over all outputs.
    pub no_cmmc_h: bool,
    /// `lambda2 = 0`: CMMC trains on the paired source samples only.
    pub no_mixup: bool,
    pub beta_lambda2: bool,
    pub attached_weights: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub r: f64,
    pub m: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub sgd: SgdConfig,
    pub pre_iters: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub hidden: Vec<usize>,
    pub jitter: bool,
    pub grl: GrlSchedule,
    pub ablations: Ablations,
    pub seed: u64,
}

/// Gradient-reversal coefficient over the training phase.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GrlSchedule {
    pub max_coeff: f64,
    /// Ramp `max_coeff * (2 / (1 + exp(-10 p)) - 1)` over training progress `p`.
    pub warmup: bool,
}

impl Default for GrlSchedule {
    fn default() -> Self {
        Self { max_coeff: 1.0, warmup: true }
    }
}

impl GrlSchedule {
    /// Coefficient after a fraction `progress ∈ (0, 1]` of DMC steps.
    pub fn coeff(&self, progress: f64) -> f64 {
        if self.warmup {
            self.max_coeff * (2.0 / (1.0 + libm::exp(-10.0 * progress)) - 1.0)
        } else {
            self.max_coeff
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            r: 30.0,
            m: 5,
            batch_size: 48,
            lr: LrSchedule::default(),
            sgd: SgdConfig::default(),
            pre_iters: 200,
            epochs: 30,
            iters_per_epoch: 50,
            hidden: DEFAULT_HIDDEN.to_vec(),
            jitter: true,
            grl: GrlSchedule::default(),
            ablations: Ablations::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda1(self.lambda1)?;
        let bad = |msg: alloc::string::String| Err(Error::InvalidConfig(msg));
        if !(0.0..=1.0).contains(&self.lambda2) {
            return bad(format!("lambda2 must lie in [0, 1], got {}", self.lambda2));
        }
        if !(self.r > 0.0) {
            return bad(format!("r must be positive, got {}", self.r));
        }
        if self.m < 2 {
            return bad(format!("m must be >= 2, got {}", self.m));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be >= 2, got {}", self.batch_size));
        }
        if self.pre_iters == 0 || self.iters_per_epoch == 0 {
            return bad("iteration counts must be >= 1".into());
        }
        if !(self.lr.base > 0.0 && self.lr.gamma >= 0.0 && self.lr.beta >= 0.0) {
            return bad(format!("invalid learning-rate schedule {:?}", self.lr));
        }
        if !(0.0..1.0).contains(&self.sgd.momentum) || !(self.sgd.weight_decay >= 0.0) {
            return bad(format!("invalid optimizer settings {:?}", self.sgd));
        }
        if !(self.grl.max_coeff > 0.0) {
            return bad(format!("gradient reversal coefficient must be positive, got {}", self.grl.max_coeff));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths must be non-empty and positive, got {:?}", self.hidden));
        }
        Ok(())
    }

    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend_from_slice(&self.hidden);
        w
    }

    pub fn dmc_options(&self) -> DmcOptions {
        DmcOptions {
            adv_source_term: !self.ablations.no_adv_source_term,
            use_gaux: !self.ablations.no_gaux,
            weights: if self.ablations.attached_weights { AdvWeights::Attached } else { AdvWeights::Detached },
            ..DmcOptions::default()
        }
    }

    pub fn lambda2_policy(&self) -> Lambda2Policy {
        if self.ablations.no_mixup {
            Lambda2Policy::Fixed(0.0)
        } else if self.ablations.beta_lambda2 {
            Lambda2Policy::Beta { r: self.r, fallback: self.lambda2 }
        } else {
            Lambda2Policy::Fixed(self.lambda2)
        }
    }

    pub fn trains_cmmc(&self) -> bool {
        !(self.ablations.no_cmmc || self.ablations.no_cmmc_h)
    }

    pub fn decision_rule(&self) -> DecisionRule {
        if self.ablations.no_cmmc_h {
            DecisionRule::GcMaxConfidence
        } else if self.ablations.no_cmmc {
            DecisionRule::GcThreshold
        } else {
            DecisionRule::Commonness
        }
    }
}

/// How a target sample is assigned to a common class or rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionRule {
    /// Unknown when `omega < h`, else the `G^C` argmax over common classes.
    Commonness,
    /// Unknown when the largest common-class `G^C` probability is below `h`.
    GcThreshold,
    /// `G^C` argmax over all outputs; the last output means unknown.
    GcMaxConfidence,
    /// Mean of the CMMC classifiers; unknown when its maximum is below `h`.
    CmmcConfidence,
}

/// Per-target row of the epoch audit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditRow {
    pub target: usize,
    pub scores: CriteriaScores,
    pub pseudo: usize,
    pub gated: bool,
    /// Mixing ratio a gated sample would receive; `None` when not gated.
    pub lambda2: Option<f64>,
}

/// Mean batch losses and evaluation of one completed epoch.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub h: f64,
    pub threshold_pairs: usize,
    pub source_ce: f64,
    pub source_bce: f64,
    pub adv: f64,
    pub aux_disc: f64,
    /// Mean over heads and steps that produced a loss; `None` if none did.
    pub cmmc: Option<f64>,
    pub mixup_pairs: usize,
    pub lambda2_fallbacks: usize,
    pub lr: f64,
    pub eval: Option<Evaluation>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub pretrain_loss: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub thresholds: ThresholdSchedule,
}

impl TrainLog {
    pub fn final_h(&self) -> Option<f64> {
        self.thresholds.last()
    }

    pub fn final_eval(&self) -> Option<&Evaluation> {
        self.epochs.last().and_then(|e| e.eval.as_ref())
    }
}

/// Receives each epoch as soon as it completes.
pub trait EpochObserver {
    fn wants_audit(&self) -> bool {
        false
    }

    fn on_epoch(&mut self, record: &EpochRecord, audit: &[AuditRow]);
}

impl EpochObserver for () {
    fn on_epoch(&mut self, _: &EpochRecord, _: &[AuditRow]) {}
}

/// Model, optimizer and schedule position carried between phases.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub bundle: ModelBundle,
    pub opt: OptimizerState,
    /// Optimizer steps taken so far; drives the learning rate.
    pub iteration: u64,
}

impl RunState {
    pub fn fresh(task: &OsdaTask, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        task.validate()?;
        let bundle = ModelBundle::seeded(&cfg.widths(task.dim()), task.n_common, cfg.m, cfg.seed)?;
        let opt = OptimizerState::new(&bundle);
        Ok(Self { bundle, opt, iteration: 0 })
    }

    fn lr(&self, cfg: &TrainConfig) -> f64 {
        cfg.lr.lr_at(self.iteration)
    }
}

fn diverged(what: &'static str, epoch: usize, iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } | Error::NonFiniteGrad { .. } => Error::Diverged { what, epoch, iteration },
        other => other,
    }
}

/// Per-classifier batch streams, jitter and pairing streams.
struct ClassifierStreams {
    batches: Vec<DomainBatches>,
    jitter: JitterBank,
    pairing: Vec<Rng>,
}

impl ClassifierStreams {
    fn new(task: &OsdaTask, cfg: &TrainConfig) -> Result<Self> {
        let batches = (0..cfg.m as u64)
            .map(|k| DomainBatches::new(task, cfg.batch_size, cfg.seed, rng::stream::CLASSIFIER_BATCHES + k))
            .collect::<Result<_>>()?;
        Ok(Self {
            batches,
            jitter: JitterBank::new(cfg.seed, cfg.m, cfg.jitter),
            pairing: (0..cfg.m as u64).map(|k| rng::stream(cfg.seed, rng::stream::PAIRING + k)).collect(),
        })
    }
}

/// Source-only warm-up of `F` and the CMMC classifiers.
///
/// Each classifier draws its own jittered source batch; the summed
/// cross-entropy updates `F` and every `G^M_k`. `G^C` and `G^aux` are untouched.
pub fn pretrain(task: &OsdaTask, cfg: &TrainConfig) -> Result<(RunState, Vec<f64>)> {
    let mut state = RunState::fresh(task, cfg)?;
    let mut streams = ClassifierStreams::new(task, cfg)?;
    let losses = pretrain_phase(task, cfg, &mut state, &mut streams)?;
    Ok((state, losses))
}

fn pretrain_phase(
    task: &OsdaTask,
    cfg: &TrainConfig,
    state: &mut RunState,
    streams: &mut ClassifierStreams,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(cfg.pre_iters);
    for it in 0..cfg.pre_iters {
        let batches: Vec<_> = (0..cfg.m)
            .map(|k| {
                let idx = streams.batches[k].source.next_batch();
                let mut b = task.source_batch(&idx);
                b.x = streams.jitter.apply(k, &b.x);
                b
            })
            .collect();
        let lr = state.lr(cfg);
        let per_head = cmmc::pretrain_step(&mut state.bundle, &mut state.opt, &batches, lr, &cfg.sgd)
            .map_err(diverged("pretraining loss", 0, it))?;
        state.iteration += 1;
        let mean = per_head.iter().sum::<f64>() / per_head.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { what: "pretraining loss", epoch: 0, iteration: it });
        }
        losses.push(mean);
    }
    Ok(losses)
}

/// Full run: pretraining followed by `cfg.epochs` training epochs.
pub fn train(task: &OsdaTask, cfg: &TrainConfig) -> Result<(ModelBundle, TrainLog)> {
    train_observed(task, cfg, &mut ())
}

pub fn train_observed(task: &OsdaTask, cfg: &TrainConfig, observer: &mut dyn EpochObserver) -> Result<(ModelBundle, TrainLog)> {
    let mut state = RunState::fresh(task, cfg)?;
    let mut streams = ClassifierStreams::new(task, cfg)?;
    let mut log = TrainLog { pretrain_loss: pretrain_phase(task, cfg, &mut state, &mut streams)?, ..TrainLog::default() };
    training_phase(task, cfg, &mut state, &mut streams, &mut log, observer)?;
    Ok((state.bundle, log))
}

fn training_phase(
    task: &OsdaTask,
    cfg: &TrainConfig,
    state: &mut RunState,
    streams: &mut ClassifierStreams,
    log: &mut TrainLog,
    observer: &mut dyn EpochObserver,
) -> Result<()> {
    let mut dmc_opts = cfg.dmc_options();
    let dmc_total = (cfg.epochs * cfg.iters_per_epoch) as f64;
    let policy = cfg.lambda2_policy();
    let mut dmc_batches = DomainBatches::new(task, cfg.batch_size, cfg.seed, rng::stream::DMC_BATCHES)?;
    let labeled = task.has_target_labels();

    for epoch in 1..=cfg.epochs {
        let mut sum = DmcBatchLoss::default();
        for it in 0..cfg.iters_per_epoch {
            let (src, tgt) = dmc_batches.next_batches(task);
            let done = ((epoch - 1) * cfg.iters_per_epoch + it + 1) as f64;
            dmc_opts.grl_coeff = cfg.grl.coeff(done / dmc_total);
            let lr = state.lr(cfg);
            let l = dmc::dmc_step(&mut state.bundle, &mut state.opt, &src, &tgt, &dmc_opts, lr, &cfg.sgd)
                .map_err(diverged("dmc loss", epoch, it))?;
            state.iteration += 1;
            if ![l.source_ce, l.source_bce, l.adv, l.aux_disc].iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged { what: "dmc loss", epoch, iteration: it });
            }
            sum.source_ce += l.source_ce;
            sum.source_bce += l.source_bce;
            sum.adv += l.adv;
            sum.aux_disc += l.aux_disc;
        }

        let z = state.bundle.features(&task.target_x)?;
        let gc = state.bundle.gc_probs(&z)?;
        let th = compute_threshold(&gc, task.n_common, cfg.lambda1, &mut rng::stream(cfg.seed, rng::stream::THRESHOLD + epoch as u64))?;
        let h = th.h;
        log.thresholds.push(ThresholdEntry { epoch, h, pairs: th.pairs, lambda1: cfg.lambda1 });

        let audit = if observer.wants_audit() {
            let pseudo = cmmc::pseudo_labels(&gc, task.n_common);
            let scores = cmmc::commonness_from_features(&state.bundle, &z)?;
            scores
                .into_iter()
                .zip(pseudo)
                .enumerate()
                .map(|(target, (s, pseudo))| {
                    let gated = s.omega >= h;
                    AuditRow { target, scores: s, pseudo, gated, lambda2: gated.then(|| policy.expected(s.omega, h)) }
                })
                .collect()
        } else {
            Vec::new()
        };

        let (mut cmmc_sum, mut cmmc_n, mut pairs, mut fallbacks) = (0.0, 0usize, 0usize, 0usize);
        if cfg.trains_cmmc() {
            for it in 0..cfg.iters_per_epoch {
                let batches: Vec<CmmcBatch> = streams
                    .batches
                    .iter_mut()
                    .map(|b| {
                        let (source, target) = b.next_batches(task);
                        CmmcBatch { source, target }
                    })
                    .collect();
                let mut ctx = CmmcContext {
                    h,
                    policy,
                    jitter: &mut streams.jitter,
                    pair_rngs: &mut streams.pairing,
                    lr: state.lr(cfg),
                    sgd: cfg.sgd,
                };
                let steps = cmmc::cmmc_step(&mut state.bundle, &mut state.opt, &batches, &mut ctx)
                    .map_err(diverged("cmmc loss", epoch, it))?;
                state.iteration += 1;
                for s in steps {
                    pairs += s.pairs;
                    fallbacks += s.fallbacks;
                    if let Some(l) = s.loss {
                        if !l.is_finite() {
                            return Err(Error::Diverged { what: "cmmc loss", epoch, iteration: it });
                        }
                        cmmc_sum += l;
                        cmmc_n += 1;
                    }
                }
            }
        }

        let eval = if labeled { Some(evaluate(task, &state.bundle, cfg, None)?) } else { None };
        let n = cfg.iters_per_epoch as f64;
        let record = EpochRecord {
            epoch,
            h,
            threshold_pairs: th.pairs,
            source_ce: sum.source_ce / n,
            source_bce: sum.source_bce / n,
            adv: sum.adv / n,
            aux_disc: sum.aux_disc / n,
            cmmc: (cmmc_n > 0).then(|| cmmc_sum / cmmc_n as f64),
            mixup_pairs: pairs,
            lambda2_fallbacks: fallbacks,
            lr: state.lr(cfg),
            eval,
        };
        observer.on_epoch(&record, &audit);
        log.epochs.push(record);
    }
    Ok(())
}

/// Labels for each row of `x` under `rule` and threshold `h`.
pub fn predict(bundle: &ModelBundle, x: &Tensor, h: f64, rule: DecisionRule) -> Result<Vec<Prediction>> {
    let k = bundle.n_common;
    let z = bundle.features(x)?;
    let gc = bundle.gc_probs(&z)?;
    let known = |c: usize| Prediction::Known(c);
    Ok(match rule {
        DecisionRule::Commonness => {
            let scores = cmmc::commonness_from_features(bundle, &z)?;
            gc.row_iter()
                .zip(scores)
                .map(|(r, s)| if s.omega < h { Prediction::Unknown } else { known(argmax(&r[..k])) })
                .collect()
        }
        DecisionRule::GcThreshold => gc
            .row_iter()
            .map(|r| {
                let c = argmax(&r[..k]);
                if r[c] < h { Prediction::Unknown } else { known(c) }
            })
            .collect(),
        DecisionRule::GcMaxConfidence => gc
            .row_iter()
            .map(|r| {
                let c = argmax(r);
                if c == k { Prediction::Unknown } else { known(c) }
            })
            .collect(),
        DecisionRule::CmmcConfidence => {
            let heads = bundle.gm_probs_all(&z)?;
            let m = heads.len() as f64;
            (0..x.rows())
                .map(|i| {
                    let mean: Vec<f64> = (0..k).map(|c| heads.iter().map(|p| p.row(i)[c]).sum::<f64>() / m).collect();
                    let c = argmax(&mean);
                    if mean[c] < h { Prediction::Unknown } else { known(c) }
                })
                .collect()
        }
    })
}

/// Threshold over an evaluation set, paired with the run seed's eval stream.
pub fn eval_threshold(bundle: &ModelBundle, x: &Tensor, cfg: &TrainConfig) -> Result<f64> {
    let gc = bundle.gc_probs(&bundle.features(x)?)?;
    let mut rng = rng::stream(cfg.seed, rng::stream::EVAL_PAIRING);
    Ok(compute_threshold(&gc, bundle.n_common, cfg.lambda1, &mut rng)?.h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Evaluation {
    pub metrics: Metrics,
    pub h: f64,
    /// True when `h` was supplied instead of computed.
    pub manual_h: bool,
}

/// Metrics on the task's labeled targets. Without `manual_h`, `h` is
/// recomputed over the whole target set.
pub fn evaluate(task: &OsdaTask, bundle: &ModelBundle, cfg: &TrainConfig, manual_h: Option<f64>) -> Result<Evaluation> {
    evaluate_with_rule(task, bundle, cfg, manual_h, cfg.decision_rule())
}

pub fn evaluate_with_rule(
    task: &OsdaTask,
    bundle: &ModelBundle,
    cfg: &TrainConfig,
    manual_h: Option<f64>,
    rule: DecisionRule,
) -> Result<Evaluation> {
    if !task.has_target_labels() {
        return Err(Error::NoLabeledTargets);
    }
    if bundle.n_common != task.n_common || bundle.input_dim() != task.dim() {
        return Err(Error::Shape {
            op: "evaluate",
            detail: format!(
                "model has {} common classes over {} inputs, task has {} over {}",
                bundle.n_common,
                bundle.input_dim(),
                task.n_common,
                task.dim()
            ),
        });
    }
    let h = match manual_h {
        Some(h) => h,
        None => eval_threshold(bundle, &task.target_x, cfg)?,
    };
    let preds = predict(bundle, &task.target_x, h, rule)?;
    let metrics = compute_metrics(&task.target_y, &preds, task.n_common)?;
    Ok(Evaluation { metrics, h, manual_h: manual_h.is_some() })
}
