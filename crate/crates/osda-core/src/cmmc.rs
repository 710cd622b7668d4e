//! Commonness scoring across the `m` classifiers, pseudo-label gated
//! cross-domain mixup and the CMMC training objective.
//!
//! The score of a target sample is
//! `omega = ((1 - ent) + (1 - cons) + conf) / 3` where `ent` is the mean
//! entropy normalized by `ln |C^S|`, `cons` the mean squared deviation from
//! the classifier average, and `conf` the mean per-classifier maximum.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Beta, Distribution};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::LabeledBatch;
use crate::dmc::cross_entropy;
use crate::nn::{argmax, BoundFeatures, BoundHead, JitterBank, ModelBundle};
use crate::optim::{step_group, OptimizerState, SgdConfig};
use crate::rng::Rng;
use crate::{Error, Result};

fn check_probe(probe: &[&[f64]]) -> Result<usize> {
    let first = probe.first().ok_or(Error::EmptyBatch("classifier outputs"))?;
    let c = first.len();
    if probe.iter().any(|p| p.len() != c) {
        return Err(Error::Shape { op: "criteria", detail: "classifier outputs differ in length".into() });
    }
    Ok(c)
}

/// Mean Shannon entropy of the `m` vectors divided by `ln |C^S|`.
pub fn criteria_entropy(probe: &[&[f64]]) -> Result<f64> {
    let c = check_probe(probe)?;
    if c < 2 {
        return Err(Error::InvalidArgument(format!("entropy needs at least 2 classes, got {c}")));
    }
    let total: f64 = probe
        .iter()
        .map(|p| -p.iter().filter(|&&v| v > 0.0).map(|&v| v * libm::log(v)).sum::<f64>())
        .sum();
    Ok(total / probe.len() as f64 / libm::log(c as f64))
}

/// `1 / (m |C^S|) * sum_k sum_c (p_c^(k) - mean_k p_c)^2`
pub fn criteria_consistency(probe: &[&[f64]]) -> Result<f64> {
    let c = check_probe(probe)?;
    let m = probe.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("consistency needs at least 2 classifiers, got {m}")));
    }
    let mut total = 0.0;
    for j in 0..c {
        let mean = probe.iter().map(|p| p[j]).sum::<f64>() / m as f64;
        total += probe.iter().map(|p| (p[j] - mean) * (p[j] - mean)).sum::<f64>();
    }
    Ok(total / (m * c) as f64)
}

/// Mean over classifiers of each one's largest probability.
pub fn criteria_confidence(probe: &[&[f64]]) -> Result<f64> {
    check_probe(probe)?;
    let total: f64 = probe.iter().map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum();
    Ok(total / probe.len() as f64)
}

pub fn combine(ent: f64, cons: f64, conf: f64) -> f64 {
    ((1.0 - ent) + (1.0 - cons) + conf) / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CriteriaScores {
    pub ent: f64,
    pub cons: f64,
    pub conf: f64,
    pub omega: f64,
}

impl CriteriaScores {
    pub fn from_probe(probe: &[&[f64]]) -> Result<Self> {
        let ent = criteria_entropy(probe)?;
        let cons = criteria_consistency(probe)?;
        let conf = criteria_confidence(probe)?;
        Ok(Self { ent, cons, conf, omega: combine(ent, cons, conf) })
    }
}

/// Scores for every row of `z` given the `m` heads' probability matrices.
pub fn scores_from_head_probs(head_probs: &[Tensor]) -> Result<Vec<CriteriaScores>> {
    let n = head_probs.first().map_or(0, Tensor::rows);
    (0..n)
        .map(|i| {
            let probe: Vec<&[f64]> = head_probs.iter().map(|p| p.row(i)).collect();
            CriteriaScores::from_probe(&probe)
        })
        .collect()
}

/// Scores of precomputed features `z`, without jitter.
pub fn commonness_from_features(bundle: &ModelBundle, z: &Tensor) -> Result<Vec<CriteriaScores>> {
    scores_from_head_probs(&bundle.gm_probs_all(z)?)
}

/// Scores of raw inputs `x`, without jitter.
pub fn commonness_scores(bundle: &ModelBundle, x: &Tensor) -> Result<Vec<CriteriaScores>> {
    commonness_from_features(bundle, &bundle.features(x)?)
}

/// Argmax over the first `n_common` columns of `G^C` probabilities.
pub fn pseudo_labels(gc_probs: &Tensor, n_common: usize) -> Vec<usize> {
    gc_probs.row_iter().map(|r| argmax(&r[..n_common])).collect()
}

/// Checks `omega * r > h * r > 1`.
pub fn beta_constraint(omega: f64, h: f64, r: f64) -> Result<()> {
    if omega * r > h * r && h * r > 1.0 {
        Ok(())
    } else {
        Err(Error::BetaConstraint { omega, h, r })
    }
}

/// One draw from `Beta(alpha, beta)`.
pub fn beta_draw(alpha: f64, beta: f64, rng: &mut Rng) -> Result<f64> {
    let dist = Beta::new(alpha, beta)
        .map_err(|e| Error::InvalidArgument(format!("Beta({alpha}, {beta}): {e}")))?;
    Ok(dist.sample(rng))
}

/// `lambda2 ~ Beta(omega r, h r)` under the ordering constraint.
pub fn sample_lambda2(omega: f64, h: f64, r: f64, rng: &mut Rng) -> Result<f64> {
    beta_constraint(omega, h, r)?;
    beta_draw(omega * r, h * r, rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda2Policy {
    Fixed(f64),
    /// Beta draws; `fallback` is used when the constraint fails.
    Beta { r: f64, fallback: f64 },
}

impl Default for Lambda2Policy {
    fn default() -> Self {
        Self::Fixed(0.5)
    }
}

impl Lambda2Policy {
    /// Draw for one gated target; the flag reports a fallback.
    pub fn draw(&self, omega: f64, h: f64, rng: &mut Rng) -> (f64, bool) {
        match *self {
            Self::Fixed(v) => (v, false),
            Self::Beta { r, fallback } => match sample_lambda2(omega, h, r, rng) {
                Ok(v) => (v, false),
                Err(_) => (fallback, true),
            },
        }
    }

    /// Mean mixing ratio for a target with score `omega`.
    pub fn expected(&self, omega: f64, h: f64) -> f64 {
        match *self {
            Self::Fixed(v) => v,
            Self::Beta { r, fallback } => {
                if beta_constraint(omega, h, r).is_ok() {
                    omega / (omega + h)
                } else {
                    fallback
                }
            }
        }
    }
}

/// One gated target paired with a same-label source sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixupPair {
    pub source: usize,
    pub target: usize,
    pub label: usize,
    pub lambda2: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pairing {
    pub pairs: Vec<MixupPair>,
    /// Beta draws replaced by the fallback ratio.
    pub fallbacks: usize,
}

/// Pairs every target with `omega >= h` to a uniformly chosen source sample
/// whose label equals the target's pseudo-label.
pub fn build_mixup_pairs(
    source_labels: &[usize],
    pseudo: &[usize],
    omega: &[f64],
    h: f64,
    policy: &Lambda2Policy,
    rng: &mut Rng,
) -> Pairing {
    debug_assert_eq!(pseudo.len(), omega.len());
    let mut out = Pairing::default();
    for (t, (&label, &w)) in pseudo.iter().zip(omega).enumerate() {
        if w < h {
            continue;
        }
        let matches: Vec<usize> = (0..source_labels.len()).filter(|&i| source_labels[i] == label).collect();
        if matches.is_empty() {
            continue;
        }
        let source = matches[rng.random_range(0..matches.len())];
        let (lambda2, fell_back) = policy.draw(w, h, rng);
        out.fallbacks += usize::from(fell_back);
        out.pairs.push(MixupPair { source, target: t, label, lambda2, omega: w });
    }
    out
}

/// Rows `(1 - lambda2) x_s + lambda2 x_t` and the shared labels.
pub fn mixup_inputs(source_x: &Tensor, target_x: &Tensor, pairs: &[MixupPair]) -> Result<(Tensor, Vec<usize>)> {
    let d = source_x.cols();
    if target_x.cols() != d {
        return Err(Error::Shape { op: "mixup", detail: format!("source dim {d}, target dim {}", target_x.cols()) });
    }
    let mut data = Vec::with_capacity(pairs.len() * d);
    for p in pairs {
        let (xs, xt) = (source_x.row(p.source), target_x.row(p.target));
        data.extend(xs.iter().zip(xt).map(|(a, b)| (1.0 - p.lambda2) * a + p.lambda2 * b));
    }
    let labels = pairs.iter().map(|p| p.label).collect();
    Ok((Tensor::new(vec![pairs.len(), d], data)?, labels))
}

/// Cross-entropy graph of classifier `k` on `x`.
#[derive(Debug, Clone)]
pub struct HeadGraph {
    pub feature: BoundFeatures,
    pub head: BoundHead,
    pub loss: Var,
}

/// With `train_features` false the features pass through a stop-gradient
/// node, so `F` receives exactly zero gradient.
pub fn head_ce_graph(
    tape: &mut Tape,
    bundle: &ModelBundle,
    k: usize,
    x: &Tensor,
    labels: &[usize],
    train_features: bool,
) -> Result<HeadGraph> {
    let head = bundle.head(k)?.bind(tape, true);
    let feature = bundle.feature.bind(tape, true);
    let xv = tape.constant(x.clone());
    let mut z = feature.forward(tape, xv)?;
    if !train_features {
        z = tape.stop_gradient(z)?;
    }
    let p = head.probs(tape, z)?;
    let loss = cross_entropy(tape, p, labels, bundle.n_common)?;
    Ok(HeadGraph { feature, head, loss })
}

/// Mixup cross-entropy of classifier `k`; `F` is frozen.
pub fn cmmc_loss_graph(
    tape: &mut Tape,
    bundle: &ModelBundle,
    k: usize,
    source_x: &Tensor,
    target_x: &Tensor,
    pairs: &[MixupPair],
) -> Result<HeadGraph> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch("mixup pairs"));
    }
    let (x, y) = mixup_inputs(source_x, target_x, pairs)?;
    head_ce_graph(tape, bundle, k, &x, &y, false)
}

/// Source cross-entropy of classifier `k`; gradients reach `F`.
pub fn pretrain_loss_graph(tape: &mut Tape, bundle: &ModelBundle, k: usize, batch: &LabeledBatch) -> Result<HeadGraph> {
    head_ce_graph(tape, bundle, k, &batch.x, &batch.y, true)
}

/// Mini-batches drawn for one classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct CmmcBatch {
    pub source: LabeledBatch,
    pub target: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadStep {
    /// `None` when no target passed the gate and the head was skipped.
    pub loss: Option<f64>,
    pub pairs: usize,
    pub fallbacks: usize,
}

/// Shared inputs of a CMMC step.
#[derive(Debug)]
pub struct CmmcContext<'a> {
    pub h: f64,
    pub policy: Lambda2Policy,
    pub jitter: &'a mut JitterBank,
    /// One pairing stream per classifier.
    pub pair_rngs: &'a mut [Rng],
    pub lr: f64,
    pub sgd: SgdConfig,
}

/// One CMMC step: every classifier builds pairs from its own batch and
/// descends its mixup loss. Only the `G^M_k` parameters change.
///
/// Scores and pseudo-labels use the pre-step heads without jitter; jitter
/// is added to the mixed inputs of classifier `k`.
pub fn cmmc_step(
    bundle: &mut ModelBundle,
    opt: &mut OptimizerState,
    batches: &[CmmcBatch],
    ctx: &mut CmmcContext<'_>,
) -> Result<Vec<HeadStep>> {
    let m = bundle.m();
    if batches.len() != m || ctx.pair_rngs.len() != m {
        return Err(Error::InvalidArgument(format!(
            "{} batches and {} pairing streams for {m} classifiers",
            batches.len(),
            ctx.pair_rngs.len()
        )));
    }
    let mut steps = vec![HeadStep::default(); m];
    let mut updates: Vec<Option<Vec<Tensor>>> = vec![None; m];
    for (k, batch) in batches.iter().enumerate() {
        let zt = bundle.features(&batch.target)?;
        let pseudo = pseudo_labels(&bundle.gc_probs(&zt)?, bundle.n_common);
        let omega: Vec<f64> = commonness_from_features(bundle, &zt)?.iter().map(|s| s.omega).collect();
        let pairing = build_mixup_pairs(&batch.source.y, &pseudo, &omega, ctx.h, &ctx.policy, &mut ctx.pair_rngs[k]);
        steps[k].pairs = pairing.pairs.len();
        steps[k].fallbacks = pairing.fallbacks;
        if pairing.pairs.is_empty() {
            continue;
        }
        let (x, y) = mixup_inputs(&batch.source.x, &batch.target, &pairing.pairs)?;
        let x = ctx.jitter.apply(k, &x);
        let mut tape = Tape::new();
        let g = head_ce_graph(&mut tape, bundle, k, &x, &y, false)?;
        tape.backward(g.loss)?;
        steps[k].loss = Some(tape.value(g.loss).item());
        updates[k] = Some(g.head.vars().iter().map(|&v| tape.grad_or_zeros(v)).collect());
    }
    for (k, grads) in updates.into_iter().enumerate() {
        if let Some(grads) = grads {
            step_group(&mut bundle.gm[k], &grads, &mut opt.gm[k], ctx.lr, &ctx.sgd);
        }
    }
    Ok(steps)
}

/// One pretraining step: every classifier descends source cross-entropy on
/// its own batch, and `F` descends the sum.
pub fn pretrain_step(
    bundle: &mut ModelBundle,
    opt: &mut OptimizerState,
    batches: &[LabeledBatch],
    lr: f64,
    sgd: &SgdConfig,
) -> Result<Vec<f64>> {
    let m = bundle.m();
    if batches.len() != m {
        return Err(Error::InvalidArgument(format!("{} batches for {m} classifiers", batches.len())));
    }
    let mut tape = Tape::new();
    let feature = bundle.feature.bind(&mut tape, true);
    let mut heads = Vec::with_capacity(m);
    let mut losses = Vec::with_capacity(m);
    let mut total: Option<Var> = None;
    for (k, batch) in batches.iter().enumerate() {
        let head = bundle.gm[k].bind(&mut tape, true);
        let xv = tape.constant(batch.x.clone());
        let z = feature.forward(&mut tape, xv)?;
        let p = head.probs(&mut tape, z)?;
        let l = cross_entropy(&mut tape, p, &batch.y, bundle.n_common)?;
        losses.push(tape.value(l).item());
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
        heads.push(head);
    }
    let total = total.ok_or(Error::EmptyBatch("pretraining batches"))?;
    tape.backward(total)?;
    let grads = |vars: Vec<Var>| -> Vec<Tensor> { vars.iter().map(|&v| tape.grad_or_zeros(v)).collect() };
    let gf = grads(feature.vars());
    step_group(&mut bundle.feature, &gf, &mut opt.feature, lr, sgd);
    for (k, head) in heads.iter().enumerate() {
        let gh = grads(head.vars());
        step_group(&mut bundle.gm[k], &gh, &mut opt.gm[k], lr, sgd);
    }
    Ok(losses)
}
