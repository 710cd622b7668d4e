//! Dual multi-class classifier: supervised source losses, the weighted
//! adversarial loss on the unknown output of `G^C`, and the nuclear-norm
//! discrepancy that trains `G^aux` as a domain critic.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::LabeledBatch;
use crate::nn::{common_mass, BoundFeatures, BoundHead, ModelBundle};
use crate::optim::{step_group, OptimizerState, SgdConfig};
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= n_classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes: n_classes }),
        None => Ok(()),
    }
}

/// `-mean_i ln p[i, y_i]` for labels in `0..n_classes`.
///
/// `probs` may carry extra columns (the unknown output of `G^C`); labels
/// must still name one of the first `n_classes`.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize], n_classes: usize) -> Result<Var> {
    check_labels(labels, n_classes)?;
    if labels.is_empty() {
        return Err(Error::EmptyBatch("cross entropy"));
    }
    let p = tape.gather(probs, labels)?;
    let p = tape.clamp(p, PROB_EPS, 1.0)?;
    let lp = tape.ln(p)?;
    let m = tape.mean(lp)?;
    tape.neg(m)
}

/// One-hot binary cross-entropy summed over classes, averaged over rows.
pub fn binary_cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Shape { op: "binary cross entropy", detail: format!("{shape:?} for {} labels", labels.len()) });
    }
    let (n, c) = (shape[0], shape[1]);
    check_labels(labels, c)?;
    if n == 0 {
        return Err(Error::EmptyBatch("binary cross entropy"));
    }
    let mut onehot = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * c + y] = 1.0;
    }
    let rest: Vec<f64> = onehot.iter().map(|v| 1.0 - v).collect();
    let y = tape.constant(Tensor::new(vec![n, c], onehot)?);
    let ybar = tape.constant(Tensor::new(vec![n, c], rest)?);

    let pc = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)?;
    let lp = tape.ln(pc)?;
    let q = tape.one_minus(pc)?;
    let lq = tape.ln(q)?;
    let a = tape.mul(y, lp)?;
    let b = tape.mul(ybar, lq)?;
    let t = tape.add(a, b)?;
    let s = tape.sum(t)?;
    tape.scale(s, -1.0 / n as f64)
}

/// `-mean_i w_i (ln p_i + ln(1 - p_i))` over clamped `p`.
pub fn weighted_log_barrier(tape: &mut Tape, p: Var, weights: Var) -> Result<Var> {
    let pc = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
    let lp = tape.ln(pc)?;
    let q = tape.one_minus(pc)?;
    let lq = tape.ln(q)?;
    let barrier = tape.add(lp, lq)?;
    let wb = tape.mul(weights, barrier)?;
    let m = tape.mean(wb)?;
    tape.neg(m)
}

/// Target term plus the optional source term of the weighted adversarial loss.
///
/// `p_unk_*` are the unknown-class probabilities of `G^C`, one per sample;
/// weights are length-matched vectors.
pub fn adversarial_loss(tape: &mut Tape, p_unk_t: Var, w_t: Var, source: Option<(Var, Var)>) -> Result<Var> {
    let lt = weighted_log_barrier(tape, p_unk_t, w_t)?;
    match source {
        Some((p_unk_s, w_s)) => {
            let ls = weighted_log_barrier(tape, p_unk_s, w_s)?;
            tape.add(lt, ls)
        }
        None => Ok(lt),
    }
}

/// `||A_t||_* - ||A_s||_*` over `G^aux` probability matrices.
pub fn aux_discrepancy_loss(tape: &mut Tape, aux_t: Var, aux_s: Var) -> Result<Var> {
    let nt = tape.nuclear_norm(aux_t)?;
    let ns = tape.nuclear_norm(aux_s)?;
    tape.sub(nt, ns)
}

/// How the adversarial sample weights `P_common` enter the graph.
#[derive(Debug, Clone, PartialEq)]
pub enum AdvWeights {
    /// Computed from forward values and inserted as constants.
    Detached,
    /// Computed in-graph; gradients flow through the weights.
    Attached,
    /// Caller-supplied constants, one per target and per source sample.
    Fixed { target: Vec<f64>, source: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmcOptions {
    pub adv_source_term: bool,
    /// When false, `P_common = P1` and `G^aux` is neither used nor trained.
    pub use_gaux: bool,
    pub weights: AdvWeights,
    pub grl_coeff: f64,
    /// When false the adversarial path skips the reversal node.
    pub reverse_gradient: bool,
}

impl Default for DmcOptions {
    fn default() -> Self {
        Self { adv_source_term: true, use_gaux: true, weights: AdvWeights::Detached, grl_coeff: 1.0, reverse_gradient: true }
    }
}

/// Loss values of one DMC batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DmcBatchLoss {
    pub source_ce: f64,
    pub source_bce: f64,
    pub adv: f64,
    pub aux_disc: f64,
}

/// Every node of one DMC forward pass.
#[derive(Debug, Clone)]
pub struct DmcGraph {
    pub feature: BoundFeatures,
    pub gc: BoundHead,
    pub gaux: BoundHead,
    pub source_ce: Var,
    pub source_bce: Option<Var>,
    pub adv: Var,
    pub aux_disc: Option<Var>,
    pub total: Var,
}

impl DmcGraph {
    pub fn losses(&self, tape: &Tape) -> DmcBatchLoss {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        DmcBatchLoss {
            source_ce: tape.value(self.source_ce).item(),
            source_bce: get(self.source_bce),
            adv: tape.value(self.adv).item(),
            aux_disc: get(self.aux_disc),
        }
    }
}

fn row_sums(t: &Tensor) -> Vec<f64> {
    t.row_iter().map(|r| r.iter().sum()).collect()
}

/// Records the full DMC objective for one source and one target batch.
pub fn build_dmc_graph(
    tape: &mut Tape,
    bundle: &ModelBundle,
    source: &LabeledBatch,
    target: &Tensor,
    opts: &DmcOptions,
) -> Result<DmcGraph> {
    if source.is_empty() {
        return Err(Error::EmptyBatch("source batch"));
    }
    if target.rows() == 0 {
        return Err(Error::EmptyBatch("target batch"));
    }
    let k = bundle.n_common;
    let feature = bundle.feature.bind(tape, true);
    let gc = bundle.gc.bind(tape, true);
    let gaux = bundle.gaux.bind(tape, opts.use_gaux);

    let xs = tape.constant(source.x.clone());
    let xt = tape.constant(target.clone());
    let zs = feature.forward(tape, xs)?;
    let zt = feature.forward(tape, xt)?;

    let ps = gc.probs(tape, zs)?;
    let source_ce = cross_entropy(tape, ps, &source.y, k)?;

    let mut source_bce = None;
    let mut aux_disc = None;
    let mut aux = None;
    if opts.use_gaux {
        let zs_sg = tape.stop_gradient(zs)?;
        let zt_sg = tape.stop_gradient(zt)?;
        let aux_s = gaux.probs(tape, zs_sg)?;
        let aux_t = gaux.probs(tape, zt_sg)?;
        source_bce = Some(binary_cross_entropy(tape, aux_s, &source.y)?);
        aux_disc = Some(aux_discrepancy_loss(tape, aux_t, aux_s)?);
        aux = Some((aux_s, aux_t));
    }

    let (zs_adv, zt_adv) = if opts.reverse_gradient {
        (tape.gradient_reversal(zs, opts.grl_coeff)?, tape.gradient_reversal(zt, opts.grl_coeff)?)
    } else {
        (zs, zt)
    };
    let ps_adv = gc.probs(tape, zs_adv)?;
    let pt_adv = gc.probs(tape, zt_adv)?;
    let pu_s = tape.column(ps_adv, k)?;
    let pu_t = tape.column(pt_adv, k)?;

    let (w_t, w_s) = match &opts.weights {
        AdvWeights::Detached => {
            let p1 = |p: Var, tape: &Tape| -> Vec<f64> {
                tape.value(p).row_iter().map(|r| common_mass(r, k)).collect()
            };
            let mut wt = p1(pt_adv, tape);
            let mut ws = p1(ps_adv, tape);
            if let Some((aux_s, aux_t)) = aux {
                wt.iter_mut().zip(row_sums(tape.value(aux_t))).for_each(|(w, p2)| *w *= p2);
                ws.iter_mut().zip(row_sums(tape.value(aux_s))).for_each(|(w, p2)| *w *= p2);
            }
            ws.iter_mut().for_each(|w| *w = 1.0 - *w);
            (tape.constant(Tensor::vector(wt)), tape.constant(Tensor::vector(ws)))
        }
        AdvWeights::Attached => {
            let pt = gc.probs(tape, zt)?;
            let p1_t = tape.columns(pt, 0, k)?;
            let p1_t = tape.sum_rows(p1_t)?;
            let p1_s = tape.columns(ps, 0, k)?;
            let p1_s = tape.sum_rows(p1_s)?;
            let (pc_t, pc_s) = match aux {
                Some((aux_s, aux_t)) => {
                    let p2_t = tape.sum_rows(aux_t)?;
                    let p2_s = tape.sum_rows(aux_s)?;
                    (tape.mul(p1_t, p2_t)?, tape.mul(p1_s, p2_s)?)
                }
                None => (p1_t, p1_s),
            };
            (pc_t, tape.one_minus(pc_s)?)
        }
        AdvWeights::Fixed { target: wt, source: ws } => {
            if wt.len() != target.rows() || ws.len() != source.len() {
                return Err(Error::Shape {
                    op: "adversarial weights",
                    detail: format!("{}/{} weights for {}/{} samples", wt.len(), ws.len(), target.rows(), source.len()),
                });
            }
            (tape.constant(Tensor::vector(wt.clone())), tape.constant(Tensor::vector(ws.clone())))
        }
    };
    let src_term = opts.adv_source_term.then_some((pu_s, w_s));
    let adv = adversarial_loss(tape, pu_t, w_t, src_term)?;

    let mut total = tape.add(source_ce, adv)?;
    for extra in [source_bce, aux_disc].into_iter().flatten() {
        total = tape.add(total, extra)?;
    }
    Ok(DmcGraph { feature, gc, gaux, source_ce, source_bce, adv, aux_disc, total })
}

fn grads(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
}

/// One descent step on the DMC objective for `F`, `G^C` and `G^aux`.
///
/// `F` receives the reversed adversarial gradient, so it ascends that term
/// while `G^C` descends it.
pub fn dmc_step(
    bundle: &mut ModelBundle,
    opt: &mut OptimizerState,
    source: &LabeledBatch,
    target: &Tensor,
    opts: &DmcOptions,
    lr: f64,
    sgd: &SgdConfig,
) -> Result<DmcBatchLoss> {
    let mut tape = Tape::new();
    let g = build_dmc_graph(&mut tape, bundle, source, target, opts)?;
    tape.backward(g.total)?;
    let gf = grads(&tape, &g.feature.vars());
    let gc = grads(&tape, &g.gc.vars());
    step_group(&mut bundle.feature, &gf, &mut opt.feature, lr, sgd);
    step_group(&mut bundle.gc, &gc, &mut opt.gc, lr, sgd);
    if opts.use_gaux {
        let ga = grads(&tape, &g.gaux.vars());
        step_group(&mut bundle.gaux, &ga, &mut opt.gaux, lr, sgd);
    }
    Ok(g.losses(&tape))
}
