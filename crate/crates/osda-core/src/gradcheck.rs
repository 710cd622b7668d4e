//! Central finite-difference checks of tape gradients against the bundle
//! parameters.
//!
//! Only nodes whose backward pass is the true derivative can be checked;
//! graphs must be built without reversal and with constant sample weights.
//! Parameters cut off by a stop-gradient node are left out of the check.

use alloc::vec::Vec;
use core::ops::Range;

use crate::autodiff::{Tape, Tensor, Var};
use crate::cmmc::{self, MixupPair};
use crate::data::LabeledBatch;
use crate::dmc::{self, AdvWeights, DmcOptions};
use crate::nn::{ModelBundle, ParamGroup};
use crate::rng;
use crate::{Error, Result};

/// Parameter groups of a bundle, in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Feature,
    Gc,
    Gaux,
    Gm(usize),
}

/// Indices of the group's tensors within [`ModelBundle::tensors`].
pub fn group_range(bundle: &ModelBundle, group: Group) -> Range<usize> {
    let f = bundle.feature.tensors().len();
    match group {
        Group::Feature => 0..f,
        Group::Gc => f..f + 2,
        Group::Gaux => f + 2..f + 4,
        Group::Gm(k) => f + 4 + 2 * k..f + 6 + 2 * k,
    }
}

/// Pairs every tensor index of `group` with the matching bound variable.
pub fn bind_group(bundle: &ModelBundle, group: Group, vars: &[Var]) -> Vec<(usize, Var)> {
    group_range(bundle, group).zip(vars.iter().copied()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(tensor index, element)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the tape gradient of every listed parameter element with a
/// central difference of step `eps`.
///
/// `build` must be deterministic and return the scalar loss together with
/// `(tensor index, var)` pairs for the parameters to check.
pub fn check<F>(bundle: &ModelBundle, eps: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ModelBundle) -> Result<(Var, Vec<(usize, Var)>)>,
{
    let mut tape = Tape::new();
    let (loss, params) = build(&mut tape, bundle)?;
    tape.backward(loss)?;
    let analytic: Vec<(usize, Tensor)> = params.iter().map(|&(i, v)| (i, tape.grad_or_zeros(v))).collect();

    let eval = |b: &ModelBundle| -> Result<f64> {
        let mut t = Tape::new();
        let (l, _) = build(&mut t, b)?;
        Ok(t.value(l).item())
    };
    let mut out = GradCheck::default();
    let mut probe = bundle.clone();
    for (idx, grad) in &analytic {
        for e in 0..grad.len() {
            let orig = probe.tensors()[*idx].data()[e];
            probe.tensors_mut()[*idx].data_mut()[e] = orig + eps;
            let up = eval(&probe)?;
            probe.tensors_mut()[*idx].data_mut()[e] = orig - eps;
            let down = eval(&probe)?;
            probe.tensors_mut()[*idx].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(grad.data()[e], numeric);
            if !err.is_finite() {
                return Err(Error::NonFinite { op: "finite difference", node: *idx });
            }
            if out.worst.is_none() || err > out.max_rel_err {
                out.max_rel_err = err;
                out.worst = Some((*idx, e));
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

/// Finite-difference step used by [`objective_suite`].
pub const SUITE_EPS: f64 = 1e-5;

/// A small problem on which every training objective is checked.
#[derive(Debug, Clone)]
pub struct Probe {
    pub bundle: ModelBundle,
    pub source: LabeledBatch,
    pub target: Tensor,
    pub pairs: Vec<MixupPair>,
}

impl Probe {
    /// `n` samples of dimension `dim`, `n_common` classes, two CMMC heads.
    pub fn new(n: usize, dim: usize, n_common: usize, seed: u64) -> Result<Self> {
        use rand::Rng as _;
        let bundle = ModelBundle::seeded(&[dim, 6, 5], n_common, 2, seed)?;
        let mut r = rng::stream(seed, rng::stream::GRADCHECK);
        let mut draw = |rows: usize| {
            let data = (0..rows * dim).map(|_| r.random_range(-1.5..1.5)).collect();
            Tensor::new(alloc::vec![rows, dim], data)
        };
        let sx = draw(n)?;
        let tx = draw(n)?;
        let y: Vec<usize> = (0..n).map(|i| i % n_common).collect();
        let pairs = (0..n)
            .map(|i| MixupPair { source: i, target: n - 1 - i, label: y[i], lambda2: 0.3 + 0.1 * i as f64, omega: 0.9 })
            .collect();
        Ok(Self { bundle, source: LabeledBatch::new(sx, y)?, target: tx, pairs })
    }
}

fn dmc_opts(probe: &Probe) -> DmcOptions {
    let n_t = probe.target.rows();
    let n_s = probe.source.len();
    DmcOptions {
        weights: AdvWeights::Fixed {
            target: (0..n_t).map(|i| 0.2 + 0.15 * i as f64).collect(),
            source: (0..n_s).map(|i| 0.9 - 0.2 * i as f64).collect(),
        },
        reverse_gradient: false,
        ..DmcOptions::default()
    }
}

/// Checks source CE, source BCE, the weighted adversarial loss, the
/// nuclear-norm discrepancy, the mixup CE and the pretraining CE.
pub fn objective_suite(probe: &Probe) -> Result<Vec<(&'static str, GradCheck)>> {
    let opts = dmc_opts(probe);
    let dmc_check = |pick: fn(&dmc::DmcGraph) -> Option<Var>, groups: &'static [Group]| {
        check(&probe.bundle, SUITE_EPS, |tape, b| {
            let g = dmc::build_dmc_graph(tape, b, &probe.source, &probe.target, &opts)?;
            let loss = pick(&g).ok_or_else(|| Error::InvalidArgument("objective disabled in graph".into()))?;
            let mut params = Vec::new();
            for &group in groups {
                let vars = match group {
                    Group::Feature => g.feature.vars(),
                    Group::Gc => g.gc.vars(),
                    Group::Gaux => g.gaux.vars(),
                    Group::Gm(_) => Vec::new(),
                };
                params.extend(bind_group(b, group, &vars));
            }
            Ok((loss, params))
        })
    };
    let mut out = Vec::new();
    out.push(("source cross-entropy", dmc_check(|g| Some(g.source_ce), &[Group::Feature, Group::Gc])?));
    out.push(("source binary cross-entropy", dmc_check(|g| g.source_bce, &[Group::Gaux])?));
    out.push(("weighted adversarial loss", dmc_check(|g| Some(g.adv), &[Group::Feature, Group::Gc])?));
    out.push(("nuclear-norm discrepancy", dmc_check(|g| g.aux_disc, &[Group::Gaux])?));

    let k = 1;
    out.push((
        "mixup cross-entropy",
        check(&probe.bundle, SUITE_EPS, |tape, b| {
            let g = cmmc::cmmc_loss_graph(tape, b, k, &probe.source.x, &probe.target, &probe.pairs)?;
            Ok((g.loss, bind_group(b, Group::Gm(k), &g.head.vars())))
        })?,
    ));
    out.push((
        "pretraining cross-entropy",
        check(&probe.bundle, SUITE_EPS, |tape, b| {
            let g = cmmc::pretrain_loss_graph(tape, b, 0, &probe.source)?;
            let mut params = bind_group(b, Group::Feature, &g.feature.vars());
            params.extend(bind_group(b, Group::Gm(0), &g.head.vars()));
            Ok((g.loss, params))
        })?,
    ));
    Ok(out)
}
