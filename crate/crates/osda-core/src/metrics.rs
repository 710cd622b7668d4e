//! Open-set accuracy metrics.
//!
//! All target-private classes collapse into one unknown class, giving
//! `|C^S| + 1` evaluation classes. Classes without samples are left out of
//! the per-class means.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Prediction {
    Known(usize),
    Unknown,
}

impl Prediction {
    /// Evaluation class index; unknown maps to `n_common`.
    pub fn class_index(self, n_common: usize) -> usize {
        match self {
            Self::Known(c) => c,
            Self::Unknown => n_common,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    pub os: f64,
    pub os_star: f64,
    pub unk: f64,
    pub h_score: f64,
}

/// `2 a b / (a + b)`, or 0 when `a + b = 0`.
pub fn h_score(os_star: f64, unk: f64) -> f64 {
    let s = os_star + unk;
    if s == 0.0 {
        0.0
    } else {
        2.0 * os_star * unk / s
    }
}

/// Metrics over pairs of ground-truth label and prediction. Labels
/// `>= n_common` are target-private; `None` labels are skipped.
pub fn compute_metrics(truth: &[Option<usize>], preds: &[Prediction], n_common: usize) -> Result<Metrics> {
    if truth.len() != preds.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "{} labels for {} predictions",
            truth.len(),
            preds.len()
        )));
    }
    let classes = n_common + 1;
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (y, p) in truth.iter().zip(preds) {
        let Some(y) = *y else { continue };
        let c = y.min(n_common);
        totals[c] += 1;
        if p.class_index(n_common) == c {
            hits[c] += 1;
        }
    }
    if totals.iter().all(|&t| t == 0) {
        return Err(Error::NoLabeledTargets);
    }
    let acc: Vec<Option<f64>> =
        hits.iter().zip(&totals).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect();
    let mean = |xs: &[Option<f64>]| {
        let present: Vec<f64> = xs.iter().flatten().copied().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    };
    let os = mean(&acc);
    let os_star = mean(&acc[..n_common]);
    let unk = acc[n_common].unwrap_or(0.0);
    Ok(Metrics { os, os_star, unk, h_score: h_score(os_star, unk) })
}
