//! Self-tuned instructive threshold `h`.
//!
//! Random disjoint pairs `(a, b)` of target `G^C` probability vectors give
//! `h = 1 - mean_pairs sum_{c < |C^S|} lambda1 (1 - lambda1) (a_c + b_c)^2`,
//! clamped to `[0, 1]`. Confident common predictions drive `h` down.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::Tensor;
use crate::rng::Rng;
use crate::{Error, Result};

/// Validates `lambda1 ∈ [0.5, 1]`.
pub fn check_lambda1(lambda1: f64) -> Result<()> {
    if (0.5..=1.0).contains(&lambda1) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("lambda1 must lie in [0.5, 1], got {lambda1}")))
    }
}

/// Per-pair sum over the first `n_common` classes.
pub fn pair_term(a: &[f64], b: &[f64], n_common: usize, lambda1: f64) -> f64 {
    let scale = lambda1 * (1.0 - lambda1);
    a[..n_common]
        .iter()
        .zip(&b[..n_common])
        .map(|(x, y)| {
            let s = x + y;
            scale * s * s
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdValue {
    pub h: f64,
    pub pairs: usize,
}

/// `h` from `probs: [N, n_common + 1]` with one random disjoint pairing.
pub fn compute_threshold(probs: &Tensor, n_common: usize, lambda1: f64, rng: &mut Rng) -> Result<ThresholdValue> {
    check_lambda1(lambda1)?;
    if probs.shape().len() != 2 || probs.cols() != n_common + 1 {
        return Err(Error::Shape {
            op: "threshold",
            detail: format!("expected [N, {}], got {:?}", n_common + 1, probs.shape()),
        });
    }
    let n = probs.rows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("threshold needs at least 2 target samples, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let pairs = n / 2;
    let total: f64 = order
        .chunks_exact(2)
        .map(|p| pair_term(probs.row(p[0]), probs.row(p[1]), n_common, lambda1))
        .sum();
    let h = (1.0 - total / pairs as f64).clamp(0.0, 1.0);
    Ok(ThresholdValue { h, pairs })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ThresholdEntry {
    pub epoch: usize,
    pub h: f64,
    pub pairs: usize,
    pub lambda1: f64,
}

/// Per-epoch trajectory of `h`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ThresholdSchedule {
    pub entries: Vec<ThresholdEntry>,
}

impl ThresholdSchedule {
    pub fn push(&mut self, entry: ThresholdEntry) {
        self.entries.push(entry);
    }

    pub fn last(&self) -> Option<f64> {
        self.entries.last().map(|e| e.h)
    }

    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.h).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::rng;

    fn h(rows: &[[f64; 3]], lambda1: f64) -> f64 {
        let t = Tensor::from_rows(rows).unwrap();
        compute_threshold(&t, 2, lambda1, &mut rng::stream(0, 0)).unwrap().h
    }

    #[test]
    fn hand_cases() {
        assert_eq!(h(&[[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]], 0.5), 1.0);
        assert_eq!(h(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]], 0.5), 0.0);
        assert!((h(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], 0.5) - 0.5).abs() < 1e-12);
        assert_eq!(h(&[[0.3, 0.6, 0.1], [0.9, 0.05, 0.05]], 1.0), 1.0);
    }

    #[test]
    fn odd_count_drops_one_sample() {
        let t = Tensor::from_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
        let v = compute_threshold(&t, 2, 0.5, &mut rng::stream(3, 1)).unwrap();
        assert_eq!(v.pairs, 1);
        assert_eq!(v.h, 0.0);
    }

    #[test]
    fn preconditions() {
        let one = Tensor::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(compute_threshold(&one, 2, 0.5, &mut rng::stream(0, 0)).is_err());
        let two = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        assert!(compute_threshold(&two, 2, 0.4, &mut rng::stream(0, 0)).is_err());
        assert!(compute_threshold(&two, 2, 1.01, &mut rng::stream(0, 0)).is_err());
        assert!(compute_threshold(&two, 3, 0.5, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn pairing_is_seeded() {
        let rows: Vec<[f64; 3]> = (0..20).map(|i| {
            let a = (i as f64 * 0.37).fract();
            [a * 0.7, (1.0 - a) * 0.7, 0.3]
        }).collect();
        let t = Tensor::from_rows(&rows).unwrap();
        let a = compute_threshold(&t, 2, 0.5, &mut rng::stream(9, 5)).unwrap();
        let b = compute_threshold(&t, 2, 0.5, &mut rng::stream(9, 5)).unwrap();
        assert_eq!(a.h.to_bits(), b.h.to_bits());
    }

    #[test]
    fn non_decreasing_in_lambda1() {
        let rows: Vec<[f64; 3]> = (0..16).map(|i| {
            let a = (i as f64 * 0.61).fract();
            [a * 0.5, (1.0 - a) * 0.5, 0.5]
        }).collect();
        let mut prev = 0.0;
        for l in [0.5, 0.6, 0.7, 0.8, 0.9, 1.0] {
            let v = h(&rows, l);
            assert!(v >= prev, "h({l}) = {v} < {prev}");
            prev = v;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn rises_with_unknown_fraction() {
        // Each converted row lowers the term of exactly one pair under a fixed pairing.
        let mut rows = vec![[1.0, 0.0, 0.0]; 12];
        let mut prev = h(&rows, 0.5);
        assert_eq!(prev, 0.0);
        for i in 0..rows.len() {
            rows[i] = [0.0, 0.0, 1.0];
            let v = h(&rows, 0.5);
            assert!(v > prev, "{} unknown rows: h = {v} <= {prev}", i + 1);
            prev = v;
        }
        assert_eq!(prev, 1.0);
    }
}
