//! Open-set tasks, the synthetic generator and mini-batch streams.
//!
//! Class labels are zero-based. Source labels lie in `0..n_common`; target
//! ground truth lies in `0..n_total`, where every label `>= n_common` is a
//! target-private ("unknown") class.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// `1 - |C^S| / |C^T|`
pub fn openness(n_common: usize, n_total: usize) -> f64 {
    1.0 - n_common as f64 / n_total as f64
}

/// Labeled source samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Shape { op: "labeled batch", detail: format!("{} rows, {} labels", x.rows(), y.len()) });
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OsdaTask {
    pub source_x: Tensor,
    pub source_y: Vec<usize>,
    pub target_x: Tensor,
    /// Ground truth used only for evaluation; `None` for unlabeled rows.
    pub target_y: Vec<Option<usize>>,
    pub n_common: usize,
    pub n_total: usize,
}

impl OsdaTask {
    pub fn new(
        source_x: Tensor,
        source_y: Vec<usize>,
        target_x: Tensor,
        target_y: Vec<Option<usize>>,
        n_common: usize,
        n_total: usize,
    ) -> Result<Self> {
        let task = Self { source_x, source_y, target_x, target_y, n_common, n_total };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_common == 0 || self.n_common >= self.n_total {
            return Err(Error::InvalidConfig(format!(
                "open-set task needs 0 < |C^S| < |C^T|, got {} and {}",
                self.n_common, self.n_total
            )));
        }
        if self.source_y.is_empty() {
            return Err(Error::EmptyBatch("source domain"));
        }
        if self.target_y.is_empty() {
            return Err(Error::EmptyBatch("target domain"));
        }
        if self.source_x.rows() != self.source_y.len() || self.target_x.rows() != self.target_y.len() {
            return Err(Error::Shape { op: "task", detail: "row count differs from label count".into() });
        }
        if self.source_x.cols() != self.target_x.cols() {
            return Err(Error::Shape {
                op: "task",
                detail: format!("source dim {} vs target dim {}", self.source_x.cols(), self.target_x.cols()),
            });
        }
        if let Some(&bad) = self.source_y.iter().find(|&&y| y >= self.n_common) {
            return Err(Error::LabelOutOfRange { label: bad, classes: self.n_common });
        }
        if let Some(bad) = self.target_y.iter().flatten().find(|&&y| y >= self.n_total) {
            return Err(Error::LabelOutOfRange { label: *bad, classes: self.n_total });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.source_x.cols()
    }

    pub fn openness(&self) -> f64 {
        openness(self.n_common, self.n_total)
    }

    pub fn n_source(&self) -> usize {
        self.source_y.len()
    }

    pub fn n_target(&self) -> usize {
        self.target_y.len()
    }

    pub fn source_batch(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch { x: self.source_x.select_rows(indices), y: indices.iter().map(|&i| self.source_y[i]).collect() }
    }

    pub fn target_batch(&self, indices: &[usize]) -> Tensor {
        self.target_x.select_rows(indices)
    }

    pub fn has_target_labels(&self) -> bool {
        self.target_y.iter().any(Option::is_some)
    }
}

/// Gaussian clusters on a circle, with the target domain rotated,
/// translated and widened.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthConfig {
    pub dim: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    /// Cluster standard deviation.
    pub spread: f64,
    /// Distance between adjacent cluster centers on the circle.
    pub spacing: f64,
    pub rotation_deg: f64,
    /// Per-dimension target offset, in units of `spread`.
    pub translation: f64,
    pub spread_mult: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 4,
            source_per_class: 100,
            target_per_class: 100,
            spread: 1.0,
            spacing: 4.0,
            rotation_deg: 25.0,
            translation: 0.5,
            spread_mult: 1.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Same clusters, no domain shift.
    pub fn without_shift(mut self) -> Self {
        self.rotation_deg = 0.0;
        self.translation = 0.0;
        self.spread_mult = 1.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidConfig(format!("feature dimension must be >= 2, got {}", self.dim)));
        }
        if self.source_per_class < 8 || self.target_per_class < 8 {
            return Err(Error::InvalidConfig("need at least 8 samples per class".into()));
        }
        if !(self.spread > 0.0 && self.spacing > 0.0 && self.spread_mult > 0.0) {
            return Err(Error::InvalidConfig("spread, spacing and spread multiplier must be positive".into()));
        }
        Ok(())
    }
}

/// Circle slot of every class. Common classes are spread evenly so that
/// target-private clusters sit between them.
pub fn cluster_slots(n_common: usize, n_total: usize) -> Vec<usize> {
    let mut slot_of = vec![usize::MAX; n_total];
    let mut taken = vec![false; n_total];
    for c in 0..n_common {
        let s = (c * n_total + n_common / 2) / n_common;
        slot_of[c] = s;
        taken[s] = true;
    }
    let mut free = (0..n_total).filter(|&s| !taken[s]);
    for slot in slot_of.iter_mut().skip(n_common) {
        *slot = free.next().expect("one slot per class");
    }
    slot_of
}

pub fn generate_task(cfg: &SynthConfig, n_common: usize, n_total: usize) -> Result<OsdaTask> {
    cfg.validate()?;
    if n_common < 2 || n_common >= n_total {
        return Err(Error::InvalidConfig(format!(
            "open-set task needs 2 <= |C^S| < |C^T|, got {n_common} and {n_total}"
        )));
    }
    let mut rng = rng::stream(cfg.seed, rng::stream::SYNTH);
    let slots = cluster_slots(n_common, n_total);
    let radius = cfg.spacing / (2.0 * libm::sin(core::f64::consts::PI / n_total as f64));
    let center = |c: usize| {
        let angle = 2.0 * core::f64::consts::PI * slots[c] as f64 / n_total as f64;
        (radius * libm::cos(angle), radius * libm::sin(angle))
    };
    let d = cfg.dim;

    let sample = |rng: &mut Rng, c: usize, sigma: f64| -> Vec<f64> {
        let (cx, cy) = center(c);
        (0..d)
            .map(|j| {
                let e: f64 = StandardNormal.sample(rng);
                let base = match j {
                    0 => cx,
                    1 => cy,
                    _ => 0.0,
                };
                base + sigma * e
            })
            .collect()
    };

    let mut source = Vec::with_capacity(n_common * cfg.source_per_class * d);
    let mut source_y = Vec::with_capacity(n_common * cfg.source_per_class);
    for c in 0..n_common {
        for _ in 0..cfg.source_per_class {
            source.extend(sample(&mut rng, c, cfg.spread));
            source_y.push(c);
        }
    }

    let theta = cfg.rotation_deg.to_radians();
    let (s, co) = (libm::sin(theta), libm::cos(theta));
    let shift = cfg.translation * cfg.spread;
    let mut target = Vec::with_capacity(n_total * cfg.target_per_class * d);
    let mut target_y = Vec::with_capacity(n_total * cfg.target_per_class);
    for c in 0..n_total {
        for _ in 0..cfg.target_per_class {
            let mut x = sample(&mut rng, c, cfg.spread * cfg.spread_mult);
            let (x0, x1) = (x[0], x[1]);
            x[0] = co * x0 - s * x1;
            x[1] = s * x0 + co * x1;
            x.iter_mut().for_each(|v| *v += shift);
            target.extend(x);
            target_y.push(Some(c));
        }
    }

    OsdaTask::new(
        Tensor::new(vec![source_y.len(), d], source)?,
        source_y,
        Tensor::new(vec![target_y.len(), d], target)?,
        target_y,
        n_common,
        n_total,
    )
}

/// Endless stream of shuffled index batches over one domain.
///
/// Each pass is a fresh permutation; a trailing partial batch is dropped.
/// When the domain is smaller than the batch, passes are concatenated so
/// indices repeat within a batch ([`BatchIterator::wraps`]).
#[derive(Debug, Clone)]
pub struct BatchIterator {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl BatchIterator {
    pub fn new(n: usize, batch: usize, rng: Rng) -> Result<Self> {
        if batch < 2 {
            return Err(Error::InvalidConfig(format!("batch size must be >= 2, got {batch}")));
        }
        if n == 0 {
            return Err(Error::EmptyBatch("batch iterator"));
        }
        let mut it = Self { order: (0..n).collect(), pos: 0, batch, rng };
        it.reshuffle();
        Ok(it)
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn wraps(&self) -> bool {
        self.batch > self.order.len()
    }

    pub fn batches_per_pass(&self) -> usize {
        self.order.len() / self.batch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let n = self.order.len();
        if n >= self.batch {
            if self.pos + self.batch > n {
                self.reshuffle();
            }
            let out = self.order[self.pos..self.pos + self.batch].to_vec();
            self.pos += self.batch;
            return out;
        }
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == n {
                self.reshuffle();
            }
            let take = (self.batch - out.len()).min(n - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

/// Independent source and target batch streams.
#[derive(Debug, Clone)]
pub struct DomainBatches {
    pub source: BatchIterator,
    pub target: BatchIterator,
}

impl DomainBatches {
    pub fn new(task: &OsdaTask, batch: usize, seed: u64, stream: u64) -> Result<Self> {
        Ok(Self {
            source: BatchIterator::new(task.n_source(), batch, rng::stream(seed, stream))?,
            target: BatchIterator::new(task.n_target(), batch, rng::stream(seed, stream | rng::stream::TARGET_SIDE))?,
        })
    }

    pub fn wraps(&self) -> bool {
        self.source.wraps() || self.target.wraps()
    }

    pub fn next_indices(&mut self) -> (Vec<usize>, Vec<usize>) {
        (self.source.next_batch(), self.target.next_batch())
    }

    pub fn next_batches(&mut self, task: &OsdaTask) -> (LabeledBatch, Tensor) {
        let (s, t) = self.next_indices();
        (task.source_batch(&s), task.target_batch(&t))
    }
}
