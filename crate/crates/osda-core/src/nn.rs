//! Feature extractor, classifier heads and the model bundle.
//!
//! Classifier indices `k` are zero-based throughout (`0..m`).

use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Default hidden widths of the feature extractor.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 32];

/// Largest input jitter, reached by the last CMMC classifier.
pub const MAX_JITTER_SIGMA: f64 = 0.05;

/// Fully connected layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let limit = libm::sqrt(6.0 / (inputs + outputs) as f64);
        let data = (0..inputs * outputs).map(|_| rng.random_range(-limit..=limit)).collect();
        Self {
            weight: Tensor::new(alloc::vec![inputs, outputs], data).expect("shape matches"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone(), trainable),
            bias: tape.leaf(self.bias.clone(), trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_bias(y, self.bias)
    }
}

/// Anything that owns trainable tensors in a fixed declaration order.
pub trait ParamGroup {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
}

/// Multilayer perceptron with a ReLU after every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<Linear>,
}

impl FeatureExtractor {
    pub fn new(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig(alloc::format!("feature widths {widths:?}")));
        }
        let layers = widths.windows(2).map(|w| Linear::glorot(w[0], w[1], rng)).collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    /// Input width followed by every layer's output width.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.layers.len() + 1);
        w.push(self.layers[0].inputs());
        w.extend(self.layers.iter().map(Linear::outputs));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::outputs)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundFeatures {
        BoundFeatures { layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect() }
    }
}

impl ParamGroup for FeatureExtractor {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BoundFeatures {
    layers: Vec<BoundLinear>,
}

impl BoundFeatures {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let y = layer.forward(tape, h)?;
            h = tape.relu(y)?;
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Which output mapping a head applies to its logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Softmax over `|C^S| + 1` outputs; the last one is "unknown".
    Gc,
    /// Leaky softmax over `|C^S|` outputs.
    Gaux,
    /// Softmax over `|C^S|` outputs, CMMC classifier `k`.
    Gm(usize),
}

/// Single linear layer over the features plus an output mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub kind: HeadKind,
    pub linear: Linear,
}

impl Head {
    pub fn new(kind: HeadKind, feature_dim: usize, n_common: usize, rng: &mut Rng) -> Self {
        let out = match kind {
            HeadKind::Gc => n_common + 1,
            HeadKind::Gaux | HeadKind::Gm(_) => n_common,
        };
        Self { kind, linear: Linear::glorot(feature_dim, out, rng) }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundHead {
        BoundHead { kind: self.kind, linear: self.linear.bind(tape, trainable) }
    }
}

impl ParamGroup for Head {
    fn tensors(&self) -> Vec<&Tensor> {
        alloc::vec![&self.linear.weight, &self.linear.bias]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        alloc::vec![&mut self.linear.weight, &mut self.linear.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub kind: HeadKind,
    pub linear: BoundLinear,
}

impl BoundHead {
    pub fn logits(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.linear.forward(tape, z)
    }

    pub fn probs(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let l = self.logits(tape, z)?;
        match self.kind {
            HeadKind::Gc | HeadKind::Gm(_) => tape.softmax(l),
            HeadKind::Gaux => tape.leaky_softmax(l),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        alloc::vec![self.linear.weight, self.linear.bias]
    }
}

/// `F`, `G^C`, `G^aux` and the `m` CMMC classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub n_common: usize,
    pub feature: FeatureExtractor,
    pub gc: Head,
    pub gaux: Head,
    pub gm: Vec<Head>,
}

impl ModelBundle {
    /// Fresh initialization. `widths` runs from the input dimension to the
    /// feature dimension, e.g. `[d, 64, 32]`.
    pub fn new(widths: &[usize], n_common: usize, m: usize, rng: &mut Rng) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidConfig(alloc::format!("need at least 2 CMMC classifiers, got {m}")));
        }
        if n_common < 2 {
            return Err(Error::InvalidConfig(alloc::format!("need at least 2 common classes, got {n_common}")));
        }
        let feature = FeatureExtractor::new(widths, rng)?;
        let fd = feature.output_dim();
        let gc = Head::new(HeadKind::Gc, fd, n_common, rng);
        let gaux = Head::new(HeadKind::Gaux, fd, n_common, rng);
        let gm = (0..m).map(|k| Head::new(HeadKind::Gm(k), fd, n_common, rng)).collect();
        Ok(Self { n_common, feature, gc, gaux, gm })
    }

    /// Initialization drawn from the run seed's init stream.
    pub fn seeded(widths: &[usize], n_common: usize, m: usize, seed: u64) -> Result<Self> {
        Self::new(widths, n_common, m, &mut rng::stream(seed, rng::stream::INIT))
    }

    pub fn m(&self) -> usize {
        self.gm.len()
    }

    pub fn input_dim(&self) -> usize {
        self.feature.input_dim()
    }

    pub fn head(&self, k: usize) -> Result<&Head> {
        self.gm.get(k).ok_or(Error::ClassifierIndex { index: k, m: self.gm.len() })
    }

    /// Every parameter tensor in declaration order: `F`, `G^C`, `G^aux`, `G^M_1..m`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.feature.tensors();
        out.extend(self.gc.tensors());
        out.extend(self.gaux.tensors());
        for h in &self.gm {
            out.extend(h.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.feature.tensors_mut();
        out.extend(self.gc.tensors_mut());
        out.extend(self.gaux.tensors_mut());
        for h in &mut self.gm {
            out.extend(h.tensors_mut());
        }
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "model input",
                detail: alloc::format!("expected [n, {}], got {:?}", self.input_dim(), x.shape()),
            });
        }
        Ok(())
    }

    /// `z = F(x)` without recording gradients.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let f = self.feature.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = f.forward(&mut tape, xv)?;
        Ok(tape.value(z).clone())
    }

    fn head_probs(head: &Head, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = head.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let p = h.probs(&mut tape, zv)?;
        Ok(tape.value(p).clone())
    }

    /// `[n, |C^S| + 1]` probabilities of `G^C`; the last column is "unknown".
    pub fn gc_probs(&self, z: &Tensor) -> Result<Tensor> {
        Self::head_probs(&self.gc, z)
    }

    /// `[n, |C^S|]` leaky-softmax probabilities of `G^aux`.
    pub fn gaux_probs(&self, z: &Tensor) -> Result<Tensor> {
        Self::head_probs(&self.gaux, z)
    }

    /// `[n, |C^S|]` softmax probabilities of CMMC classifier `k`.
    pub fn gm_probs(&self, z: &Tensor, k: usize) -> Result<Tensor> {
        Self::head_probs(self.head(k)?, z)
    }

    pub fn gm_probs_all(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        self.gm.iter().map(|h| Self::head_probs(h, z)).collect()
    }

    /// `P1(x) * P2(x)` per sample.
    pub fn p_common(&self, x: &Tensor) -> Result<Vec<f64>> {
        let z = self.features(x)?;
        let gc = self.gc_probs(&z)?;
        let aux = self.gaux_probs(&z)?;
        Ok(gc.row_iter().zip(aux.row_iter()).map(|(a, b)| p_common(a, b, self.n_common)).collect())
    }
}

/// Common-class mass of a `G^C` probability row (all but the last entry).
pub fn common_mass(gc_row: &[f64], n_common: usize) -> f64 {
    gc_row[..n_common].iter().sum()
}

/// `P1 * P2` from one `G^C` row and one `G^aux` row.
pub fn p_common(gc_row: &[f64], gaux_row: &[f64], n_common: usize) -> f64 {
    common_mass(gc_row, n_common) * gaux_row.iter().sum::<f64>()
}

/// Index of the largest entry; first wins on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Input-jitter scale of classifier `k` out of `m`: `0.05 * k / (m - 1)`.
pub fn jitter_sigma(k: usize, m: usize) -> f64 {
    if m < 2 {
        return 0.0;
    }
    MAX_JITTER_SIGMA * k as f64 / (m - 1) as f64
}

/// Per-classifier additive Gaussian input noise, each with its own stream.
#[derive(Debug, Clone)]
pub struct JitterBank {
    enabled: bool,
    sigmas: Vec<f64>,
    streams: Vec<Rng>,
}

impl JitterBank {
    pub fn new(seed: u64, m: usize, enabled: bool) -> Self {
        Self {
            enabled,
            sigmas: (0..m).map(|k| jitter_sigma(k, m)).collect(),
            streams: (0..m).map(|k| rng::stream(seed, rng::stream::JITTER + k as u64)).collect(),
        }
    }

    pub fn disabled(m: usize) -> Self {
        Self::new(0, m, false)
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn sigma(&self, k: usize) -> f64 {
        if self.enabled {
            self.sigmas[k]
        } else {
            0.0
        }
    }

    /// `x` plus classifier `k`'s noise. Identity when disabled or `sigma = 0`.
    pub fn apply(&mut self, k: usize, x: &Tensor) -> Tensor {
        let sigma = self.sigma(k);
        if sigma == 0.0 {
            return x.clone();
        }
        let rng = &mut self.streams[k];
        let mut out = x.clone();
        for v in out.data_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += sigma * e;
        }
        out
    }
}
