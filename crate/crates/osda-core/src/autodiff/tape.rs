use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::svd;
use super::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LeakySoftmax(Var),
    Columns(Var, usize, usize),
    SumRows(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    GradReverse(Var, f64),
    StopGradient(Var),
    // Cached U V^T of the input.
    NuclearNorm(Var, Vec<f64>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Ln(..) => "ln",
            Op::Clamp(..) => "clamp",
            Op::Softmax(..) => "softmax",
            Op::LeakySoftmax(..) => "leaky_softmax",
            Op::Columns(..) => "columns",
            Op::SumRows(..) => "sum_rows",
            Op::Gather(..) => "gather",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::GradReverse(..) => "gradient_reversal",
            Op::StopGradient(..) => "stop_gradient",
            Op::NuclearNorm(..) => "nuclear_norm",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Ln(a)
            | Op::Clamp(a, ..)
            | Op::Softmax(a)
            | Op::LeakySoftmax(a)
            | Op::Columns(a, ..)
            | Op::SumRows(a)
            | Op::Gather(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::GradReverse(a, _)
            | Op::StopGradient(a)
            | Op::NuclearNorm(a, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Inputs always precede the nodes that consume them, so node order is a
/// topological order and [`Tape::backward`] is a single reverse sweep.
/// Gradients accumulate across `backward` calls until [`Tape::zero_grad`].
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input. `requires_grad` marks trainable parameters.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient or zeros of the value's shape.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        let node = self.nodes.len();
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name(), node });
        }
        let requires_grad = match op {
            Op::StopGradient(_) | Op::Leaf => false,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { op, value, requires_grad });
        self.grads.push(None);
        Ok(Var(node))
    }

    fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
        Error::Shape { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) }
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(Error::Shape { op, detail: format!("expected rank 2, got {s:?}") });
        }
        Ok((s[0], s[1]))
    }

    /// `[n, k] x [k, m] -> [n, m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix("matmul", a)?;
        let (k2, m) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Self::shape_err("matmul", self.value(a), self.value(b)));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push(Op::MatMul(a, b), Tensor::new(vec![n, m], out)?)
    }

    /// Adds a length-`m` bias to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, m) = self.matrix("add_bias", x)?;
        if self.value(bias).shape() != [m] {
            return Err(Self::shape_err("add_bias", self.value(x), self.value(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        self.push(Op::AddBias(x, bias), out)
    }

    fn elementwise(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Self::shape_err(op.name(), ta, tb));
        }
        let out = ta.zip_map(tb, f);
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| c * v);
        self.push(Op::Scale(x, c), out)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar(x), out)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let n = self.neg(x)?;
        self.add_scalar(n, 1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), out)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(libm::log);
        self.push(Op::Ln(x), out)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(x, lo, hi), out)
    }

    /// Row-wise softmax of an `[n, c]` logit matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.matrix("softmax", x)?;
        let mut out = Vec::with_capacity(n * c);
        for row in self.value(x).row_iter() {
            out.extend(softmax(row));
        }
        self.push(Op::Softmax(x), Tensor::new(vec![n, c], out)?)
    }

    /// Row-wise leaky softmax: `exp(l_c) / (C + sum_j exp(l_j))`.
    pub fn leaky_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.matrix("leaky_softmax", x)?;
        let mut out = Vec::with_capacity(n * c);
        for row in self.value(x).row_iter() {
            out.extend(leaky_softmax(row));
        }
        self.push(Op::LeakySoftmax(x), Tensor::new(vec![n, c], out)?)
    }

    /// Columns `start..end` of an `[n, m]` matrix.
    pub fn columns(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.matrix("columns", x)?;
        if start >= end || end > m {
            return Err(Error::Shape { op: "columns", detail: format!("range {start}..{end} of {m} columns") });
        }
        let mut out = Vec::with_capacity(n * (end - start));
        for row in self.value(x).row_iter() {
            out.extend_from_slice(&row[start..end]);
        }
        self.push(Op::Columns(x, start, end), Tensor::new(vec![n, end - start], out)?)
    }

    /// Column `j` of an `[n, m]` matrix as a length-`n` vector.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let c = self.columns(x, j, j + 1)?;
        self.sum_rows(c)
    }

    /// `[n, m] -> [n]`
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (n, _) = self.matrix("sum_rows", x)?;
        let out: Vec<f64> = self.value(x).row_iter().map(|r| r.iter().sum()).collect();
        self.push(Op::SumRows(x), Tensor::new(vec![n], out)?)
    }

    /// Picks `x[i, index[i]]` for every row.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, m) = self.matrix("gather", x)?;
        if index.len() != n {
            return Err(Error::Shape { op: "gather", detail: format!("{} indices for {n} rows", index.len()) });
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= m) {
            return Err(Error::LabelOutOfRange { label: bad, classes: m });
        }
        let t = self.value(x);
        let out: Vec<f64> = index.iter().enumerate().map(|(i, &j)| t.data()[i * m + j]).collect();
        self.push(Op::Gather(x, index.to_vec()), Tensor::new(vec![n], out)?)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::EmptyBatch("mean"));
        }
        let s = t.sum() / t.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    /// Identity forward; multiplies the upstream gradient by `-coeff`.
    pub fn gradient_reversal(&mut self, x: Var, coeff: f64) -> Result<Var> {
        if !(coeff > 0.0) {
            return Err(Error::InvalidArgument(format!("gradient reversal coefficient must be > 0, got {coeff}")));
        }
        let out = self.value(x).clone();
        self.push(Op::GradReverse(x, coeff), out)
    }

    /// Identity forward; nothing flows back into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).clone();
        self.push(Op::StopGradient(x), out)
    }

    /// Sum of singular values of an `[n, m]` matrix.
    pub fn nuclear_norm(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.matrix("nuclear_norm", x)?;
        let s = svd::svd(self.value(x).data(), n, m)?;
        let total: f64 = s.sigma.iter().sum();
        self.push(Op::NuclearNorm(x, s.polar_factor()), Tensor::scalar(total))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node with `requires_grad` that the loss depends on (including
    /// through stop-gradient edges) ends up with a gradient, zero if nothing
    /// flowed back to it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut local: Vec<Option<Tensor>> = vec![None; n];
        let mut reachable = vec![false; n];
        reachable[loss.0] = true;
        local[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..n).rev() {
            if !reachable[i] {
                continue;
            }
            let inputs = self.nodes[i].op.inputs();
            for v in &inputs {
                reachable[v.0] = true;
            }
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = local[i].take() else { continue };
            for (input, contrib) in self.input_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if !contrib.all_finite() {
                    return Err(Error::NonFiniteGrad { op: self.nodes[i].op.name(), node: i });
                }
                match &mut local[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            local[i] = Some(g);
        }

        for i in 0..n {
            if !(reachable[i] && self.nodes[i].requires_grad) {
                continue;
            }
            let g = local[i].take().unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape()));
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf | Op::StopGradient(_) => Vec::new(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut ga = vec![0.0; n * k];
                let mut gb = vec![0.0; k * m];
                let (ad, bd, gd) = (ta.data(), tb.data(), g.data());
                for r in 0..n {
                    for j in 0..m {
                        let gv = gd[r * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for t in 0..k {
                            ga[r * k + t] += gv * bd[t * m + j];
                            gb[t * m + j] += ad[r * k + t] * gv;
                        }
                    }
                }
                vec![(*a, Tensor::new(vec![n, k], ga)?), (*b, Tensor::new(vec![k, m], gb)?)]
            }
            Op::AddBias(x, b) => {
                let m = val(*b).len();
                let mut gb = vec![0.0; m];
                for row in g.row_iter() {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::vector(gb))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![(*a, g.zip_map(val(*b), |x, y| x * y)), (*b, g.zip_map(val(*a), |x, y| x * y))],
            Op::Scale(x, c) => vec![(*x, g.map(|v| c * v))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Relu(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }))],
            Op::Ln(x) => vec![(*x, g.zip_map(val(*x), |gv, xv| gv / xv))],
            Op::Clamp(x, lo, hi) => {
                vec![(*x, g.zip_map(val(*x), |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 }))]
            }
            Op::Softmax(x) | Op::LeakySoftmax(x) => {
                // Both maps share the Jacobian diag(p) - p p^T.
                let p = &node.value;
                let c = p.cols();
                let mut gx = Vec::with_capacity(p.len());
                for (pr, gr) in p.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(pr.iter().zip(gr).map(|(pv, gv)| pv * (gv - dot)));
                }
                vec![(*x, Tensor::new(p.shape().to_vec(), gx)?)]
            }
            Op::Columns(x, start, end) => {
                let t = val(*x);
                let m = t.cols();
                let w = end - start;
                let mut gx = Tensor::zeros(t.shape());
                for (r, gr) in g.data().chunks(w).enumerate() {
                    gx.data_mut()[r * m + start..r * m + end].copy_from_slice(gr);
                }
                vec![(*x, gx)]
            }
            Op::SumRows(x) => {
                let t = val(*x);
                let m = t.cols();
                let mut gx = Tensor::zeros(t.shape());
                for (r, row) in gx.data_mut().chunks_mut(m).enumerate() {
                    row.iter_mut().for_each(|v| *v = g.data()[r]);
                }
                vec![(*x, gx)]
            }
            Op::Gather(x, index) => {
                let t = val(*x);
                let m = t.cols();
                let mut gx = Tensor::zeros(t.shape());
                for (r, &j) in index.iter().enumerate() {
                    gx.data_mut()[r * m + j] += g.data()[r];
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let t = val(*x);
                vec![(*x, Tensor::full(t.shape(), g.item() / t.len() as f64))]
            }
            Op::GradReverse(x, c) => vec![(*x, g.map(|v| -c * v))],
            Op::NuclearNorm(x, polar) => {
                let gv = g.item();
                let data = polar.iter().map(|p| gv * p).collect();
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), data)?)]
            }
        };
        Ok(out)
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for t in 0..k {
            let av = a[r * k + t];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[t * m..(t + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `exp(l_c) / (C + sum_j exp(l_j))` with `C = logits.len()`.
///
/// The constant `C` behaves like `C` extra zero logits, so the components sum
/// to strictly less than one.
pub fn leaky_softmax(logits: &[f64]) -> Vec<f64> {
    let c = logits.len() as f64;
    let max = logits.iter().copied().fold(0.0, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let z = c * libm::exp(-max) + exps.iter().sum::<f64>();
    exps.into_iter().map(|e| e / z).collect()
}
