//! Matrix-valued reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so walking the node list
//! backwards from the output is a reverse topological order and each node is
//! visited once. Leaves created with [`Tape::constant`] never receive
//! adjoints; everything derived only from constants is skipped as well.

use alloc::vec;
use alloc::vec::Vec;

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Tanh(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    HCat(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by a backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Matrix {
        match self.adjoints.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.adjoints.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `a + bias` with a `1 x cols` bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row_broadcast(self.value(bias))?;
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push(value, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.needs(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(silu);
        let rg = self.needs(a);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(libm::tanh);
        let rg = self.needs(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let rg = self.needs(a);
        self.push(value, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.needs(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let value = Matrix::scalar(self.value(a).sum() / n);
        let rg = self.needs(a);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hcat(&mats)?;
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::HCat(parts.to_vec()), rg))
    }

    /// Row lookup (embedding table gather).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Range { what: "gather row", value: bad, lo: 0, hi: t.rows().saturating_sub(1) });
        }
        let value = t.select_rows(idx);
        let rg = self.needs(table);
        Ok(self.push(value, Op::GatherRows(table, idx.to_vec()), rg))
    }

    /// Mean softmax cross-entropy of `logits` (n x C) against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if labels.len() != l.rows() {
            return Err(Error::Dimension { op: "cross_entropy", expected: (l.rows(), 1), got: (labels.len(), 1) });
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= l.cols()) {
            return Err(Error::Range { what: "class label", value: bad, lo: 0, hi: l.cols().saturating_sub(1) });
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = l.row(r);
            total += log_sum_exp(row) - row[y];
        }
        let value = Matrix::scalar(total / labels.len().max(1) as f64);
        let rg = self.needs(logits);
        Ok(self.push(value, Op::CrossEntropy(logits, labels.to_vec()), rg))
    }

    /// Gradients of a scalar `output` with respect to each of `inputs`.
    pub fn grad(&self, output: Var, inputs: &[Var]) -> Result<Vec<Matrix>> {
        if self.value(output).shape() != (1, 1) {
            return Err(Error::contract("gradient output must be a 1x1 scalar node"));
        }
        let grads = self.backward(output, Matrix::scalar(1.0))?;
        Ok(inputs.iter().map(|&v| grads.get(v)).collect())
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// back to every differentiable node.
    pub fn backward(&self, output: Var, seed: Matrix) -> Result<Gradients> {
        self.value(output).ensure_same_shape("backward seed", &seed)?;
        let n = output.0 + 1;
        let mut adj: Vec<Option<Matrix>> = vec![None; n];
        adj[output.0] = Some(seed);

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_t(self.value(*b))?;
                        accumulate(&mut adj, *a, ga)?;
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t_matmul(&g)?;
                        accumulate(&mut adj, *b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g.clone())?;
                    }
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g.scale(-1.0))?;
                    }
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.hadamard(self.value(*b))?;
                        accumulate(&mut adj, *a, ga)?;
                    }
                    if self.needs(*b) {
                        let gb = g.hadamard(self.value(*a))?;
                        accumulate(&mut adj, *b, gb)?;
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs(*bias) {
                        accumulate(&mut adj, *bias, g.sum_rows())?;
                    }
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g)?;
                    }
                }
                Op::Scale(a, s) => accumulate(&mut adj, *a, g.scale(*s))?,
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, &xv) in ga.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        *gv *= silu_grad(xv);
                    }
                    accumulate(&mut adj, *a, ga)?;
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (gv, &yv) in ga.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *gv *= 1.0 - yv * yv;
                    }
                    accumulate(&mut adj, *a, ga)?;
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    for (gv, &xv) in ga.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        *gv *= 2.0 * xv;
                    }
                    accumulate(&mut adj, *a, ga)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut adj, *a, Matrix::filled(r, c, g.as_slice()[0]))?;
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let s = g.as_slice()[0] / (r * c).max(1) as f64;
                    accumulate(&mut adj, *a, Matrix::filled(r, c, s))?;
                }
                Op::HCat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.needs(p) {
                            accumulate(&mut adj, p, g.slice_cols(start, start + w))?;
                        }
                        start += w;
                    }
                }
                Op::GatherRows(table, idx) => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, &v) in gt.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adj, *table, gt)?;
                }
                Op::CrossEntropy(logits, labels) => {
                    let l = self.value(*logits);
                    let scale = g.as_slice()[0] / labels.len().max(1) as f64;
                    let mut gl = Matrix::zeros(l.rows(), l.cols());
                    for (r, &y) in labels.iter().enumerate() {
                        let row = l.row(r);
                        let lse = log_sum_exp(row);
                        for (c, o) in gl.row_mut(r).iter_mut().enumerate() {
                            let p = libm::exp(row[c] - lse);
                            *o = scale * (p - if c == y { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut adj, *logits, gl)?;
                }
            }
        }

        let mut shapes: Vec<(usize, usize)> = self.nodes.iter().map(|n| n.value.shape()).collect();
        shapes.truncate(n);
        Ok(Gradients { adjoints: adj, shapes })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut adj[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>())
}
