//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and records its inputs, so node ids are
//! topologically ordered by construction. `backward` walks the nodes from the
//! loss down to id 0 and accumulates into each input in a fixed order.

use super::tensor::{gelu_grad_scalar, layer_norm_with_stats, softmax, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Tensor,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanStack(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Param | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Transpose(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::MeanRows(a)
            | Op::Sum(a) => vec![*a],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatRows(v) | Op::ConcatCols(v) | Op::MeanStack(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients indexed by node id; untouched nodes read as zeros.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Param, value, true);
        self.params.push(v);
        v
    }

    /// Leaf treated as data; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Ids of nodes that read `v` directly, ascending.
    pub fn consumers(&self, v: Var) -> Vec<Var> {
        (v.0 + 1..self.nodes.len())
            .filter(|&i| self.nodes[i].op.inputs().contains(&v))
            .map(Var)
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, needs_grad });
        Var(id)
    }

    fn push_op(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.push(op, value, needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(Op::MatMul(a, b), v))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push_op(Op::MatMulNt(a, b), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push_op(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push_op(Op::Mul(a, b), v))
    }

    /// Adds vector `b` to each row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let v = self.value(x).add_row(self.value(b))?;
        Ok(self.push_op(Op::AddRow(x, b), v))
    }

    /// `x · wᵀ + b` with `w` stored `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push_op(Op::Scale(a, c), v)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, normed, rstd) = layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push_op(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            out,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax(self.value(x));
        self.push_op(Op::Softmax(x), v)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = super::tensor::gelu(self.value(x));
        self.push_op(Op::Gelu(x), v)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transpose()?;
        Ok(self.push_op(Op::Transpose(x), v))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_rows(&values)?;
        Ok(self.push_op(Op::ConcatRows(parts.to_vec()), v))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::concat_cols(&values)?;
        Ok(self.push_op(Op::ConcatCols(parts.to_vec()), v))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_rows(start, len)?;
        Ok(self.push_op(Op::SliceRows(x, start), v))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_cols(start, len)?;
        Ok(self.push_op(Op::SliceCols(x, start), v))
    }

    /// Elementwise mean of equally shaped tensors (order-free, see
    /// [`mean_over_axis`](super::mean_over_axis)).
    pub fn mean_stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyAxis { op: "mean_stack" })?;
        let shape = self.shape(first).to_vec();
        for p in parts {
            if self.shape(*p) != shape.as_slice() {
                return Err(Error::shape("mean_stack", &shape, self.shape(*p)));
            }
        }
        let mut out = Tensor::zeros(&shape);
        let mut column = vec![0.0; parts.len()];
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            for (c, p) in column.iter_mut().zip(parts) {
                *c = self.nodes[p.0].value.data()[i];
            }
            *o = super::tensor::order_free_mean(&mut column);
        }
        Ok(self.push_op(Op::MeanStack(parts.to_vec()), out))
    }

    /// Mean over rows of a matrix, giving `[1 × d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] == 0 {
            return Err(Error::EmptyAxis { op: "mean_rows" });
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut acc = vec![0.0; d];
        for i in 0..n {
            for (a, v) in acc.iter_mut().zip(t.row(i)) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= n as f64;
        }
        let v = Tensor::new(vec![1, d], acc)?;
        Ok(self.push_op(Op::MeanRows(x), v))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push_op(Op::Sum(x), v)
    }

    /// Softmax cross-entropy of a logit row against a class index; returns a scalar.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let l = self.value(logits);
        if target >= l.len() {
            return Err(Error::shape("cross_entropy", l.shape(), &[target]));
        }
        let max = l.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = l.data().iter().map(|&v| libm::exp(v - max)).sum();
        let loss = libm::log(z) + max - l.data()[target];
        Ok(self.push_op(Op::CrossEntropy { logits, target }, Tensor::scalar(loss)))
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b))?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, column_sums(g));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let d = g.last_dim();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (grow, nrow) in g.data().chunks(d).zip(normed.data().chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * nrow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::vector(dg));
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, column_sums(g));
                }
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, nrow), &r) in g.data().chunks(d).zip(normed.data().chunks(d)).zip(rstd) {
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xh = 0.0;
                        for j in 0..d {
                            let dy = grow[j] * gam[j];
                            mean_dy += dy;
                            mean_dy_xh += dy * nrow[j];
                        }
                        mean_dy /= d as f64;
                        mean_dy_xh /= d as f64;
                        for j in 0..d {
                            let dy = grow[j] * gam[j];
                            dx.push(r * (dy - mean_dy - nrow[j] * mean_dy_xh));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), dx)?);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let d = y.last_dim();
                let mut dx = Vec::with_capacity(y.len());
                for (yrow, grow) in y.data().chunks(d).zip(g.data().chunks(d)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for (yy, gg) in yrow.iter().zip(grow) {
                        dx.push(yy * (gg - dot));
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = xv.zip_with(g, "gelu", |a, gg| gelu_grad_scalar(a) * gg)?;
                self.accumulate(grads, *x, dx);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.shape(*p)[0];
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.slice_rows(start, rows)?);
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = self.shape(*p)[1];
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.slice_cols(start, cols)?);
                    }
                    start += cols;
                }
            }
            Op::SliceRows(x, start) => {
                if self.wants(*x) {
                    let src = self.shape(*x);
                    let d = src[1];
                    let mut dx = Tensor::zeros(src);
                    dx.data_mut()[start * d..start * d + g.len()].copy_from_slice(g.data());
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SliceCols(x, start) => {
                if self.wants(*x) {
                    let src = self.shape(*x);
                    let (m, d) = (src[0], src[1]);
                    let w = g.last_dim();
                    let mut dx = Tensor::zeros(src);
                    for i in 0..m {
                        dx.data_mut()[i * d + start..i * d + start + w].copy_from_slice(g.row(i));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::MeanStack(parts) => {
                let share = g.scale(1.0 / parts.len() as f64);
                for p in parts {
                    self.accumulate(grads, *p, share.clone());
                }
            }
            Op::MeanRows(x) => {
                let src = self.shape(*x);
                let n = src[0];
                let mut dx = Vec::with_capacity(n * g.len());
                for _ in 0..n {
                    dx.extend(g.data().iter().map(|v| v / n as f64));
                }
                self.accumulate(grads, *x, Tensor::new(src.to_vec(), dx)?);
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::CrossEntropy { logits, target } => {
                let mut p = softmax(self.value(*logits));
                p.data_mut()[*target] -= 1.0;
                self.accumulate(grads, *logits, p.scale(g.item()));
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let d = g.last_dim();
    let mut out = vec![0.0; d];
    for row in g.data().chunks(d.max(1)) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::vector(out)
}
