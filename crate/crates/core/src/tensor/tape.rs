//! Reverse-mode tape.
//!
//! Values are pushed in evaluation order, so node indices are already a
//! topological order and backward is a single reverse sweep. A tape is
//! meant to live for one mini-batch: record, run `backward` once, collect
//! parameter gradients, drop.

use std::sync::Arc;

use super::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Generic dispatch over the elementary primitives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    ElementwiseMul,
    Sigmoid,
    Tanh,
    Relu,
    Concat,
    MeanRows,
    SumRows,
    Scale(f64),
}

impl OpKind {
    fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Concat => "concat",
            OpKind::MeanRows => "mean_rows",
            OpKind::SumRows => "sum_rows",
            OpKind::Scale(_) => "scale",
        }
    }
}

const COSINE_EPS: f64 = 1e-8;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        input: Var,
        start: usize,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    MeanRows(Var),
    SumRows(Var),
    SumAll(Var),
    Softmax(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Cosine {
        a: Var,
        b: Var,
        dot: f64,
        na: f64,
        nb: f64,
    },
    GraphMean {
        input: Var,
        neighbors: Arc<Vec<Vec<usize>>>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Records a leaf. It participates in backward iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad;
        let value = Tensor {
            grad: None,
            requires_grad: false,
            ..t
        };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Tensor {
            requires_grad: false,
            ..t
        })
    }

    /// Leaf for a stored parameter; repeated calls on one tape share a node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let idx = id.index();
        if let Some(Some(v)) = self.param_vars.get(idx) {
            return *v;
        }
        let var = self.leaf(params.get(id).clone());
        if self.param_vars.len() <= idx {
            self.param_vars.resize(idx + 1, None);
        }
        self.param_vars[idx] = Some(var);
        var
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if value.values().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteValue { op: op_name });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let unary = |inputs: &[Var]| -> Result<Var> {
            match inputs {
                [a] => Ok(*a),
                _ => Err(Error::invalid(
                    kind.name(),
                    format!("expected 1 input, got {}", inputs.len()),
                )),
            }
        };
        let binary = |inputs: &[Var]| -> Result<(Var, Var)> {
            match inputs {
                [a, b] => Ok((*a, *b)),
                _ => Err(Error::invalid(
                    kind.name(),
                    format!("expected 2 inputs, got {}", inputs.len()),
                )),
            }
        };
        match kind {
            OpKind::MatMul => {
                let (a, b) = binary(inputs)?;
                self.matmul(a, b)
            }
            OpKind::Add => {
                let (a, b) = binary(inputs)?;
                self.add(a, b)
            }
            OpKind::ElementwiseMul => {
                let (a, b) = binary(inputs)?;
                self.mul(a, b)
            }
            OpKind::Sigmoid => self.sigmoid(unary(inputs)?),
            OpKind::Tanh => self.tanh(unary(inputs)?),
            OpKind::Relu => self.relu(unary(inputs)?),
            OpKind::Concat => self.concat_cols(inputs),
            OpKind::MeanRows => self.mean_rows(unary(inputs)?),
            OpKind::SumRows => self.sum_rows(unary(inputs)?),
            OpKind::Scale(s) => self.scale(unary(inputs)?, s),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let out = matmul_raw(self.vals(a), self.vals(b), m, k, n);
        self.push(
            "matmul",
            Tensor::matrix(m, n, out)?,
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    /// Checks elementwise compatibility: equal dims, or `b` a single row
    /// broadcast over the rows of `a`.
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ca != cb || (rb != ra && rb != 1) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(rb != ra)
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let cols = self.dims(a).1;
        let bv = self.vals(b);
        let broadcast = bv.len() != self.vals(a).len();
        let values = self
            .vals(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = if broadcast { bv[i % cols] } else { bv[i] };
                f(x, y)
            })
            .collect();
        Tensor {
            shape: self.shape(a).to_vec(),
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let t = self.zip_broadcast(a, b, |x, y| x + y);
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let t = self.zip_broadcast(a, b, |x, y| x - y);
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product; `b` may be a single row broadcast over `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("elementwise_mul", a, b)?;
        let t = self.zip_broadcast(a, b, |x, y| x * y);
        self.push("elementwise_mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape("div", self.shape(a), self.shape(b)));
        }
        let t = self.zip_broadcast(a, b, |x, y| x / y);
        self.push("div", t, Op::Div(a, b), &[a, b])
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let t = Tensor {
            shape: src.shape().to_vec(),
            values: src.values().iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(name, t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map("scale", a, Op::Scale(a, s), |x| x * s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.map("log", a, Op::Log(a), f64::ln)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let src = self.vals(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(
            "transpose",
            Tensor::matrix(c, r, out)?,
            Op::Transpose(a),
            &[a],
        )
    }

    /// Side-by-side concatenation; all inputs must have the same row count.
    pub fn concat_cols(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let rows = self.dims(first).0;
        for &v in &inputs[1..] {
            if self.dims(v).0 != rows {
                return Err(Error::shape("concat", self.shape(first), self.shape(v)));
            }
        }
        let total: usize = inputs.iter().map(|&v| self.dims(v).1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in inputs {
                out.extend_from_slice(self.nodes[v.0].value.row(r));
            }
        }
        self.push(
            "concat",
            Tensor::matrix(rows, total, out)?,
            Op::ConcatCols(inputs.to_vec()),
            inputs,
        )
    }

    /// Stacks inputs vertically; all inputs must have the same column count.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let cols = self.dims(first).1;
        for &v in &inputs[1..] {
            if self.dims(v).1 != cols {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(v),
                ));
            }
        }
        let rows: usize = inputs.iter().map(|&v| self.dims(v).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &v in inputs {
            out.extend_from_slice(self.vals(v));
        }
        self.push(
            "concat_rows",
            Tensor::matrix(rows, cols, out)?,
            Op::ConcatRows(inputs.to_vec()),
            inputs,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > c {
            return Err(Error::invalid(
                "slice_cols",
                format!(
                    "columns {start}..{} out of range for {:?}",
                    start + len,
                    self.shape(a)
                ),
            ));
        }
        let src = self.vals(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(
            "slice_cols",
            Tensor::matrix(r, len, out)?,
            Op::SliceCols { input: a, start },
            &[a],
        )
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if rows.is_empty() {
            return Err(Error::invalid("gather_rows", "no rows requested"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for {:?}", self.shape(a)),
            ));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(self.nodes[a.0].value.row(i));
        }
        self.push(
            "gather_rows",
            Tensor::matrix(rows.len(), c, out)?,
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
            &[a],
        )
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        self.gather_rows(a, &[row])
    }

    fn column_reduce(&self, a: Var, f: impl Fn(f64, f64) -> f64, init: f64) -> Vec<f64> {
        let (r, c) = self.dims(a);
        let src = self.vals(a);
        let mut out = vec![init; c];
        for i in 0..r {
            for j in 0..c {
                out[j] = f(out[j], src[i * c + j]);
            }
        }
        out
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.column_reduce(a, |acc, x| acc + x, 0.0);
        let c = out.len();
        self.push("sum_rows", Tensor::matrix(1, c, out)?, Op::SumRows(a), &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let r = self.dims(a).0 as f64;
        let out: Vec<f64> = self
            .column_reduce(a, |acc, x| acc + x, 0.0)
            .into_iter()
            .map(|s| s / r)
            .collect();
        let c = out.len();
        self.push(
            "mean_rows",
            Tensor::matrix(1, c, out)?,
            Op::MeanRows(a),
            &[a],
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.vals(a).iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    /// Softmax over all entries of a row or column vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r != 1 && c != 1 {
            return Err(Error::invalid(
                "softmax",
                format!("expected a vector, got {:?}", self.shape(a)),
            ));
        }
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            values: softmax_raw(self.vals(a)),
            requires_grad: false,
            grad: None,
        };
        self.push("softmax", t, Op::Softmax(a), &[a])
    }

    /// Column-wise maximum over the rows whose mask entry is true. Ties go to
    /// the first maximal row, which also receives the gradient.
    pub fn masked_max_pool(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if mask.len() != r {
            return Err(Error::invalid(
                "masked_max_pool",
                format!("mask length {} does not match {} rows", mask.len(), r),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid("masked_max_pool", "every row is masked out"));
        }
        let src = self.vals(a);
        let mut best = vec![f64::NEG_INFINITY; c];
        let mut argmax = vec![0usize; c];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for j in 0..c {
                let x = src[i * c + j];
                if x > best[j] {
                    best[j] = x;
                    argmax[j] = i;
                }
            }
        }
        self.push(
            "masked_max_pool",
            Tensor::matrix(1, c, best)?,
            Op::MaxPool { input: a, argmax },
            &[a],
        )
    }

    pub fn max_pool_rows(&mut self, a: Var) -> Result<Var> {
        let r = self.dims(a).0;
        self.masked_max_pool(a, &vec![true; r])
    }

    /// `dot(a, b) / (|a| |b| + 1e-8)` over flattened inputs of equal length.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.vals(a).len() != self.vals(b).len() {
            return Err(Error::shape("cosine", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.vals(a), self.vals(b));
        let dot: f64 = av.iter().zip(bv).map(|(x, y)| x * y).sum();
        let na = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let value = dot / (na * nb + COSINE_EPS);
        self.push(
            "cosine",
            Tensor::scalar(value),
            Op::Cosine { a, b, dot, na, nb },
            &[a, b],
        )
    }

    /// Row `i` of the result is the mean of the rows of `a` listed in
    /// `neighbors[i]`.
    pub fn graph_mean(&mut self, a: Var, neighbors: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if neighbors.len() != r {
            return Err(Error::invalid(
                "graph_mean",
                format!(
                    "graph has {} nodes but input has {} rows",
                    neighbors.len(),
                    r
                ),
            ));
        }
        let src = self.vals(a);
        let mut out = vec![0.0; r * c];
        for (i, nbrs) in neighbors.iter().enumerate() {
            if nbrs.is_empty() || nbrs.iter().any(|&j| j >= r) {
                return Err(Error::invalid(
                    "graph_mean",
                    format!("invalid neighborhood for node {i}"),
                ));
            }
            let inv = 1.0 / nbrs.len() as f64;
            let dst = &mut out[i * c..(i + 1) * c];
            for &j in nbrs {
                for (d, s) in dst.iter_mut().zip(&src[j * c..(j + 1) * c]) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        self.push(
            "graph_mean",
            Tensor::matrix(r, c, out)?,
            Op::GraphMean {
                input: a,
                neighbors,
            },
            &[a],
        )
    }

    /// `-log softmax(logits)[target]`, computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.vals(logits);
        if target >= z.len() {
            return Err(Error::invalid(
                "cross_entropy",
                format!("target {target} out of range for {} classes", z.len()),
            ));
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        let probs = softmax_raw(z);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            &[logits],
        )
    }

    /// Populates gradients of `loss` for every tracked node. Allowed once per
    /// tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!(
                    "loss must be a scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            propagate(&self.nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Writes the gradient of every trainable parameter into `params`.
    /// Parameters the loss never reached receive zeros.
    pub fn collect_param_grads(&self, params: &mut ParamSet) -> Result<()> {
        if !self.consumed {
            return Err(Error::invalid(
                "collect_param_grads",
                "backward has not run",
            ));
        }
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let t = params.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            let g = self
                .param_vars
                .get(id.index())
                .copied()
                .flatten()
                .and_then(|v| self.grads[v.0].clone())
                .unwrap_or_else(|| vec![0.0; t.len()]);
            t.grad = Some(g);
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_raw(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
    out
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].tracked {
        return;
    }
    let len = nodes[v.0].value.len();
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Adds `g` (shaped like `a`) into the gradient of a broadcast operand `b`,
/// summing over rows when `b` is a single row.
fn reduce_into(dst: &mut [f64], g: &[f64], scale: impl Fn(usize) -> f64) {
    let c = dst.len();
    for (i, gi) in g.iter().enumerate() {
        dst[i % c] += gi * scale(i);
    }
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let out = node.value.values();
    let val = |v: Var| nodes[v.0].value.values();
    let dims = |v: Var| (nodes[v.0].value.rows(), nodes[v.0].value.cols());
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = dims(*a);
            let n = dims(*b).1;
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |da| {
                for r in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for c in 0..n {
                            s += g[r * n + c] * bv[p * n + c];
                        }
                        da[r * k + p] += s;
                    }
                }
            });
            accumulate(nodes, grads, *b, |db| {
                for r in 0..m {
                    for p in 0..k {
                        let x = av[r * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for c in 0..n {
                            db[p * n + c] += x * g[r * n + c];
                        }
                    }
                }
            });
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) {
                -1.0
            } else {
                1.0
            };
            accumulate(nodes, grads, *a, |da| {
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x)
            });
            accumulate(nodes, grads, *b, |db| reduce_into(db, g, |_| sign));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let cb = bv.len();
            accumulate(nodes, grads, *a, |da| {
                for (j, d) in da.iter_mut().enumerate() {
                    *d += g[j] * bv[j % cb];
                }
            });
            accumulate(nodes, grads, *b, |db| reduce_into(db, g, |j| av[j]));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |da| {
                for j in 0..da.len() {
                    da[j] += g[j] / bv[j];
                }
            });
            accumulate(nodes, grads, *b, |db| {
                for j in 0..db.len() {
                    db[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                }
            });
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, |da| {
            da.iter_mut().zip(g).for_each(|(d, x)| *d += s * x)
        }),
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, |da| {
            for j in 0..da.len() {
                da[j] += g[j] * out[j] * (1.0 - out[j]);
            }
        }),
        Op::Tanh(a) => accumulate(nodes, grads, *a, |da| {
            for j in 0..da.len() {
                da[j] += g[j] * (1.0 - out[j] * out[j]);
            }
        }),
        Op::Relu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, |da| {
                for j in 0..da.len() {
                    if av[j] > 0.0 {
                        da[j] += g[j];
                    }
                }
            })
        }
        Op::Log(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, |da| {
                for j in 0..da.len() {
                    da[j] += g[j] / av[j];
                }
            })
        }
        Op::Transpose(a) => {
            let (r, c) = dims(*a);
            accumulate(nodes, grads, *a, |da| {
                for x in 0..r {
                    for y in 0..c {
                        da[x * c + y] += g[y * r + x];
                    }
                }
            })
        }
        Op::ConcatCols(inputs) => {
            let total = node.value.cols();
            let rows = node.value.rows();
            let mut offset = 0;
            for &v in inputs {
                let c = dims(v).1;
                accumulate(nodes, grads, v, |dv| {
                    for r in 0..rows {
                        for j in 0..c {
                            dv[r * c + j] += g[r * total + offset + j];
                        }
                    }
                });
                offset += c;
            }
        }
        Op::ConcatRows(inputs) => {
            let mut offset = 0;
            for &v in inputs {
                let len = val(v).len();
                accumulate(nodes, grads, v, |dv| {
                    dv.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(d, x)| *d += x)
                });
                offset += len;
            }
        }
        Op::SliceCols { input, start } => {
            let c = dims(*input).1;
            let len = node.value.cols();
            accumulate(nodes, grads, *input, |di| {
                for r in 0..node.value.rows() {
                    for j in 0..len {
                        di[r * c + start + j] += g[r * len + j];
                    }
                }
            })
        }
        Op::GatherRows { input, rows } => {
            let c = dims(*input).1;
            accumulate(nodes, grads, *input, |di| {
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        di[r * c + j] += g[k * c + j];
                    }
                }
            })
        }
        Op::SumRows(a) | Op::MeanRows(a) => {
            let r = dims(*a).0;
            let s = if matches!(node.op, Op::MeanRows(_)) {
                1.0 / r as f64
            } else {
                1.0
            };
            accumulate(nodes, grads, *a, |da| {
                let c = g.len();
                for (j, d) in da.iter_mut().enumerate() {
                    *d += s * g[j % c];
                }
            })
        }
        Op::SumAll(a) => accumulate(nodes, grads, *a, |da| {
            da.iter_mut().for_each(|d| *d += g[0])
        }),
        Op::Softmax(a) => {
            let dot: f64 = g.iter().zip(out).map(|(x, y)| x * y).sum();
            accumulate(nodes, grads, *a, |da| {
                for j in 0..da.len() {
                    da[j] += out[j] * (g[j] - dot);
                }
            })
        }
        Op::MaxPool { input, argmax } => {
            let c = argmax.len();
            accumulate(nodes, grads, *input, |di| {
                for (j, &r) in argmax.iter().enumerate() {
                    di[r * c + j] += g[j];
                }
            })
        }
        Op::Cosine { a, b, dot, na, nb } => {
            let denom = na * nb + COSINE_EPS;
            let (av, bv) = (val(*a), val(*b));
            let g0 = g[0];
            // d/da [dot / (|a||b| + eps)] = b/D - dot * |b| * (a/|a|) / D^2
            let side = |x: &[f64], y: &[f64], nx: f64, ny: f64, d: &mut [f64]| {
                for j in 0..d.len() {
                    let mut v = y[j] / denom;
                    if nx > 0.0 {
                        v -= dot * ny * x[j] / (nx * denom * denom);
                    }
                    d[j] += g0 * v;
                }
            };
            accumulate(nodes, grads, *a, |da| side(av, bv, *na, *nb, da));
            accumulate(nodes, grads, *b, |db| side(bv, av, *nb, *na, db));
        }
        Op::GraphMean { input, neighbors } => {
            let c = dims(*input).1;
            accumulate(nodes, grads, *input, |di| {
                for (r, nbrs) in neighbors.iter().enumerate() {
                    let inv = 1.0 / nbrs.len() as f64;
                    for &j in nbrs {
                        for k in 0..c {
                            di[j * c + k] += g[r * c + k] * inv;
                        }
                    }
                }
            })
        }
        Op::CrossEntropy {
            logits,
            target,
            probs,
        } => accumulate(nodes, grads, *logits, |dl| {
            for (j, d) in dl.iter_mut().enumerate() {
                let onehot = if j == *target { 1.0 } else { 0.0 };
                *d += g[0] * (probs[j] - onehot);
            }
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape, v: &[f64]) -> Var {
        tape.leaf(Tensor::vector(v.to_vec()).unwrap().with_grad())
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![3]).unwrap());
        let y = tape.forward_op(OpKind::Sigmoid, &[x]).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.forward_op(OpKind::Relu, &[x]).unwrap();
        assert_eq!(tape.value(y).values(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_of_ones_gives_row_sums() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(3, 1, vec![1.0; 3]).unwrap());
        let c = tape.forward_op(OpKind::MatMul, &[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).values(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_kind_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
        let err = tape.forward_op(OpKind::Add, &[a]).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        for p in tape.value(y).values() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y).values();
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!((0.0..1e-300).contains(&v[1]));
    }

    #[test]
    fn softmax_matches_extended_precision_oracle() {
        // exp(0) / (1 + 2 exp(-1)) evaluated with a long-series exp at 1e-30 precision.
        fn exp_series(x: f64) -> f64 {
            let mut term = 1.0f64;
            let mut sum = 1.0f64;
            for k in 1..60 {
                term *= x / k as f64;
                sum += term;
            }
            sum
        }
        let e1 = exp_series(-1.0);
        let expected = [
            1.0 / (1.0 + 2.0 * e1),
            e1 / (1.0 + 2.0 * e1),
            e1 / (1.0 + 2.0 * e1),
        ];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, -1.0, -1.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        for (p, e) in tape.value(y).values().iter().zip(expected) {
            assert!((p - e).abs() < 1e-12);
        }
        assert!((expected[0] - 0.5761).abs() < 1e-4);
        assert!((expected[1] - 0.2119).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_matrices() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(tape.softmax(x).is_err());
    }

    #[test]
    fn masked_max_pool_examples() {
        let mut tape = Tape::new();
        let rows = tape.constant(Tensor::matrix(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let all = tape.masked_max_pool(rows, &[true, true]).unwrap();
        assert_eq!(tape.value(all).values(), &[3.0, 5.0]);
        let first = tape.masked_max_pool(rows, &[true, false]).unwrap();
        assert_eq!(tape.value(first).values(), &[1.0, 5.0]);
        let single = tape.constant(Tensor::matrix(1, 1, vec![7.0]).unwrap());
        let p = tape.max_pool_rows(single).unwrap();
        assert_eq!(tape.value(p).values(), &[7.0]);
        assert!(tape.masked_max_pool(rows, &[false, false]).is_err());
    }

    #[test]
    fn max_pool_ties_route_gradient_to_first_row() {
        let mut tape = Tape::new();
        let rows = tape.leaf(
            Tensor::matrix(3, 1, vec![2.0, 2.0, 1.0])
                .unwrap()
                .with_grad(),
        );
        let p = tape.max_pool_rows(rows).unwrap();
        let s = tape.sum_all(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(rows).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::new();
        let cases = [
            ([1.0, 0.0], [0.0, 1.0], 0.0),
            ([1.0, 1.0], [2.0, 2.0], 1.0),
            ([1.0, 0.0], [-1.0, 0.0], -1.0),
        ];
        for (u, v, want) in cases {
            let a = tape.constant(Tensor::vector(u.to_vec()).unwrap());
            let b = tape.constant(Tensor::vector(v.to_vec()).unwrap());
            let c = tape.cosine(a, b).unwrap();
            assert!((tape.scalar(c) - want).abs() < 1e-7);
        }
        let z = tape.constant(Tensor::zeros(vec![2]).unwrap());
        let c = tape.cosine(z, z).unwrap();
        assert_eq!(tape.scalar(c), 0.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = vec_leaf(&mut tape, &[0.3, -2.0, 4.0]);
        let s = tape.sum_all(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_through_sigmoid_times_weight() {
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(zero).unwrap();
        let w = tape.leaf(Tensor::scalar(1.7).with_grad());
        let loss = tape.mul(s, w).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.5]);
    }

    #[test]
    fn disconnected_parameter_gets_zero_grad() {
        let mut params = ParamSet::new();
        let used = params.add("used", Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad());
        let unused = params.add("unused", Tensor::vector(vec![3.0]).unwrap().with_grad());
        let mut tape = Tape::new();
        let u = tape.param(&params, used);
        let loss = tape.sum_all(u).unwrap();
        tape.backward(loss).unwrap();
        tape.collect_param_grads(&mut params).unwrap();
        assert_eq!(params.get(used).grad.as_deref(), Some(&[1.0, 1.0][..]));
        assert_eq!(params.get(unused).grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_run() {
        let mut tape = Tape::new();
        let w = vec_leaf(&mut tape, &[1.0, 2.0]);
        assert!(tape.backward(w).is_err());
        let s = tape.sum_all(w).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));

        // re-recording on a fresh tape works
        let mut tape = Tape::new();
        let w = vec_leaf(&mut tape, &[1.0, 2.0]);
        let s = tape.sum_all(w).unwrap();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn untracked_values_are_not_recorded_for_backward() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = tape.relu(a).unwrap();
        assert!(!tape.requires_grad(b));
        let w = vec_leaf(&mut tape, &[1.0, 1.0]);
        let c = tape.mul(b, w).unwrap();
        assert!(tape.requires_grad(c));
    }

    #[test]
    fn log_of_zero_is_rejected_as_non_finite() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.0]).unwrap());
        assert!(matches!(tape.log(a), Err(Error::NonFiniteValue { .. })));
    }

    #[test]
    fn row_broadcast_add_and_mul() {
        let mut tape = Tape::new();
        let a = tape.leaf(
            Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0])
                .unwrap()
                .with_grad(),
        );
        let b = tape.leaf(Tensor::vector(vec![10.0, 20.0]).unwrap().with_grad());
        let c = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(c).values(), &[10.0, 40.0, 30.0, 80.0]);
        let s = tape.sum_all(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 6.0]);
        assert_eq!(tape.grad(a).unwrap(), &[10.0, 20.0, 10.0, 20.0]);
    }
}
