//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! A [`Graph`] records every operation in creation order, which is always a
//! valid topological order. [`Graph::backward`] walks the tape in reverse from
//! a scalar root.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, matmul_tn, Array};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m×k] · [k×n]`.
    MatMul,
    /// Elementwise sum; the right operand may be a row vector or a scalar broadcast over the left.
    Add,
    /// Elementwise product with the same broadcasting as `Add`.
    Mul,
    Scale(f64),
    Relu,
    Mean,
    Sum,
    Exp,
    Log,
    SoftmaxRows,
    LogSoftmaxRows,
    L2NormalizeRows,
    ConcatRows,
    SliceRows {
        start: usize,
        end: usize,
    },
    Transpose,
    /// `out[i] = input[indices[i]]` over flat storage, reshaped to `shape`.
    Gather {
        indices: Vec<usize>,
        shape: Vec<usize>,
    },
    /// Per-column standardization with biased batch moments.
    BatchNorm {
        eps: f64,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "elementwise-mul",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::SoftmaxRows => "softmax-rows",
            OpKind::LogSoftmaxRows => "log-softmax-rows",
            OpKind::L2NormalizeRows => "l2-normalize-rows",
            OpKind::ConcatRows => "concat-rows",
            OpKind::SliceRows { .. } => "slice-rows",
            OpKind::Transpose => "transpose",
            OpKind::Gather { .. } => "gather",
            OpKind::BatchNorm { .. } => "batch-norm",
        }
    }
}

#[derive(Clone, Debug)]
enum Recorded {
    Leaf,
    Op(OpKind),
}

#[derive(Clone, Debug)]
struct Node {
    op: Recorded,
    inputs: Vec<NodeId>,
    value: Array,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node of a graph.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `id`; nodes the root does not depend on get zeros.
    pub fn grad(&self, id: NodeId) -> Cow<'_, Array> {
        match &self.grads[id.0] {
            Some(g) => Cow::Borrowed(g),
            None => Cow::Owned(Array::zeros(&self.shapes[id.0])),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Array {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Array::zeros(&self.shapes[id.0]))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &Array, b: &Array) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.len() == 1 {
        Ok(Broadcast::Scalar)
    } else if b.rows() == 1 && b.len() == a.cols() && a.shape().len() >= 2 {
        Ok(Broadcast::Row)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn reduce_broadcast(g: &Array, kind: Broadcast, target: &Array) -> Array {
    match kind {
        Broadcast::Same => g.clone(),
        Broadcast::Scalar => {
            Array::from_parts(target.shape().to_vec(), vec![g.data().iter().sum()])
        }
        Broadcast::Row => {
            let mut acc = vec![0.0; target.len()];
            for row in g.row_iter() {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Array::from_parts(target.shape().to_vec(), acc)
        }
    }
}

fn broadcast_at(b: &Array, kind: Broadcast, flat: usize, cols: usize) -> f64 {
    match kind {
        Broadcast::Same => b.data()[flat],
        Broadcast::Scalar => b.data()[0],
        Broadcast::Row => b.data()[flat % cols],
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Row-wise softmax of a matrix (max-subtracted).
pub fn softmax_rows(x: &Array) -> Array {
    let mut out = vec![0.0; x.len()];
    let c = x.cols();
    for (row, o) in x.row_iter().zip(out.chunks_mut(c)) {
        softmax_row(row, o);
    }
    Array::from_parts(x.shape().to_vec(), out)
}

pub fn log_softmax_rows(x: &Array) -> Array {
    let mut out = vec![0.0; x.len()];
    let c = x.cols();
    for (row, o) in x.row_iter().zip(out.chunks_mut(c)) {
        log_softmax_row(row, o);
    }
    Array::from_parts(x.shape().to_vec(), out)
}

/// Column means and biased variances of a matrix.
pub fn column_moments(x: &Array) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (x.rows(), x.cols());
    let mut mean = vec![0.0; n];
    for row in x.row_iter() {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    for a in mean.iter_mut() {
        *a /= m as f64;
    }
    let mut var = vec![0.0; n];
    for row in x.row_iter() {
        for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mu;
            *a += d * d;
        }
    }
    for a in var.iter_mut() {
        *a /= m as f64;
    }
    (mean, var)
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rows with norm below this are treated as zero by `l2-normalize-rows`.
pub const NORM_FLOOR: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf holding `value`.
    pub fn input(&mut self, value: Array) -> NodeId {
        self.push(Recorded::Leaf, Vec::new(), value)
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    fn push(&mut self, op: Recorded, inputs: Vec<NodeId>, value: Array) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check_arity(&self, op: &OpKind, inputs: &[NodeId]) -> Result<()> {
        let ok = match op {
            OpKind::MatMul | OpKind::Add | OpKind::Mul => inputs.len() == 2,
            OpKind::ConcatRows => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !ok {
            return Err(Error::invalid(
                op.name(),
                format!("wrong number of inputs: {}", inputs.len()),
            ));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::invalid(op.name(), format!("unknown node {}", bad.0)));
        }
        Ok(())
    }

    /// Applies `op` to `inputs`, appending the result node.
    pub fn apply(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        self.check_arity(&op, inputs)?;
        let value = self.forward(&op, inputs)?;
        Ok(self.push(Recorded::Op(op), inputs.to_vec(), value))
    }

    fn forward(&self, op: &OpKind, inputs: &[NodeId]) -> Result<Array> {
        let a = &self.nodes[inputs[0].0].value;
        let value = match op {
            OpKind::MatMul => a.matmul(&self.nodes[inputs[1].0].value)?,
            OpKind::Add | OpKind::Mul => {
                let b = &self.nodes[inputs[1].0].value;
                let kind = broadcast_kind(op.name(), a, b)?;
                let cols = a.cols();
                let add = matches!(op, OpKind::Add);
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let y = broadcast_at(b, kind, i, cols);
                        if add {
                            x + y
                        } else {
                            x * y
                        }
                    })
                    .collect();
                Array::from_parts(a.shape().to_vec(), data)
            }
            OpKind::Scale(c) => a.map(|v| v * c),
            OpKind::Relu => a.map(|v| if v > 0.0 || v.is_nan() { v } else { 0.0 }),
            OpKind::Mean => Array::scalar(a.data().iter().sum::<f64>() / a.len() as f64),
            OpKind::Sum => Array::scalar(a.data().iter().sum()),
            OpKind::Exp => a.map(f64::exp),
            OpKind::Log => a.map(f64::ln),
            OpKind::SoftmaxRows => softmax_rows(a),
            OpKind::LogSoftmaxRows => log_softmax_rows(a),
            OpKind::L2NormalizeRows => {
                let c = a.cols();
                let mut out = a.data().to_vec();
                for row in out.chunks_mut(c) {
                    let n = row_norm(row);
                    if n < NORM_FLOOR {
                        row.iter_mut().for_each(|v| *v = 0.0);
                    } else {
                        row.iter_mut().for_each(|v| *v /= n);
                    }
                }
                Array::from_parts(a.shape().to_vec(), out)
            }
            OpKind::ConcatRows => {
                let cols = a.cols();
                let mut rows = 0;
                let mut data = Vec::new();
                for id in inputs {
                    let v = &self.nodes[id.0].value;
                    if v.cols() != cols {
                        return Err(Error::ShapeMismatch {
                            op: op.name(),
                            lhs: a.shape().to_vec(),
                            rhs: v.shape().to_vec(),
                        });
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Array::from_parts(vec![rows, cols], data)
            }
            OpKind::SliceRows { start, end } => {
                if start >= end || *end > a.rows() {
                    return Err(Error::invalid(
                        op.name(),
                        format!("rows {start}..{end} out of range for shape {:?}", a.shape()),
                    ));
                }
                let c = a.cols();
                Array::from_parts(vec![end - start, c], a.data()[start * c..end * c].to_vec())
            }
            OpKind::Transpose => a.transpose(),
            OpKind::Gather { indices, shape } => {
                if shape.iter().product::<usize>() != indices.len() || indices.is_empty() {
                    return Err(Error::invalid(
                        op.name(),
                        format!("{} indices cannot fill shape {shape:?}", indices.len()),
                    ));
                }
                if let Some(&bad) = indices.iter().find(|&&i| i >= a.len()) {
                    return Err(Error::invalid(
                        op.name(),
                        format!("index {bad} out of range for shape {:?}", a.shape()),
                    ));
                }
                Array::from_parts(
                    shape.clone(),
                    indices.iter().map(|&i| a.data()[i]).collect(),
                )
            }
            OpKind::BatchNorm { eps } => {
                if a.shape().len() != 2 || a.rows() < 2 {
                    return Err(Error::invalid(
                        op.name(),
                        format!("needs a matrix with at least 2 rows, got {:?}", a.shape()),
                    ));
                }
                let (mean, var) = column_moments(a);
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let c = a.cols();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| (x - mean[i % c]) * inv[i % c])
                    .collect();
                Array::from_parts(a.shape().to_vec(), data)
            }
        };
        Ok(value)
    }

    /// Reverse-mode pass from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array::full(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Recorded::Op(op) = &node.op {
                for (input, contrib) in self.input_grads(op, node, &g) {
                    match &mut grads[input.0] {
                        Some(acc) => {
                            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                                *a += c;
                            }
                        }
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[idx] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn input_grads(&self, op: &OpKind, node: &Node, g: &Array) -> Vec<(NodeId, Array)> {
        let x_id = node.inputs[0];
        let x = &self.nodes[x_id.0].value;
        let y = &node.value;
        let same = |data: Vec<f64>| Array::from_parts(x.shape().to_vec(), data);
        match op {
            OpKind::MatMul => {
                let b_id = node.inputs[1];
                let b = &self.nodes[b_id.0].value;
                let (m, k, n) = (x.shape()[0], x.shape()[1], b.shape()[1]);
                let da = matmul_nt(g.data(), b.data(), m, n, k);
                let db = matmul_tn(x.data(), g.data(), m, k, n);
                vec![
                    (x_id, Array::from_parts(vec![m, k], da)),
                    (b_id, Array::from_parts(vec![k, n], db)),
                ]
            }
            OpKind::Add => {
                let b_id = node.inputs[1];
                let b = &self.nodes[b_id.0].value;
                let kind = broadcast_kind("add", x, b).expect("validated in forward");
                vec![(x_id, g.clone()), (b_id, reduce_broadcast(g, kind, b))]
            }
            OpKind::Mul => {
                let b_id = node.inputs[1];
                let b = &self.nodes[b_id.0].value;
                let kind = broadcast_kind("elementwise-mul", x, b).expect("validated in forward");
                let cols = x.cols();
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * broadcast_at(b, kind, i, cols))
                    .collect();
                let gx = Array::from_parts(
                    x.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| gv * xv)
                        .collect(),
                );
                vec![(x_id, same(da)), (b_id, reduce_broadcast(&gx, kind, b))]
            }
            OpKind::Scale(c) => vec![(x_id, g.map(|v| v * c))],
            OpKind::Relu => {
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(x_id, same(d))]
            }
            OpKind::Mean => {
                let v = g.item() / x.len() as f64;
                vec![(x_id, Array::full(x.shape(), v))]
            }
            OpKind::Sum => vec![(x_id, Array::full(x.shape(), g.item()))],
            OpKind::Exp => {
                let d = g.data().iter().zip(y.data()).map(|(a, b)| a * b).collect();
                vec![(x_id, same(d))]
            }
            OpKind::Log => {
                let d = g.data().iter().zip(x.data()).map(|(a, b)| a / b).collect();
                vec![(x_id, same(d))]
            }
            OpKind::SoftmaxRows => {
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for ((gr, yr), dr) in g
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(d.chunks_mut(c))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![(x_id, same(d))]
            }
            OpKind::LogSoftmaxRows => {
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for ((gr, yr), dr) in g
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(d.chunks_mut(c))
                {
                    let total: f64 = gr.iter().sum();
                    for ((o, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                vec![(x_id, same(d))]
            }
            OpKind::L2NormalizeRows => {
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                for (((gr, yr), xr), dr) in g
                    .data()
                    .chunks(c)
                    .zip(y.data().chunks(c))
                    .zip(x.data().chunks(c))
                    .zip(d.chunks_mut(c))
                {
                    let n = row_norm(xr);
                    if n < NORM_FLOOR {
                        continue;
                    }
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) / n;
                    }
                }
                vec![(x_id, same(d))]
            }
            OpKind::ConcatRows => {
                let mut offset = 0;
                node.inputs
                    .iter()
                    .map(|&id| {
                        let v = &self.nodes[id.0].value;
                        let part = g.data()[offset..offset + v.len()].to_vec();
                        offset += v.len();
                        (id, Array::from_parts(v.shape().to_vec(), part))
                    })
                    .collect()
            }
            OpKind::SliceRows { start, .. } => {
                let c = x.cols();
                let mut d = vec![0.0; x.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(x_id, same(d))]
            }
            OpKind::Transpose => vec![(x_id, g.transpose().reshaped(x.shape()))],
            OpKind::Gather { indices, .. } => {
                let mut d = vec![0.0; x.len()];
                for (&i, gv) in indices.iter().zip(g.data()) {
                    d[i] += gv;
                }
                vec![(x_id, same(d))]
            }
            OpKind::BatchNorm { eps } => {
                let (m, c) = (x.rows(), x.cols());
                let (_, var) = column_moments(x);
                let mut sum_g = vec![0.0; c];
                let mut sum_gy = vec![0.0; c];
                for (gr, yr) in g.data().chunks(c).zip(y.data().chunks(c)) {
                    for j in 0..c {
                        sum_g[j] += gr[j];
                        sum_gy[j] += gr[j] * yr[j];
                    }
                }
                let mf = m as f64;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .enumerate()
                    .map(|(i, (gv, yv))| {
                        let j = i % c;
                        let inv = 1.0 / (var[j] + eps).sqrt();
                        inv / mf * (mf * gv - sum_g[j] - yv * sum_gy[j])
                    })
                    .collect();
                vec![(x_id, same(d))]
            }
        }
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::SoftmaxRows, &[a])
    }
    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::LogSoftmaxRows, &[a])
    }
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::L2NormalizeRows, &[a])
    }
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(OpKind::ConcatRows, parts)
    }
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.apply(OpKind::SliceRows { start, end }, &[a])
    }
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>, shape: Vec<usize>) -> Result<NodeId> {
        self.apply(OpKind::Gather { indices, shape }, &[a])
    }
    pub fn batch_norm(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(OpKind::BatchNorm { eps }, &[a])
    }

    /// Mean over rows of the cross-entropy `-Σ_c target_c · log softmax(logits)_c`.
    /// `target` is a constant distribution per row.
    pub fn soft_cross_entropy(&mut self, logits: NodeId, target: &Array) -> Result<NodeId> {
        let rows = self.value(logits).rows();
        let lsm = self.log_softmax_rows(logits)?;
        let t = self.input(target.clone());
        let prod = self.mul(lsm, t)?;
        let total = self.sum(prod)?;
        self.scale(total, -1.0 / rows as f64)
    }
}

impl Array {
    pub(crate) fn reshaped(self, shape: &[usize]) -> Array {
        Array::from_parts(shape.to_vec(), self.into_data())
    }
}
