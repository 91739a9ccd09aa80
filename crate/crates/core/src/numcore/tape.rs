//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation applied during a forward pass. Calling
//! [`Tape::backward`] walks the records in exact reverse order and returns
//! the gradient of a scalar node with respect to every node on the tape.
//! Parameter gradients are pushed into a [`ParamStore`] with
//! [`Gradients::accumulate_into`].

use super::matrix::Matrix;
use super::ops;
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { name: name.into(), value, grad, trainable: true }
    }
}

/// Named parameters in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Global L2 norm over trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params.iter().filter(|p| p.trainable).map(|p| p.grad.sq_norm()).sum::<f64>().sqrt()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Linear(Vec<(NodeId, f64)>),
    Gelu(NodeId),
    Sigmoid { x: NodeId, clamp: f64 },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Matrix, inv_std: Vec<f64> },
    GatherRows { table: NodeId, ids: Vec<usize> },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    SumAll(NodeId),
    Abs(NodeId),
    /// Scalar loss with a gradient precomputed during the forward pass.
    ScalarLoss { x: NodeId, grad: Matrix },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        debug_assert!(value.is_finite() || matches!(op, Op::Leaf), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input; receives a gradient but is never updated.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_bt(self.value(b))?;
        Ok(self.push(v, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Adds a 1×n row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            bail!(Dimension, "add_row {:?} + {:?}", x.shape(), r.shape());
        }
        let mut v = x.clone();
        for i in 0..v.rows() {
            for (o, &b) in v.row_mut(i).iter_mut().zip(r.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped nodes.
    pub fn linear_combination(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let Some(&(first, _)) = terms.first() else {
            bail!(Dimension, "empty linear combination");
        };
        let shape = self.value(first).shape();
        let mut v = Matrix::zeros(shape.0, shape.1);
        for &(id, w) in terms {
            let x = self.value(id);
            if x.shape() != shape {
                bail!(Dimension, "linear combination {:?} vs {:?}", x.shape(), shape);
            }
            for (o, &xv) in v.as_mut_slice().iter_mut().zip(x.as_slice()) {
                *o += w * xv;
            }
        }
        Ok(self.push(v, Op::Linear(terms.to_vec())))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(ops::gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Elementwise sigmoid, clamped to `[clamp, 1 - clamp]`; clamped entries pass no gradient.
    pub fn sigmoid(&mut self, a: NodeId, clamp: f64) -> NodeId {
        let v = self.value(a).map(|x| ops::sigmoid(x).clamp(clamp, 1.0 - clamp));
        self.push(v, Op::Sigmoid { x: a, clamp })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::softmax_rows(self.value(a))?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    /// Softmax of `a + mask` where `mask` is a constant additive mask.
    pub fn softmax_rows_masked(&mut self, a: NodeId, mask: &Matrix) -> Result<NodeId> {
        let shifted = self.value(a).add(mask)?;
        let v = ops::softmax_rows(&shifted)?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::log_softmax_rows(self.value(a))?;
        Ok(self.push(v, Op::LogSoftmax(a)))
    }

    /// Row-wise layer normalisation with a learned 1×n gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = xv.cols();
        if g.shape() != (1, n) || b.shape() != (1, n) {
            bail!(Dimension, "layer_norm over {:?} with gain {:?}", xv.shape(), g.shape());
        }
        let mut xhat = Matrix::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Matrix::zeros(xv.rows(), n);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            bail!(Invalid, "row index {} outside table of {} rows", bad, t.rows());
        }
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (r, &i) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(i));
        }
        Ok(self.push(v, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(x).slice_rows(start, end)?;
        Ok(self.push(v, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(x).slice_cols(start, end)?;
        Ok(self.push(v, Op::SliceCols { x, start }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Matrix::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    /// Elementwise absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::abs);
        self.push(v, Op::Abs(x))
    }

    /// Mean cross-entropy of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (loss, grad) = ops::cross_entropy_with_grad(self.value(logits), targets)?;
        Ok(self.push(Matrix::scalar(loss), Op::ScalarLoss { x: logits, grad }))
    }

    /// Registers a scalar loss of `x` whose gradient was computed externally.
    pub fn custom_loss(&mut self, x: NodeId, loss: f64, grad: Matrix) -> Result<NodeId> {
        if !grad.same_shape(self.value(x)) {
            bail!(Dimension, "custom loss gradient {:?} for input {:?}", grad.shape(), self.value(x).shape());
        }
        Ok(self.push(Matrix::scalar(loss), Op::ScalarLoss { x, grad }))
    }

    /// Gradients of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            bail!(Gradient, "backward from node {} on a tape of {} nodes (no forward pass recorded)", loss.0, self.nodes.len());
        }
        if self.value(loss).shape() != (1, 1) {
            bail!(Gradient, "backward requires a scalar loss, got {:?}", self.value(loss).shape());
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let mut acc = |id: NodeId, delta: Matrix| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_bt(self.value(*b))?);
                acc(*b, self.value(*a).matmul_at(g)?);
            }
            Op::MatMulBt(a, b) => {
                acc(*a, g.matmul(self.value(*b))?);
                acc(*b, g.matmul_at(self.value(*a))?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut sums = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (s, &v) in sums.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                acc(*row, sums);
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |x, y| x * y)?);
                acc(*b, g.zip_map(self.value(*a), |x, y| x * y)?);
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Linear(terms) => {
                for &(id, w) in terms {
                    acc(id, g.scale(w));
                }
            }
            Op::Gelu(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| gv * ops::gelu_grad(x))?),
            Op::Sigmoid { x, clamp } => {
                let y = &node.value;
                let lo = *clamp;
                let d = g.zip_map(y, |gv, s| if s <= lo || s >= 1.0 - lo { 0.0 } else { gv * s * (1.0 - s) })?;
                acc(*x, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = super::matrix::dot(g.row(r), y.row(r));
                    for ((o, &gv), &yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - inner);
                    }
                }
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for ((o, &gv), &ly) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = gv - ly.exp() * total;
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gain_v = self.value(*gain);
                let n = xhat.cols();
                let mut dgain = Matrix::zeros(1, n);
                let mut dbias = Matrix::zeros(1, n);
                let mut dx = Matrix::zeros(xhat.rows(), n);
                for r in 0..xhat.rows() {
                    let mut dxhat = vec![0.0; n];
                    for c in 0..n {
                        let gv = g.get(r, c);
                        dgain.as_mut_slice()[c] += gv * xhat.get(r, c);
                        dbias.as_mut_slice()[c] += gv;
                        dxhat[c] = gv * gain_v.get(0, c);
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        dx.set(r, c, inv_std[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx));
                    }
                }
                acc(*x, dx);
                acc(*gain, dgain);
                acc(*bias, dbias);
            }
            Op::GatherRows { table, ids } => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, d);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                acc(*x, Matrix::filled(xv.rows(), xv.cols(), g.item()));
            }
            Op::Abs(x) => acc(*x, g.zip_map(self.value(*x), |gv, v| gv * sign(v))?),
            Op::ScalarLoss { x, grad } => acc(*x, grad.scale(g.item())),
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Adds each parameter node's gradient into the store's `grad` fields.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (idx, node) in tape.nodes.iter().enumerate().take(self.grads.len()) {
            if let (Op::Param(pid), Some(g)) = (&node.op, &self.grads[idx]) {
                store.get_mut(*pid).grad.add_assign(g);
            }
        }
    }
}
