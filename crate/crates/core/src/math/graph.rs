//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Ops are evaluated as they are recorded, so a [`Graph`] is simultaneously the
//! forward pass and the tape that [`Graph::backward`] replays in reverse. Graphs are
//! cheap to build and are meant to be thrown away after each step.
//!
//! ```
//! use discern::math::{Graph, Tensor};
//! use std::sync::Arc;
//!
//! let mut g = Graph::new();
//! let x = g.param("x", &Arc::new(Tensor::scalar(3.0)));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads["x"].data(), &[6.0]);
//! ```

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use super::MathError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    L2Normalize(NodeId),
    StopGradient,
    Concat(Vec<NodeId>, Axis),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    Pick(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Square(..) => "square",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::L2Normalize(..) => "l2_normalize",
            Op::StopGradient => "stop_gradient",
            Op::Concat(..) => "concat",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Pick(..) => "pick",
        }
    }
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    frozen: HashMap<String, NodeId>,
    degenerate_normalizations: usize,
}

fn node_label(op: &str, index: usize) -> String {
    format!("{op}#{index}")
}

/// Shape of a broadcast binary op: each operand dimension must equal the output
/// dimension or be 1.
fn broadcast_shape(a: &Tensor, b: &Tensor) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.rows(), b.rows())?, dim(a.cols(), b.cols())?))
}

fn broadcast_index(t: &Tensor, r: usize, c: usize) -> usize {
    let rr = if t.rows() == 1 { 0 } else { r };
    let cc = if t.cols() == 1 { 0 } else { c };
    rr * t.cols() + cc
}

/// Sums `grad` (shaped like the op output) down to the shape of a broadcast operand.
fn reduce_to(grad: &Tensor, target: &Tensor, sign: f64, acc: &mut [f64]) {
    let (rows, cols) = (grad.rows(), grad.cols());
    if target.rows() == rows && target.cols() == cols {
        for (a, g) in acc.iter_mut().zip(grad.data()) {
            *a += sign * g;
        }
        return;
    }
    for r in 0..rows {
        for c in 0..cols {
            acc[broadcast_index(target, r, c)] += sign * grad.data()[r * cols + c];
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// How many zero rows `l2_normalize` has met in this graph.
    pub fn degenerate_normalizations(&self) -> usize {
        self.degenerate_normalizations
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.push_shared(op, Arc::new(value), requires_grad)
    }

    fn push_shared(&mut self, op: Op, value: Arc<Tensor>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape_error(&self, op: &'static str, detail: String) -> MathError {
        MathError::Shape {
            node: node_label(op, self.nodes.len()),
            detail,
        }
    }

    /// A constant input; no gradient is reported for it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn constant(&mut self, value: &Arc<Tensor>) -> NodeId {
        self.push_shared(Op::Leaf, Arc::clone(value), false)
    }

    /// Registers a trainable parameter. Registering the same name twice returns the
    /// node created the first time, so every use shares one gradient.
    pub fn param(&mut self, name: &str, value: &Arc<Tensor>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push_shared(Op::Leaf, Arc::clone(value), true);
        self.params.insert(name.to_string(), id);
        id
    }

    /// Like [`Graph::param`] but excluded from differentiation.
    pub fn frozen_param(&mut self, name: &str, value: &Arc<Tensor>) -> NodeId {
        if let Some(&id) = self.frozen.get(name) {
            return id;
        }
        let id = self.push_shared(Op::Leaf, Arc::clone(value), false);
        self.frozen.insert(name.to_string(), id);
        id
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, MathError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(self.shape_error(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_rows(m, n, out), rg))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, MathError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let Some((rows, cols)) = broadcast_shape(ta, tb) else {
            return Err(self.shape_error(
                name,
                format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()),
            ));
        };
        let mut out = Vec::with_capacity(rows * cols);
        if ta.shape() == tb.shape() {
            out.extend(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
        } else {
            for r in 0..rows {
                for c in 0..cols {
                    out.push(f(
                        ta.data()[broadcast_index(ta, r, c)],
                        tb.data()[broadcast_index(tb, r, c)],
                    ));
                }
            }
        }
        Ok(Tensor::from_rows(rows, cols, out))
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, MathError> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, MathError> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, MathError> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.grad_of(&[a, b]);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.value(a).map(|v| v * factor);
        let rg = self.grad_of(&[a]);
        self.push(Op::Scale(a, factor), out, rg)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let t = self.value(a);
        let out = Tensor::from_rows(t.rows(), t.cols(), t.data().iter().map(|&v| f(v)).collect());
        let rg = self.grad_of(&[a]);
        self.push(op, out, rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |v| v * v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = t.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - max).exp()));
            let z: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.grad_of(&[a]);
        self.push(Op::Softmax(a), Tensor::from_rows(rows, cols, out), rg)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = t.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let rg = self.grad_of(&[a]);
        self.push(Op::LogSoftmax(a), Tensor::from_rows(rows, cols, out), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        let rg = self.grad_of(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let m = t.sum() / t.numel() as f64;
        let rg = self.grad_of(&[a]);
        self.push(Op::Mean(a), Tensor::scalar(m), rg)
    }

    /// Sums each row, producing a `[rows, 1]` column.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let rows = t.rows();
        let rg = self.grad_of(&[a]);
        self.push(Op::SumCols(a), Tensor::from_rows(rows, 1, out), rg)
    }

    /// Scales each row to unit L2 norm. A zero row stays zero and is counted in
    /// [`Graph::degenerate_normalizations`].
    pub fn l2_normalize(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(rows * cols);
        let mut degenerate = 0;
        for r in 0..rows {
            let row = t.row_slice(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                out.extend(row.iter().map(|v| v / n));
            } else {
                degenerate += 1;
                out.extend(std::iter::repeat_n(0.0, cols));
            }
        }
        if degenerate > 0 {
            log::warn!("l2_normalize met {degenerate} zero row(s); returning zeros");
            self.degenerate_normalizations += degenerate;
        }
        let rg = self.grad_of(&[a]);
        self.push(Op::L2Normalize(a), Tensor::from_rows(rows, cols, out), rg)
    }

    /// Passes the value through and blocks all gradient flow into `a`.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = Arc::clone(&self.nodes[a.0].value);
        self.push_shared(Op::StopGradient, v, false)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId, MathError> {
        let Some(&first) = parts.first() else {
            return Err(self.shape_error("concat", "no inputs".into()));
        };
        let (rows0, cols0) = (self.value(first).rows(), self.value(first).cols());
        let out = match axis {
            Axis::Rows => {
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let t = self.value(p);
                    if t.cols() != cols0 {
                        return Err(self.shape_error(
                            "concat",
                            format!("row concat needs {cols0} columns, got {:?}", t.shape()),
                        ));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::from_rows(rows, cols0, data)
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rows() != rows0 {
                        return Err(self.shape_error(
                            "concat",
                            format!("column concat needs {rows0} rows, got {:?}", t.shape()),
                        ));
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(rows0 * cols);
                for r in 0..rows0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                Tensor::from_rows(rows0, cols, data)
            }
        };
        let rg = self.grad_of(parts);
        Ok(self.push(Op::Concat(parts.to_vec(), axis), out, rg))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, MathError> {
        let t = self.value(a);
        if len == 0 || start + len > t.rows() {
            return Err(self.shape_error(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, t.shape()),
            ));
        }
        let c = t.cols();
        let out = Tensor::from_rows(len, c, t.data()[start * c..(start + len) * c].to_vec());
        let rg = self.grad_of(&[a]);
        Ok(self.push(Op::SliceRows(a, start), out, rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, MathError> {
        let t = self.value(a);
        if len == 0 || start + len > t.cols() {
            return Err(self.shape_error(
                "slice_cols",
                format!("cols {start}..{} of {:?}", start + len, t.shape()),
            ));
        }
        let rows = t.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let rg = self.grad_of(&[a]);
        Ok(self.push(Op::SliceCols(a, start), Tensor::from_rows(rows, len, data), rg))
    }

    /// Selects column `index[r]` from every row `r`, producing `[rows, 1]`.
    pub fn pick(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId, MathError> {
        let t = self.value(a);
        if index.len() != t.rows() || index.iter().any(|&i| i >= t.cols()) {
            return Err(self.shape_error(
                "pick",
                format!("{} indices into {:?}", index.len(), t.shape()),
            ));
        }
        let out: Vec<f64> = index.iter().enumerate().map(|(r, &c)| t.at(r, c)).collect();
        let rows = t.rows();
        let rg = self.grad_of(&[a]);
        Ok(self.push(Op::Pick(a, index.to_vec()), Tensor::from_rows(rows, 1, out), rg))
    }

    /// Reverse pass from a scalar node. Returns the gradient of every trainable
    /// parameter registered with [`Graph::param`] (zeros when unreachable).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, MathError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(MathError::NonScalarLoss {
                node: node_label(self.nodes[loss.0].op.name(), loss.0),
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            // Leaves keep their gradient for collection below.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out = Gradients::new();
        for (name, id) in &self.params {
            let g = match grads.get_mut(id.0).and_then(Option::take) {
                Some(g) => g.reshape(self.value(*id).shape().to_vec())?,
                None => Tensor::zeros(self.value(*id).shape()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], id: NodeId) -> Option<&'g mut [f64]> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let t = self.value(id);
        let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(&[t.rows(), t.cols()]));
        Some(slot.data_mut())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, g.data(), false, tb.data(), true, 1.0, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, n, ta.data(), true, g.data(), false, 1.0, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.slot(grads, *a) {
                    reduce_to(g, self.value(*a), 1.0, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    reduce_to(g, self.value(*b), sign, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (rows, cols) = (g.rows(), g.cols());
                let mut da = Vec::with_capacity(rows * cols);
                let mut db = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let gv = g.data()[r * cols + c];
                        da.push(gv * tb.data()[broadcast_index(tb, r, c)]);
                        db.push(gv * ta.data()[broadcast_index(ta, r, c)]);
                    }
                }
                let da = Tensor::from_rows(rows, cols, da);
                let db = Tensor::from_rows(rows, cols, db);
                if let Some(ga) = self.slot(grads, *a) {
                    reduce_to(&da, ta, 1.0, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    reduce_to(&db, tb, 1.0, gb);
                }
            }
            Op::Scale(a, f) => self.elementwise(*a, grads, |j, _| g.data()[j] * f),
            Op::Square(a) => {
                let x = self.value(*a);
                self.elementwise(*a, grads, |j, _| 2.0 * x.data()[j] * g.data()[j]);
            }
            Op::Tanh(a) => self.elementwise(*a, grads, |j, _| {
                let y = out.data()[j];
                g.data()[j] * (1.0 - y * y)
            }),
            Op::Relu(a) => {
                let x = self.value(*a);
                self.elementwise(*a, grads, |j, _| {
                    if x.data()[j] > 0.0 {
                        g.data()[j]
                    } else {
                        0.0
                    }
                });
            }
            Op::Sigmoid(a) => self.elementwise(*a, grads, |j, _| {
                let y = out.data()[j];
                g.data()[j] * y * (1.0 - y)
            }),
            Op::Exp(a) => self.elementwise(*a, grads, |j, _| g.data()[j] * out.data()[j]),
            Op::Log(a) => {
                let x = self.value(*a);
                self.elementwise(*a, grads, |j, _| g.data()[j] / x.data()[j]);
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                let dots: Vec<f64> = (0..out.rows())
                    .map(|r| {
                        out.row_slice(r)
                            .iter()
                            .zip(g.row_slice(r))
                            .map(|(y, gv)| y * gv)
                            .sum()
                    })
                    .collect();
                self.elementwise(*a, grads, |j, _| {
                    out.data()[j] * (g.data()[j] - dots[j / cols])
                });
            }
            Op::LogSoftmax(a) => {
                let cols = out.cols();
                let sums: Vec<f64> = (0..out.rows()).map(|r| g.row_slice(r).iter().sum()).collect();
                self.elementwise(*a, grads, |j, _| {
                    g.data()[j] - out.data()[j].exp() * sums[j / cols]
                });
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.elementwise(*a, grads, |_, _| gv);
            }
            Op::Mean(a) => {
                let gv = g.data()[0] / self.value(*a).numel() as f64;
                self.elementwise(*a, grads, |_, _| gv);
            }
            Op::SumCols(a) => {
                let cols = self.value(*a).cols();
                self.elementwise(*a, grads, |j, _| g.data()[j / cols]);
            }
            Op::L2Normalize(a) => {
                let x = self.value(*a);
                let cols = x.cols();
                let stats: Vec<(f64, f64)> = (0..x.rows())
                    .map(|r| {
                        let n = x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yg: f64 = out
                            .row_slice(r)
                            .iter()
                            .zip(g.row_slice(r))
                            .map(|(y, gv)| y * gv)
                            .sum();
                        (n, yg)
                    })
                    .collect();
                self.elementwise(*a, grads, |j, _| {
                    let (n, yg) = stats[j / cols];
                    if n > 0.0 {
                        (g.data()[j] - out.data()[j] * yg) / n
                    } else {
                        0.0
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let (pr, pc) = (t.rows(), t.cols());
                    match axis {
                        Axis::Rows => {
                            if let Some(gp) = self.slot(grads, p) {
                                let src = &g.data()[offset * pc..(offset + pr) * pc];
                                gp.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                            }
                            offset += pr;
                        }
                        Axis::Cols => {
                            let gcols = g.cols();
                            if let Some(gp) = self.slot(grads, p) {
                                for r in 0..pr {
                                    let src = &g.data()[r * gcols + offset..r * gcols + offset + pc];
                                    gp[r * pc..(r + 1) * pc]
                                        .iter_mut()
                                        .zip(src)
                                        .for_each(|(d, s)| *d += s);
                                }
                            }
                            offset += pc;
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let c = g.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    ga[start * c..start * c + g.numel()]
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::SliceCols(a, start) => {
                let src_cols = self.value(*a).cols();
                let len = g.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..g.rows() {
                        for c in 0..len {
                            ga[r * src_cols + start + c] += g.data()[r * len + c];
                        }
                    }
                }
            }
            Op::Pick(a, index) => {
                let cols = self.value(*a).cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &c) in index.iter().enumerate() {
                        ga[r * cols + c] += g.data()[r];
                    }
                }
            }
        }
    }

    /// Adds `f(j, x_j)` into the gradient of same-shaped input `a`.
    fn elementwise(&self, a: NodeId, grads: &mut [Option<Tensor>], f: impl Fn(usize, f64) -> f64) {
        let x = Arc::clone(&self.nodes[a.0].value);
        if let Some(ga) = self.slot(grads, a) {
            for (j, d) in ga.iter_mut().enumerate() {
                *d += f(j, x.data()[j]);
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: Tensor) -> Arc<Tensor> {
        Arc::new(v)
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.input(Tensor::identity(3));
        let v = g.input(Tensor::from_rows(3, 1, vec![1.0, 2.0, 3.0]));
        let y = g.matmul(i, v).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![3.0, 4.0]));
        let y = g.l2_normalize(x);
        let d = g.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_zero_row_is_flagged() {
        let mut g = Graph::new();
        let x = g.param("x", &p(Tensor::row(vec![0.0, 0.0, 0.0])));
        let y = g.l2_normalize(x);
        assert_eq!(g.value(y).data(), &[0.0; 3]);
        assert_eq!(g.degenerate_normalizations(), 1);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["x"].data(), &[0.0; 3]);
    }

    #[test]
    fn uniform_softmax() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row(vec![0.0; 5]));
        let y = g.softmax(x);
        for &v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param("x", &p(Tensor::scalar(3.0)));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap()["x"].data(), &[6.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let x = g.param("x", &p(Tensor::scalar(2.0)));
        let y = g.param("y", &p(Tensor::scalar(5.0)));
        let sx = g.stop_gradient(x);
        assert_eq!(g.value(sx).data(), &[2.0]);
        let z = g.mul(sx, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads["x"].data(), &[0.0]);
        assert_eq!(grads["y"].data(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", &p(Tensor::row(vec![1.0, 2.0])));
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(MathError::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_error_names_node() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(MathError::Shape { node, .. }) => assert_eq!(node, "matmul#2"),
            other => panic!("expected shape error, got {other:?}"),
        }
        assert!(g.add(a, b).is_ok());
        let c = g.input(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn shared_param_accumulates() {
        let mut g = Graph::new();
        let w = p(Tensor::scalar(1.5));
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        assert_eq!(a, b);
        let y = g.add(a, b).unwrap();
        assert_eq!(g.backward(y).unwrap()["w"].data(), &[2.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradients() {
        let mut g = Graph::new();
        let x = g.param("x", &p(Tensor::from_rows(2, 3, vec![1.0; 6])));
        let b = g.param("b", &p(Tensor::row(vec![0.0; 3])));
        let c = g.param("c", &p(Tensor::from_rows(2, 1, vec![0.0; 2])));
        let y = g.add(x, b).unwrap();
        let y = g.sub(y, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["b"].data(), &[2.0; 3]);
        assert_eq!(grads["c"].data(), &[-3.0; 2]);
    }
}
