//! Whole-matrix reverse-mode differentiation.
//!
//! Every primitive recorded on a [`Tape`] becomes one node holding its forward
//! value. Nodes are appended in evaluation order, so the node vector is already a
//! topological order and the backward pass is a single reverse sweep.
//!
//! Trainable leaves are registered with [`Tape::param`] under a [`ParamId`]. A
//! parameter id maps to exactly one node per tape: registering the same id again
//! returns the existing node, which is how one set of prompt tokens is shared by
//! every sample in a batch.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Mask, Matrix, NumericsError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Name of a trainable tensor, e.g. `sdpt.1.Z` or `xmha.2.Wq_t`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(String);

impl ParamId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ParamId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

impl From<String> for ParamId {
    fn from(s: String) -> Self {
        Self(s)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `a + 1·b` with `b` a single row.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    ConcatRows(NodeId, NodeId),
    SliceRows(NodeId, usize),
    MaskedFill(NodeId, Mask),
    Tanh(NodeId),
    Sum(NodeId),
    /// Mean sigmoid cross-entropy against fixed binary targets.
    SigmoidXent(NodeId, Matrix),
    /// A value computed outside the tape. It has no derivative rule.
    External(&'static str, Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::MaskedFill(..) => "masked_fill",
            Op::Tanh(..) => "tanh",
            Op::Sum(..) => "sum",
            Op::SigmoidXent(..) => "sigmoid_cross_entropy",
            Op::External(name, _) => name,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::ConcatRows(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::SliceRows(a, _)
            | Op::MaskedFill(a, _)
            | Op::Tanh(a)
            | Op::Sum(a)
            | Op::SigmoidXent(a, _) => vec![*a],
            Op::External(_, inputs) => inputs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
    /// True when some trainable leaf is upstream of this node.
    tracked: bool,
}

/// Recording of one forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, NodeId>,
}

/// `∂loss/∂param` for each requested parameter.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Matrix>,
}

impl GradientMap {
    pub fn get(&self, id: &ParamId) -> Option<&Matrix> {
        self.grads.get(id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Matrix)> {
        self.grads.iter()
    }
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Ids of every registered trainable leaf, in name order.
    pub fn param_ids(&self) -> impl Iterator<Item = &ParamId> {
        self.params.keys()
    }

    pub fn param_node(&self, id: &ParamId) -> Option<NodeId> {
        self.params.get(id).copied()
    }

    /// Number of leaf nodes carrying each parameter id. Always 1 per id; exposed
    /// so callers can audit sharing.
    pub fn param_node_count(&self, id: &ParamId) -> usize {
        usize::from(self.params.contains_key(id))
    }

    /// Total scalar count over all registered parameters.
    pub fn param_scalar_count(&self) -> usize {
        self.params.values().map(|&n| self.value(n).len()).sum()
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let tracked = op.inputs().iter().any(|i| self.nodes[i.0].tracked);
        self.push_with(op, value, tracked)
    }

    fn push_with(&mut self, op: Op, value: Matrix, tracked: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value, tracked });
        id
    }

    /// Records a constant leaf. No gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push_with(Op::Leaf, value, false)
    }

    /// Records a trainable leaf, or returns the node already registered under `id`.
    pub fn param(
        &mut self,
        id: impl Into<ParamId>,
        value: &Matrix,
    ) -> Result<NodeId, NumericsError> {
        let id = id.into();
        if let Some(&node) = self.params.get(&id) {
            let existing = self.value(node);
            if existing.shape() != value.shape() {
                return Err(NumericsError::shape(
                    "param",
                    existing.shape(),
                    value.shape(),
                ));
            }
            return Ok(node);
        }
        let node = self.push_with(Op::Leaf, value.clone(), true);
        self.params.insert(id, node);
        Ok(node)
    }

    /// Records a value computed outside the tape that depends on `inputs`. Any
    /// gradient reaching it fails with [`NumericsError::UnsupportedOp`].
    pub fn external(&mut self, name: &'static str, inputs: &[NodeId], value: Matrix) -> NodeId {
        self.push(Op::External(name, inputs.to_vec()), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(Op::AddRow(a, bias), v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).softmax_rows();
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn concat_rows(&mut self, top: NodeId, bottom: NodeId) -> Result<NodeId, NumericsError> {
        let v = Matrix::concat_rows(self.value(top), self.value(bottom))?;
        Ok(self.push(Op::ConcatRows(top, bottom), v))
    }

    pub fn slice_rows(
        &mut self,
        a: NodeId,
        start: usize,
        end: usize,
    ) -> Result<NodeId, NumericsError> {
        let v = self.value(a).slice_rows(start, end)?;
        Ok(self.push(Op::SliceRows(a, start), v))
    }

    pub fn masked_fill(
        &mut self,
        a: NodeId,
        mask: &Mask,
        fill: f64,
    ) -> Result<NodeId, NumericsError> {
        let v = self.value(a).masked_fill(mask, fill)?;
        Ok(self.push(Op::MaskedFill(a, mask.clone()), v))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).tanh();
        self.push(Op::Tanh(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    /// Mean over nodes of identical shape, built from `add` and `scale`.
    pub fn mean(&mut self, items: &[NodeId]) -> Result<NodeId, NumericsError> {
        let (&first, rest) = items.split_first().ok_or(NumericsError::Empty("mean"))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(self.scale(acc, 1.0 / items.len() as f64))
    }

    /// Mean over all cells of `-[y log σ(ℓ) + (1-y) log(1-σ(ℓ))]`, evaluated as
    /// `max(ℓ,0) - yℓ + ln(1 + e^{-|ℓ|})`.
    pub fn sigmoid_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &Matrix,
    ) -> Result<NodeId, NumericsError> {
        let l = self.value(logits);
        if l.shape() != targets.shape() {
            return Err(NumericsError::shape(
                "sigmoid_cross_entropy",
                l.shape(),
                targets.shape(),
            ));
        }
        let v = Matrix::filled(1, 1, sigmoid_cross_entropy(l, targets));
        Ok(self.push(Op::SigmoidXent(logits, targets.clone()), v))
    }

    /// Reverse sweep from the scalar `loss` node.
    pub fn grad(&self, loss: NodeId, wrt: &[ParamId]) -> Result<GradientMap, NumericsError> {
        let loss_shape = self.value(loss).shape();
        if loss_shape != (1, 1) {
            return Err(NumericsError::NonScalarLoss(loss_shape));
        }
        let mut targets = HashMap::with_capacity(wrt.len());
        for id in wrt {
            let node = self
                .params
                .get(id)
                .ok_or_else(|| NumericsError::UnknownParam(id.to_string()))?;
            targets.insert(*node, id.clone());
        }

        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut adj)?;
        }

        let mut grads = BTreeMap::new();
        for (node, id) in targets {
            let g = adj[node.0].take().unwrap_or_else(|| {
                let (r, c) = self.value(node).shape();
                Matrix::zeros(r, c)
            });
            grads.insert(id, g);
        }
        Ok(GradientMap { grads })
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &Matrix,
        adj: &mut [Option<Matrix>],
    ) -> Result<(), NumericsError> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    accumulate(adj, *a, ga);
                }
                if self.tracked(*b) {
                    let gb = self.value(*a).transpose().matmul(g)?;
                    accumulate(adj, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.tracked(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.tracked(*b) {
                    accumulate(adj, *b, g.clone());
                }
            }
            Op::AddRow(a, bias) => {
                if self.tracked(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.tracked(*bias) {
                    accumulate(adj, *bias, g.column_sums());
                }
            }
            Op::Scale(a, s) => accumulate(adj, *a, g.scale(*s)),
            Op::Transpose(a) => accumulate(adj, *a, g.transpose()),
            Op::SoftmaxRows(a) => {
                // dx_ij = y_ij (g_ij - Σ_k g_ik y_ik)
                let y = &node.value;
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (&yv, &gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                accumulate(adj, *a, gx);
            }
            Op::ConcatRows(top, bottom) => {
                let split = self.value(*top).rows();
                if self.tracked(*top) {
                    accumulate(adj, *top, g.slice_rows(0, split)?);
                }
                if self.tracked(*bottom) {
                    accumulate(adj, *bottom, g.slice_rows(split, g.rows())?);
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                let cols = src.cols();
                ga.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                accumulate(adj, *a, ga);
            }
            Op::MaskedFill(a, mask) => {
                let ga = g.masked_fill(mask, 0.0)?;
                accumulate(adj, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.hadamard(&node.value.map(|y| 1.0 - y * y))?;
                accumulate(adj, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(adj, *a, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::SigmoidXent(logits, y) => {
                let l = self.value(*logits);
                let scale = g[(0, 0)] / l.len() as f64;
                let ga = Matrix::from_fn(l.rows(), l.cols(), |r, c| {
                    (sigmoid(l[(r, c)]) - y[(r, c)]) * scale
                });
                accumulate(adj, *logits, ga);
            }
            Op::External(name, _) => return Err(NumericsError::UnsupportedOp(name)),
        }
        Ok(())
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    /// Name of the primitive that produced `id`.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }
}

fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut adj[id.0] {
        Some(existing) => existing
            .axpy(1.0, &g)
            .expect("adjoint shape matches node shape"),
        slot @ None => *slot = Some(g),
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

/// Stable mean sigmoid cross-entropy. Shapes must match.
pub fn sigmoid_cross_entropy(logits: &Matrix, targets: &Matrix) -> f64 {
    let total: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&l, &y)| l.max(0.0) - y * l + (-l.abs()).exp().ln_1p())
        .sum();
    total / logits.len() as f64
}
