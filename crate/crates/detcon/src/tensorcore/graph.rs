//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Graphs are built eagerly: every builder call runs the forward kernel and
//! records an op node. `backward` walks the tape in reverse. Re-evaluation
//! after `set_leaf_value` is supported so finite-difference checks can probe
//! the same graph. All reductions run in a fixed order, so gradients are
//! bit-identical across runs and thread counts.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::kernels::{col2im_add, conv_out_extent, gemm, im2col};
use super::tensor::{Scalar, Tensor};
use super::TensorError;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Broadcast flavor resolved for `add` at build time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddKind {
    /// Same-shape elementwise.
    Same,
    /// (m, n) + (n,): the vector is added to every row.
    RowVec,
    /// (n, c, h, w) + (c,): the vector is added per channel.
    PerChannel,
    /// Any shape + single-element tensor.
    Scalar,
}

/// Op record; attribute payloads are whatever the backward rule needs.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul {
        ta: bool,
        tb: bool,
    },
    Add(AddKind),
    EwAdd,
    EwSub,
    EwMul,
    MulScalar(f64),
    Relu,
    Conv2d {
        stride: usize,
        pad: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    SpatialMean,
    MaskPool,
    L2Rescale {
        target_norm: f64,
    },
    Exp,
    Log,
    SoftmaxXent {
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    GatherRows {
        indices: Vec<usize>,
    },
    Concat {
        axis: usize,
    },
    ChannelStd {
        eps: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(_) => "add",
            Op::EwAdd => "elementwise-add",
            Op::EwSub => "elementwise-sub",
            Op::EwMul => "elementwise-mul",
            Op::MulScalar(_) => "mul-by-scalar",
            Op::Relu => "relu",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool { .. } => "average-pool",
            Op::SpatialMean => "spatial-mean",
            Op::MaskPool => "mask-weighted-pool",
            Op::L2Rescale { .. } => "l2-rescale",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::SoftmaxXent { .. } => "softmax-cross-entropy-with-logits",
            Op::GatherRows { .. } => "gather-rows",
            Op::Concat { .. } => "concat",
            Op::ChannelStd { .. } => "channel-standardize",
        }
    }
}

/// The differentiable op vocabulary this engine supports.
pub const OP_SET: &[&str] = &[
    "matmul",
    "add",
    "mul-by-scalar",
    "elementwise-add",
    "elementwise-sub",
    "elementwise-mul",
    "relu",
    "conv2d",
    "average-pool",
    "spatial-mean",
    "mask-weighted-pool",
    "l2-rescale",
    "exp",
    "log",
    "softmax-cross-entropy-with-logits",
    "gather-rows",
    "concat",
    "channel-standardize",
];

/// Lists the supported differentiable ops.
pub fn op_set() -> &'static [&'static str] {
    OP_SET
}

/// Membership query against [`op_set`].
pub fn supports_op(name: &str) -> bool {
    OP_SET.contains(&name)
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
    name: Option<String>,
    trainable: bool,
}

/// Eagerly evaluated computation tape.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, None, false)
    }

    /// Named trainable leaf; `backward` reports a gradient for it.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, Some(name.to_string()), true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, name: Option<String>, trainable: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: trainable,
            name,
            trainable,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id.0].value.scalar_value()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| if n.trainable { n.name.clone() } else { None })
            .collect()
    }

    /// Name of the node when it is a trainable leaf.
    pub fn param_name_at(&self, id: NodeId) -> Option<String> {
        let n = &self.nodes[id.0];
        if n.trainable {
            n.name.clone()
        } else {
            None
        }
    }

    /// Replaces a leaf's value; shape must match. Call [`Graph::recompute`]
    /// afterwards to refresh downstream nodes.
    pub fn set_leaf_value(&mut self, id: NodeId, value: Tensor<T>) -> Result<(), TensorError> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(TensorError::BadArg {
                op: "set_leaf_value",
                detail: "node is not a leaf".into(),
            });
        }
        if node.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_leaf_value",
                detail: format!("{:?} vs {:?}", node.value.shape(), value.shape()),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Overwrites one coordinate of a leaf value in place.
    pub fn set_leaf_coord(&mut self, id: NodeId, coord: usize, value: T) -> Result<(), TensorError> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(TensorError::BadArg {
                op: "set_leaf_coord",
                detail: "node is not a leaf".into(),
            });
        }
        node.value.data_mut()[coord] = value;
        Ok(())
    }

    /// Re-runs the forward pass over the whole tape.
    pub fn recompute(&mut self) -> Result<(), TensorError> {
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &mut rest[0];
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &before[i.0].value).collect();
            node.value = eval_op(&node.op, &inputs)?;
        }
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId, TensorError> {
        let refs: Vec<&Tensor<T>> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
        let value = eval_op(&op, &refs)?;
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            name: None,
            trainable: false,
        });
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_flags(a, b, false, false)
    }

    pub fn matmul_flags(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId, TensorError> {
        self.push(Op::MatMul { ta, tb }, vec![a, b])
    }

    /// Broadcasting add: same-shape, row vector onto a matrix, channel vector
    /// onto an NCHW map, or a single-element tensor onto anything.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let kind = resolve_add_kind(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape())?;
        self.push(Op::Add(kind), vec![a, b])
    }

    pub fn ew_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::EwAdd, vec![a, b])
    }

    pub fn ew_sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::EwSub, vec![a, b])
    }

    pub fn ew_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::EwMul, vec![a, b])
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        self.push(Op::MulScalar(c), vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::Relu, vec![a])
    }

    /// x: (n, cin, h, w), w: (cout, cin, kh, kw) -> (n, cout, oh, ow).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId, TensorError> {
        self.push(Op::Conv2d { stride, pad }, vec![x, w])
    }

    pub fn avg_pool(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId, TensorError> {
        self.push(Op::AvgPool { kernel, stride }, vec![x])
    }

    /// (n, c, h, w) -> (n, c) mean over spatial positions.
    pub fn spatial_mean(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::SpatialMean, vec![x])
    }

    /// features: (n, c, h, w); weights: (n, k, h*w), non-negative constants.
    /// Output (n*k, c): row i*k+s is the weight-normalized pooled feature of
    /// slot s of image i. Gradients flow into the features only.
    pub fn mask_pool(&mut self, features: NodeId, weights: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[weights.0].requires_grad {
            return Err(TensorError::BadArg {
                op: "mask-weighted-pool",
                detail: "pooling weights must not require gradients".into(),
            });
        }
        self.push(Op::MaskPool, vec![features, weights])
    }

    /// Rescales every row of (n, d) to the given L2 norm.
    pub fn l2_rescale(&mut self, x: NodeId, target_norm: f64) -> Result<NodeId, TensorError> {
        self.push(Op::L2Rescale { target_norm }, vec![x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::Exp, vec![x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.push(Op::Log, vec![x])
    }

    /// logits: (rows, cols). Returns the scalar weighted sum of per-row
    /// cross-entropies -log softmax(logits_r)[target_r], stabilized by
    /// subtracting the row max.
    pub fn softmax_xent(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<NodeId, TensorError> {
        self.push(
            Op::SoftmaxXent {
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            vec![logits],
        )
    }

    /// (n, d) + row indices (repeats allowed) -> (len(indices), d).
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        self.push(
            Op::GatherRows {
                indices: indices.to_vec(),
            },
            vec![x],
        )
    }

    /// Concatenates rank-2 inputs along axis 0 or 1.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        self.push(Op::Concat { axis }, parts.to_vec())
    }

    /// Per-sample, per-channel standardization over spatial positions with a
    /// learned scale and shift: x (n, c, h, w), gamma (c,), beta (c,).
    pub fn channel_std(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        self.push(Op::ChannelStd { eps }, vec![x, gamma, beta])
    }

    /// Per-row losses of a softmax-cross-entropy node, recomputed from its
    /// stored logits. Used for diagnostics and the per-pair loss table.
    pub fn softmax_xent_rows(&self, node: NodeId) -> Result<Vec<T>, TensorError> {
        let n = &self.nodes[node.0];
        let Op::SoftmaxXent { targets, .. } = &n.op else {
            return Err(TensorError::BadArg {
                op: "softmax_xent_rows",
                detail: "node is not a softmax-cross-entropy op".into(),
            });
        };
        let logits = &self.nodes[n.inputs[0].0].value;
        Ok(xent_row_losses(logits, targets))
    }

    /// Reverse sweep from a scalar output. Returns the gradient for every
    /// named trainable leaf; leaves the output does not depend on map to
    /// zero tensors.
    pub fn backward(&mut self, output: NodeId) -> Result<BTreeMap<String, Tensor<T>>, TensorError> {
        let out_node = &self.nodes[output.0];
        if !out_node.value.is_scalar() {
            return Err(TensorError::NonScalarOutput {
                shape: format!("{:?}", out_node.value.shape()),
            });
        }

        // Reachability (downward from the output) restricted to grad-needing nodes.
        let mut needs = vec![false; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            needs[output.0] = true;
            for id in (0..=output.0).rev() {
                if !needs[id] {
                    continue;
                }
                for inp in &self.nodes[id].inputs {
                    if self.nodes[inp.0].requires_grad {
                        needs[inp.0] = true;
                    }
                }
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if needs[output.0] {
            grads[output.0] = Some(Tensor::full(out_node.value.shape().to_vec(), T::one()));
        }

        for id in (0..=output.0).rev() {
            if !needs[id] || grads[id].is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let grad_out = grads[id].clone().unwrap();
            let node = &self.nodes[id];
            let input_vals: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let contributions = backward_op(&node.op, &input_vals, &node.value, &grad_out)?;
            for (slot, contrib) in contributions.into_iter().enumerate() {
                let Some(c) = contrib else { continue };
                if !c.all_finite() {
                    return Err(TensorError::NonFinite {
                        op: self.nodes[id].op.name(),
                    });
                }
                let target = self.nodes[id].inputs[slot];
                if !needs[target.0] {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(existing) => accumulate(existing, &c),
                    slot_ref @ None => *slot_ref = Some(c),
                }
            }
        }

        let mut out = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                let name = node.name.clone().unwrap_or_else(|| format!("param{id}"));
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
                out.insert(name, g);
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(acc: &mut Tensor<T>, add: &Tensor<T>) {
    debug_assert_eq!(acc.shape(), add.shape());
    for (a, b) in acc.data_mut().iter_mut().zip(add.data()) {
        *a = *a + *b;
    }
}

fn resolve_add_kind(a: &[usize], b: &[usize]) -> Result<AddKind, TensorError> {
    let numel_b: usize = b.iter().product();
    if a == b {
        return Ok(AddKind::Same);
    }
    if numel_b == 1 {
        return Ok(AddKind::Scalar);
    }
    if a.len() == 2 && b.len() == 1 && b[0] == a[1] {
        return Ok(AddKind::RowVec);
    }
    if a.len() == 4 && b.len() == 1 && b[0] == a[1] {
        return Ok(AddKind::PerChannel);
    }
    Err(TensorError::ShapeMismatch {
        op: "add",
        detail: format!("no broadcast rule for {a:?} + {b:?}"),
    })
}

fn shape_err<T>(op: &'static str, detail: String) -> Result<T, TensorError> {
    Err(TensorError::ShapeMismatch { op, detail })
}

fn xent_row_losses<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Vec<T> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
            let mut sum = T::zero();
            for &v in row {
                sum = sum + (v - max).exp();
            }
            sum.ln() - (row[t] - max)
        })
        .collect()
}

/// Forward kernel dispatch; shared by the eager builder and `recompute`.
pub(super) fn eval_op<T: Scalar>(op: &Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    match op {
        Op::Leaf => unreachable!("leaves are never re-evaluated"),
        Op::MatMul { ta, tb } => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 {
                return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
            }
            let (am, ak) = if *ta {
                (a.shape()[1], a.shape()[0])
            } else {
                (a.shape()[0], a.shape()[1])
            };
            let (bk, bn) = if *tb {
                (b.shape()[1], b.shape()[0])
            } else {
                (b.shape()[0], b.shape()[1])
            };
            if ak != bk {
                return shape_err("matmul", format!("inner dims {ak} vs {bk}"));
            }
            let mut out = Tensor::zeros(vec![am, bn]);
            gemm(am, ak, bn, a.data(), *ta, b.data(), *tb, out.data_mut());
            Ok(out)
        }
        Op::Add(kind) => {
            let (a, b) = (inputs[0], inputs[1]);
            let mut out = a.clone();
            match kind {
                AddKind::Same => {
                    if a.shape() != b.shape() {
                        return shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape()));
                    }
                    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
                        *o = *o + v;
                    }
                }
                AddKind::Scalar => {
                    let v = b.data()[0];
                    for o in out.data_mut() {
                        *o = *o + v;
                    }
                }
                AddKind::RowVec => {
                    let n = a.shape()[1];
                    for row in out.data_mut().chunks_mut(n) {
                        for (o, &v) in row.iter_mut().zip(b.data()) {
                            *o = *o + v;
                        }
                    }
                }
                AddKind::PerChannel => {
                    let (c, hw) = (a.shape()[1], a.shape()[2] * a.shape()[3]);
                    for img in out.data_mut().chunks_mut(c * hw) {
                        for (ci, chan) in img.chunks_mut(hw).enumerate() {
                            let v = b.data()[ci];
                            for o in chan {
                                *o = *o + v;
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
        Op::EwAdd | Op::EwSub | Op::EwMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return shape_err("elementwise", format!("{:?} vs {:?}", a.shape(), b.shape()));
            }
            let mut out = a.clone();
            match op {
                Op::EwAdd => {
                    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
                        *o = *o + v;
                    }
                }
                Op::EwSub => {
                    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
                        *o = *o - v;
                    }
                }
                _ => {
                    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
                        *o = *o * v;
                    }
                }
            }
            Ok(out)
        }
        Op::MulScalar(c) => {
            let mut out = inputs[0].clone();
            let c = T::from_f64(*c);
            for o in out.data_mut() {
                *o = *o * c;
            }
            Ok(out)
        }
        Op::Relu => {
            let mut out = inputs[0].clone();
            for o in out.data_mut() {
                if *o < T::zero() {
                    *o = T::zero();
                }
            }
            Ok(out)
        }
        Op::Conv2d { stride, pad } => conv2d_forward(inputs[0], inputs[1], *stride, *pad),
        Op::AvgPool { kernel, stride } => {
            let x = inputs[0];
            if x.rank() != 4 {
                return shape_err("average-pool", format!("{:?}", x.shape()));
            }
            let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let oh = conv_out_extent(h, *kernel, *stride, 0)
                .ok_or_else(|| TensorError::ShapeMismatch {
                    op: "average-pool",
                    detail: format!("kernel {kernel} does not fit {h}x{w}"),
                })?;
            let ow = conv_out_extent(w, *kernel, *stride, 0).unwrap();
            let mut out = Tensor::zeros(vec![n, c, oh, ow]);
            let inv = T::one() / T::from_usize(kernel * kernel);
            let od = out.data_mut();
            for i in 0..n {
                for ci in 0..c {
                    let xc = &x.data()[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let mut acc = T::zero();
                            for ki in 0..*kernel {
                                for kj in 0..*kernel {
                                    acc = acc + xc[(oi * stride + ki) * w + (oj * stride + kj)];
                                }
                            }
                            od[((i * c + ci) * oh + oi) * ow + oj] = acc * inv;
                        }
                    }
                }
            }
            Ok(out)
        }
        Op::SpatialMean => {
            let x = inputs[0];
            if x.rank() != 4 {
                return shape_err("spatial-mean", format!("{:?}", x.shape()));
            }
            let (n, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
            let inv = T::one() / T::from_usize(hw);
            let mut out = Tensor::zeros(vec![n, c]);
            for (o, chan) in out.data_mut().iter_mut().zip(x.data().chunks(hw)) {
                let mut acc = T::zero();
                for &v in chan {
                    acc = acc + v;
                }
                *o = acc * inv;
            }
            let _ = (n, c);
            Ok(out)
        }
        Op::MaskPool => mask_pool_forward(inputs[0], inputs[1]),
        Op::L2Rescale { target_norm } => {
            let x = inputs[0];
            if x.rank() != 2 {
                return shape_err("l2-rescale", format!("{:?}", x.shape()));
            }
            let d = x.shape()[1];
            let alpha = T::from_f64(*target_norm);
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(d) {
                let mut sq = T::zero();
                for &v in row.iter() {
                    sq = sq + v * v;
                }
                let norm = sq.sqrt();
                if norm.as_f64() < 1e-30 {
                    return Err(TensorError::ZeroNormRow { op: "l2-rescale" });
                }
                let s = alpha / norm;
                for v in row {
                    *v = *v * s;
                }
            }
            Ok(out)
        }
        Op::Exp => {
            let mut out = inputs[0].clone();
            for o in out.data_mut() {
                *o = o.exp();
            }
            Ok(out)
        }
        Op::Log => {
            let mut out = inputs[0].clone();
            for o in out.data_mut() {
                *o = o.ln();
            }
            Ok(out)
        }
        Op::SoftmaxXent { targets, weights } => {
            let logits = inputs[0];
            if logits.rank() != 2 {
                return shape_err("softmax-cross-entropy-with-logits", format!("{:?}", logits.shape()));
            }
            let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
            if targets.len() != rows || weights.len() != rows {
                return shape_err(
                    "softmax-cross-entropy-with-logits",
                    format!("{rows} rows vs {} targets / {} weights", targets.len(), weights.len()),
                );
            }
            if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
                return Err(TensorError::BadArg {
                    op: "softmax-cross-entropy-with-logits",
                    detail: format!("target {t} out of range for {cols} columns"),
                });
            }
            let losses = xent_row_losses(logits, targets);
            let mut total = T::zero();
            for (l, &w) in losses.iter().zip(weights) {
                total = total + *l * T::from_f64(w);
            }
            Ok(Tensor::scalar(total))
        }
        Op::GatherRows { indices } => {
            let x = inputs[0];
            if x.rank() != 2 {
                return shape_err("gather-rows", format!("{:?}", x.shape()));
            }
            let (n, d) = (x.shape()[0], x.shape()[1]);
            if let Some(&i) = indices.iter().find(|&&i| i >= n) {
                return Err(TensorError::BadArg {
                    op: "gather-rows",
                    detail: format!("row index {i} out of range for {n} rows"),
                });
            }
            let mut data = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
            }
            Tensor::new(vec![indices.len(), d], data)
        }
        Op::Concat { axis } => {
            if inputs.is_empty() {
                return Err(TensorError::BadArg {
                    op: "concat",
                    detail: "needs at least one input".into(),
                });
            }
            if inputs.iter().any(|t| t.rank() != 2) || *axis > 1 {
                return shape_err("concat", "rank-2 inputs and axis 0 or 1 required".into());
            }
            match axis {
                0 => {
                    let d = inputs[0].shape()[1];
                    if inputs.iter().any(|t| t.shape()[1] != d) {
                        return shape_err("concat", "column counts differ".into());
                    }
                    let rows: usize = inputs.iter().map(|t| t.shape()[0]).sum();
                    let mut data = Vec::with_capacity(rows * d);
                    for t in inputs {
                        data.extend_from_slice(t.data());
                    }
                    Tensor::new(vec![rows, d], data)
                }
                _ => {
                    let n = inputs[0].shape()[0];
                    if inputs.iter().any(|t| t.shape()[0] != n) {
                        return shape_err("concat", "row counts differ".into());
                    }
                    let total: usize = inputs.iter().map(|t| t.shape()[1]).sum();
                    let mut data = Vec::with_capacity(n * total);
                    for r in 0..n {
                        for t in inputs {
                            let d = t.shape()[1];
                            data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
                        }
                    }
                    Tensor::new(vec![n, total], data)
                }
            }
        }
        Op::ChannelStd { eps } => channel_std_forward(inputs[0], inputs[1], inputs[2], *eps),
    }
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    if x.rank() != 4 || w.rank() != 4 {
        return shape_err("conv2d", format!("{:?} * {:?}", x.shape(), w.shape()));
    }
    let (n, cin, h, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wcin != cin {
        return shape_err("conv2d", format!("channels {cin} vs kernel {wcin}"));
    }
    let oh = conv_out_extent(h, kh, stride, pad).ok_or(TensorError::ShapeMismatch {
        op: "conv2d",
        detail: format!("kernel {kh} does not fit height {h} with pad {pad}"),
    })?;
    let ow = conv_out_extent(iw, kw, stride, pad).ok_or(TensorError::ShapeMismatch {
        op: "conv2d",
        detail: format!("kernel {kw} does not fit width {iw} with pad {pad}"),
    })?;
    let ckk = cin * kh * kw;
    let ohw = oh * ow;
    let mut out = Tensor::zeros(vec![n, cout, oh, ow]);
    out.data_mut()
        .par_chunks_mut(cout * ohw)
        .zip(x.data().par_chunks(cin * h * iw))
        .for_each(|(oimg, ximg)| {
            let mut cols = vec![T::zero(); ckk * ohw];
            im2col(ximg, cin, h, iw, kh, kw, stride, pad, oh, ow, &mut cols);
            gemm(cout, ckk, ohw, w.data(), false, &cols, false, oimg);
        });
    Ok(out)
}

fn mask_pool_forward<T: Scalar>(f: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if f.rank() != 4 || w.rank() != 3 {
        return shape_err("mask-weighted-pool", format!("{:?} with {:?}", f.shape(), w.shape()));
    }
    let (n, c, hw) = (f.shape()[0], f.shape()[1], f.shape()[2] * f.shape()[3]);
    let (wn, k, whw) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if wn != n || whw != hw {
        return shape_err(
            "mask-weighted-pool",
            format!("features {:?} vs weights {:?}", f.shape(), w.shape()),
        );
    }
    if w.data().iter().any(|v| *v < T::zero()) {
        return Err(TensorError::BadArg {
            op: "mask-weighted-pool",
            detail: "negative pooling weight".into(),
        });
    }
    let mut out = Tensor::zeros(vec![n * k, c]);
    let od = out.data_mut();
    for i in 0..n {
        for s in 0..k {
            let ws = &w.data()[(i * k + s) * hw..(i * k + s + 1) * hw];
            let mut wsum = T::zero();
            for &v in ws {
                wsum = wsum + v;
            }
            if wsum.as_f64() <= 0.0 {
                return Err(TensorError::EmptyMaskPool { image: i, slot: s });
            }
            for ci in 0..c {
                let fc = &f.data()[(i * c + ci) * hw..(i * c + ci + 1) * hw];
                let mut acc = T::zero();
                for (&fv, &wv) in fc.iter().zip(ws) {
                    acc = acc + wv * fv;
                }
                od[(i * k + s) * c + ci] = acc / wsum;
            }
        }
    }
    Ok(out)
}

fn channel_std_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>, TensorError> {
    if x.rank() != 4 || gamma.rank() != 1 || beta.rank() != 1 {
        return shape_err("channel-standardize", format!("{:?}", x.shape()));
    }
    let (n, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    if gamma.shape()[0] != c || beta.shape()[0] != c {
        return shape_err(
            "channel-standardize",
            format!("{c} channels vs gamma {:?} / beta {:?}", gamma.shape(), beta.shape()),
        );
    }
    let eps = T::from_f64(eps);
    let inv_hw = T::one() / T::from_usize(hw);
    let mut out = x.clone();
    for i in 0..n {
        for ci in 0..c {
            let chan = &mut out.data_mut()[(i * c + ci) * hw..(i * c + ci + 1) * hw];
            let mut mean = T::zero();
            for &v in chan.iter() {
                mean = mean + v;
            }
            mean = mean * inv_hw;
            let mut var = T::zero();
            for &v in chan.iter() {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_hw;
            let inv_std = T::one() / (var + eps).sqrt();
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for v in chan {
                *v = (*v - mean) * inv_std * g + b;
            }
        }
    }
    Ok(out)
}

/// Per-input gradient contributions of one op.
fn backward_op<T: Scalar>(
    op: &Op,
    inputs: &[&Tensor<T>],
    value: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<Vec<Option<Tensor<T>>>, TensorError> {
    match op {
        Op::Leaf => Ok(vec![]),
        Op::MatMul { ta, tb } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, n) = (grad.shape()[0], grad.shape()[1]);
            let kdim = if *ta { a.shape()[0] } else { a.shape()[1] };
            let mut da = Tensor::zeros(a.shape().to_vec());
            let mut db = Tensor::zeros(b.shape().to_vec());
            match (ta, tb) {
                (false, false) => {
                    gemm(m, n, kdim, grad.data(), false, b.data(), true, da.data_mut());
                    gemm(kdim, m, n, a.data(), true, grad.data(), false, db.data_mut());
                }
                (false, true) => {
                    gemm(m, n, kdim, grad.data(), false, b.data(), false, da.data_mut());
                    gemm(n, m, kdim, grad.data(), true, a.data(), false, db.data_mut());
                }
                (true, false) => {
                    gemm(kdim, n, m, b.data(), false, grad.data(), true, da.data_mut());
                    gemm(kdim, m, n, a.data(), false, grad.data(), false, db.data_mut());
                }
                (true, true) => {
                    gemm(kdim, n, m, b.data(), true, grad.data(), true, da.data_mut());
                    gemm(n, m, kdim, grad.data(), true, a.data(), true, db.data_mut());
                }
            }
            Ok(vec![Some(da), Some(db)])
        }
        Op::Add(kind) => {
            let b = inputs[1];
            let da = grad.clone();
            let db = match kind {
                AddKind::Same => grad.clone(),
                AddKind::Scalar => {
                    let mut acc = T::zero();
                    for &v in grad.data() {
                        acc = acc + v;
                    }
                    Tensor::full(b.shape().to_vec(), acc)
                }
                AddKind::RowVec => {
                    let n = grad.shape()[1];
                    let mut out = Tensor::zeros(b.shape().to_vec());
                    for row in grad.data().chunks(n) {
                        for (o, &v) in out.data_mut().iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                    out
                }
                AddKind::PerChannel => {
                    let (c, hw) = (grad.shape()[1], grad.shape()[2] * grad.shape()[3]);
                    let mut out = Tensor::zeros(b.shape().to_vec());
                    for img in grad.data().chunks(c * hw) {
                        for (ci, chan) in img.chunks(hw).enumerate() {
                            let mut acc = T::zero();
                            for &v in chan {
                                acc = acc + v;
                            }
                            out.data_mut()[ci] = out.data_mut()[ci] + acc;
                        }
                    }
                    out
                }
            };
            Ok(vec![Some(da), Some(db)])
        }
        Op::EwAdd => Ok(vec![Some(grad.clone()), Some(grad.clone())]),
        Op::EwSub => {
            let mut db = grad.clone();
            for v in db.data_mut() {
                *v = -*v;
            }
            Ok(vec![Some(grad.clone()), Some(db)])
        }
        Op::EwMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let mut da = grad.clone();
            for (o, &v) in da.data_mut().iter_mut().zip(b.data()) {
                *o = *o * v;
            }
            let mut db = grad.clone();
            for (o, &v) in db.data_mut().iter_mut().zip(a.data()) {
                *o = *o * v;
            }
            Ok(vec![Some(da), Some(db)])
        }
        Op::MulScalar(c) => {
            let mut da = grad.clone();
            let c = T::from_f64(*c);
            for v in da.data_mut() {
                *v = *v * c;
            }
            Ok(vec![Some(da)])
        }
        Op::Relu => {
            let x = inputs[0];
            let mut da = grad.clone();
            for (o, &v) in da.data_mut().iter_mut().zip(x.data()) {
                if v <= T::zero() {
                    *o = T::zero();
                }
            }
            Ok(vec![Some(da)])
        }
        Op::Conv2d { stride, pad } => conv2d_backward(inputs[0], inputs[1], grad, *stride, *pad),
        Op::AvgPool { kernel, stride } => {
            let x = inputs[0];
            let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (oh, ow) = (grad.shape()[2], grad.shape()[3]);
            let inv = T::one() / T::from_usize(kernel * kernel);
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for i in 0..n {
                for ci in 0..c {
                    let gc = &grad.data()[(i * c + ci) * oh * ow..(i * c + ci + 1) * oh * ow];
                    let xc = &mut dx.data_mut()[(i * c + ci) * h * w..(i * c + ci + 1) * h * w];
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let g = gc[oi * ow + oj] * inv;
                            for ki in 0..*kernel {
                                for kj in 0..*kernel {
                                    let idx = (oi * stride + ki) * w + (oj * stride + kj);
                                    xc[idx] = xc[idx] + g;
                                }
                            }
                        }
                    }
                }
            }
            Ok(vec![Some(dx)])
        }
        Op::SpatialMean => {
            let x = inputs[0];
            let hw = x.shape()[2] * x.shape()[3];
            let inv = T::one() / T::from_usize(hw);
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for (chan, &g) in dx.data_mut().chunks_mut(hw).zip(grad.data()) {
                let gv = g * inv;
                for v in chan {
                    *v = gv;
                }
            }
            Ok(vec![Some(dx)])
        }
        Op::MaskPool => {
            let (f, w) = (inputs[0], inputs[1]);
            let (n, c, hw) = (f.shape()[0], f.shape()[1], f.shape()[2] * f.shape()[3]);
            let k = w.shape()[1];
            let mut df = Tensor::zeros(f.shape().to_vec());
            let dfd = df.data_mut();
            for i in 0..n {
                let mut wsums = vec![T::zero(); k];
                for (s, ws) in wsums.iter_mut().enumerate() {
                    for &v in &w.data()[(i * k + s) * hw..(i * k + s + 1) * hw] {
                        *ws = *ws + v;
                    }
                }
                for ci in 0..c {
                    let dchan = &mut dfd[(i * c + ci) * hw..(i * c + ci + 1) * hw];
                    for s in 0..k {
                        let g = grad.data()[(i * k + s) * c + ci] / wsums[s];
                        let ws = &w.data()[(i * k + s) * hw..(i * k + s + 1) * hw];
                        for (o, &wv) in dchan.iter_mut().zip(ws) {
                            *o = *o + wv * g;
                        }
                    }
                }
            }
            Ok(vec![Some(df), None])
        }
        Op::L2Rescale { target_norm } => {
            let x = inputs[0];
            let d = x.shape()[1];
            let alpha = T::from_f64(*target_norm);
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for (r, (xrow, grow)) in x.data().chunks(d).zip(grad.data().chunks(d)).enumerate() {
                let mut sq = T::zero();
                for &v in xrow {
                    sq = sq + v * v;
                }
                let norm = sq.sqrt();
                let mut dot = T::zero();
                for (&xv, &gv) in xrow.iter().zip(grow) {
                    dot = dot + xv * gv;
                }
                let scale = alpha / norm;
                let inv_sq = T::one() / sq;
                let drow = &mut dx.data_mut()[r * d..(r + 1) * d];
                for ((o, &xv), &gv) in drow.iter_mut().zip(xrow).zip(grow) {
                    *o = scale * (gv - xv * dot * inv_sq);
                }
            }
            Ok(vec![Some(dx)])
        }
        Op::Exp => {
            // value = e^x
            let mut dx = grad.clone();
            for (o, &v) in dx.data_mut().iter_mut().zip(value.data()) {
                *o = *o * v;
            }
            Ok(vec![Some(dx)])
        }
        Op::Log => {
            let x = inputs[0];
            let mut dx = grad.clone();
            for (o, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                *o = *o / v;
            }
            Ok(vec![Some(dx)])
        }
        Op::SoftmaxXent { targets, weights } => {
            let logits = inputs[0];
            let cols = logits.shape()[1];
            let go = grad.data()[0];
            let mut dl = Tensor::zeros(logits.shape().to_vec());
            for ((xrow, orow), (&t, &wt)) in logits
                .data()
                .chunks(cols)
                .zip(dl.data_mut().chunks_mut(cols))
                .zip(targets.iter().zip(weights))
            {
                let max = xrow.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
                let mut sum = T::zero();
                for &v in xrow {
                    sum = sum + (v - max).exp();
                }
                let wt = T::from_f64(wt) * go;
                for (j, (o, &v)) in orow.iter_mut().zip(xrow).enumerate() {
                    let p = (v - max).exp() / sum;
                    let ind = if j == t { T::one() } else { T::zero() };
                    *o = wt * (p - ind);
                }
            }
            Ok(vec![Some(dl)])
        }
        Op::GatherRows { indices } => {
            let x = inputs[0];
            let d = x.shape()[1];
            let mut dx = Tensor::zeros(x.shape().to_vec());
            for (r, &i) in indices.iter().enumerate() {
                let grow = &grad.data()[r * d..(r + 1) * d];
                let orow = &mut dx.data_mut()[i * d..(i + 1) * d];
                for (o, &v) in orow.iter_mut().zip(grow) {
                    *o = *o + v;
                }
            }
            Ok(vec![Some(dx)])
        }
        Op::Concat { axis } => {
            let mut out = Vec::with_capacity(inputs.len());
            match axis {
                0 => {
                    let mut offset = 0;
                    for t in inputs {
                        let rows = t.shape()[0];
                        let d = t.shape()[1];
                        let part = Tensor::new(
                            t.shape().to_vec(),
                            grad.data()[offset * d..(offset + rows) * d].to_vec(),
                        )?;
                        out.push(Some(part));
                        offset += rows;
                    }
                }
                _ => {
                    let n = inputs[0].shape()[0];
                    let total = grad.shape()[1];
                    let mut offset = 0;
                    for t in inputs {
                        let d = t.shape()[1];
                        let mut data = Vec::with_capacity(n * d);
                        for r in 0..n {
                            data.extend_from_slice(&grad.data()[r * total + offset..r * total + offset + d]);
                        }
                        out.push(Some(Tensor::new(t.shape().to_vec(), data)?));
                        offset += d;
                    }
                }
            }
            Ok(out)
        }
        Op::ChannelStd { eps } => channel_std_backward(inputs[0], inputs[1], grad, *eps),
    }
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Vec<Option<Tensor<T>>>, TensorError> {
    let (n, cin, h, iw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (grad.shape()[2], grad.shape()[3]);
    let ckk = cin * kh * kw;
    let ohw = oh * ow;

    // dW: per-image partials computed in parallel, reduced in image order.
    let partials: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ximg = &x.data()[i * cin * h * iw..(i + 1) * cin * h * iw];
            let gimg = &grad.data()[i * cout * ohw..(i + 1) * cout * ohw];
            let mut cols = vec![T::zero(); ckk * ohw];
            im2col(ximg, cin, h, iw, kh, kw, stride, pad, oh, ow, &mut cols);
            let mut dw = vec![T::zero(); cout * ckk];
            gemm(cout, ohw, ckk, gimg, false, &cols, true, &mut dw);
            dw
        })
        .collect();
    let mut dw = Tensor::zeros(w.shape().to_vec());
    for part in &partials {
        for (o, &v) in dw.data_mut().iter_mut().zip(part) {
            *o = *o + v;
        }
    }

    // dX per image.
    let mut dx = Tensor::zeros(x.shape().to_vec());
    dx.data_mut()
        .par_chunks_mut(cin * h * iw)
        .zip(grad.data().par_chunks(cout * ohw))
        .for_each(|(dximg, gimg)| {
            let mut dcols = vec![T::zero(); ckk * ohw];
            gemm(ckk, cout, ohw, w.data(), true, gimg, false, &mut dcols);
            col2im_add(&dcols, cin, h, iw, kh, kw, stride, pad, oh, ow, dximg);
        });

    Ok(vec![Some(dx), Some(dw)])
}

fn channel_std_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
    eps: f64,
) -> Result<Vec<Option<Tensor<T>>>, TensorError> {
    let (n, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    let eps = T::from_f64(eps);
    let inv_hw = T::one() / T::from_usize(hw);
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let mut dgamma = Tensor::zeros(vec![c]);
    let mut dbeta = Tensor::zeros(vec![c]);
    for i in 0..n {
        for ci in 0..c {
            let chan = &x.data()[(i * c + ci) * hw..(i * c + ci + 1) * hw];
            let gchan = &grad.data()[(i * c + ci) * hw..(i * c + ci + 1) * hw];
            let mut mean = T::zero();
            for &v in chan {
                mean = mean + v;
            }
            mean = mean * inv_hw;
            let mut var = T::zero();
            for &v in chan {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_hw;
            let inv_std = T::one() / (var + eps).sqrt();
            let g = gamma.data()[ci];

            // dy/dgamma and dy/dbeta accumulate across samples and positions.
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for (&gv, &xv) in gchan.iter().zip(chan) {
                let xhat = (xv - mean) * inv_std;
                sum_g = sum_g + gv;
                sum_gx = sum_gx + gv * xhat;
            }
            dbeta.data_mut()[ci] = dbeta.data_mut()[ci] + sum_g;
            dgamma.data_mut()[ci] = dgamma.data_mut()[ci] + sum_gx;

            let mean_g = sum_g * inv_hw;
            let mean_gx = sum_gx * inv_hw;
            let dchan = &mut dx.data_mut()[(i * c + ci) * hw..(i * c + ci + 1) * hw];
            for ((o, &gv), &xv) in dchan.iter_mut().zip(gchan).zip(chan) {
                let xhat = (xv - mean) * inv_std;
                *o = g * inv_std * (gv - mean_g - xhat * mean_gx);
            }
        }
    }
    Ok(vec![Some(dx), Some(dgamma), Some(dbeta)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(vec![rows, cols], f)
    }

    #[test]
    fn op_set_membership() {
        assert!(supports_op("matmul"));
        assert!(supports_op("mask-weighted-pool"));
        assert!(!supports_op("attention"));
        assert_eq!(op_set().len(), 18);
    }

    #[test]
    fn square_gradient_is_two_x() {
        // f(x) = x*x at x=3 -> df/dx = 6.
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::scalar(3.0));
        let y = g.ew_mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads["x"].scalar_value(), 6.0);
    }

    #[test]
    fn mask_pool_uniform_weights_spread_gradient_evenly() {
        let n = 6usize;
        let mut g = Graph::<f64>::new();
        let f = g.param("f", Tensor::from_fn(vec![1, 1, 2, 3], |i| i as f64));
        let w = g.leaf(Tensor::full(vec![1, 1, n], 1.0));
        let pooled = g.mask_pool(f, w).unwrap();
        // Scalar output: the pooled value itself (1x1 matrix).
        let grads = g.backward(pooled).unwrap();
        for &v in grads["f"].data() {
            assert!((v - 1.0 / n as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_pool_uniform_equals_spatial_mean_bitwise() {
        let feat = Tensor::<f32>::from_fn(vec![2, 3, 4, 4], |i| ((i * 37 % 101) as f32) * 0.013 - 0.5);
        let mut g = Graph::<f32>::new();
        let f = g.leaf(feat.clone());
        let w = g.leaf(Tensor::full(vec![2, 1, 16], 1.0f32));
        let pooled = g.mask_pool(f, w).unwrap();
        let f2 = g.leaf(feat);
        let mean = g.spatial_mean(f2).unwrap();
        assert_eq!(g.value(pooled).data(), g.value(mean).data());
    }

    #[test]
    fn untouched_params_get_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::scalar(2.0));
        let unused = g.param("unused", Tensor::zeros(vec![3]));
        let y = g.ew_mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads["unused"], Tensor::zeros(vec![3]));
        let _ = unused;
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::zeros(vec![2, 2]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarOutput { .. })));
    }

    #[test]
    fn softmax_xent_matches_naive_reference() {
        // Invariant: equals -log(exp(z_t)/sum exp(z_i)) for |z| <= 20.
        let logits = t2(4, 5, |i| ((i as f64) * 7.3).sin() * 20.0);
        let targets = [0usize, 3, 2, 4];
        let mut g = Graph::<f64>::new();
        let l = g.leaf(logits.clone());
        for (r, &t) in targets.iter().enumerate() {
            let mut w = vec![0.0; 4];
            w[r] = 1.0;
            let node = g.softmax_xent(l, &targets, &w).unwrap();
            let row = &logits.data()[r * 5..(r + 1) * 5];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            let naive = -(row[t].exp() / denom).ln();
            assert!((g.scalar_value(node) - naive).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_rescale_errors_on_zero_row() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(vec![1, 4]));
        assert!(matches!(
            g.l2_rescale(x, 3.16),
            Err(TensorError::ZeroNormRow { .. })
        ));
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let build = || {
            let mut g = Graph::<f64>::new();
            let w = g.param("w", Tensor::from_fn(vec![4, 4], |i| ((i * 13 % 7) as f64) - 3.0));
            let u = g.leaf(Tensor::from_fn(vec![4, 1], |i| i as f64 * 0.5 - 1.0));
            let h = g.matmul(w, u).unwrap();
            let r = g.relu(h).unwrap();
            let ones = g.leaf(Tensor::full(vec![1, 4], 1.0));
            let s = g.matmul(ones, r).unwrap();
            let grads = g.backward(s).unwrap();
            grads["w"].data().to_vec()
        };
        let a = build();
        let b = build();
        assert_eq!(a, b);
    }

    #[test]
    fn concat_and_gather_round_trip() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t2(2, 3, |i| i as f64));
        let b = g.leaf(t2(2, 2, |i| 10.0 + i as f64));
        let cat = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(cat).shape(), &[2, 5]);
        assert_eq!(g.value(cat).data()[3], 10.0);
        let picked = g.gather_rows(cat, &[1, 1, 0]).unwrap();
        assert_eq!(g.value(picked).shape(), &[3, 5]);
        assert_eq!(g.value(picked).data()[0], 3.0);
    }

    #[test]
    fn recompute_after_leaf_update() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::scalar(3.0));
        let y = g.ew_mul(x, x).unwrap();
        assert_eq!(g.scalar_value(y), 9.0);
        g.set_leaf_value(x, Tensor::scalar(4.0)).unwrap();
        g.recompute().unwrap();
        assert_eq!(g.scalar_value(y), 16.0);
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(1e308));
        let doubled = g.ew_add(x, x); // overflows to inf
        assert!(matches!(doubled, Err(TensorError::NonFinite { .. })));
    }
}
