//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Nodes are appended in evaluation order, so the record is always
//! topologically sorted and the backward sweep is a single reverse scan that
//! visits each node once. Only nodes that depend on a parameter leaf carry
//! gradients; constant inputs (frozen weights, images) cost nothing in the
//! reverse sweep.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{shape_err, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    BatchNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    /// Scalar node whose local Jacobian was computed analytically up front.
    Fused {
        inputs: Vec<NodeId>,
        local_grads: Vec<Tensor>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    retain_grad: bool,
}

/// Ordered record of primitive operations and their outputs.
#[derive(Debug, Default)]
pub struct ComputationTape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

impl ComputationTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Keeps the gradient of an intermediate node in the [`Gradients`]
    /// returned by [`backward`](Self::backward). Leaves are always kept.
    pub fn retain_grad(&mut self, id: NodeId) {
        self.nodes[id.0].retain_grad = true;
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad, retain_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = self.needs(inputs);
        self.push(value, op, needs_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let v = ops::scale(self.value(a), s)?;
        Ok(self.record(v, Op::Scale(a, s), &[a]))
    }

    /// Row-broadcast bias add on a 2-D node.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::add_bias(self.value(x), self.value(bias))?;
        Ok(self.record(v, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = ops::relu(self.value(x));
        self.record(v, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = ops::sigmoid(self.value(x));
        self.record(v, Op::Sigmoid(x), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::sum(self.value(x))?;
        Ok(self.record(v, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::mean(self.value(x))?;
        Ok(self.record(v, Op::Mean(x), &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.record(v, Op::Reshape(x), &[x]))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let v = ops::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.record(v, Op::Conv2d { x, kernel, bias, stride, pad }, &inputs))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (v, argmax) = ops::max_pool2(self.value(x))?;
        Ok(self.record(v, Op::MaxPool2 { x, argmax }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::global_avg_pool(self.value(x))?;
        Ok(self.record(v, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn batch_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (v, inv_std) = ops::batch_norm(self.value(x), eps)?;
        Ok(self.record(v, Op::BatchNorm { x, inv_std }, &[x]))
    }

    /// Records a scalar whose gradient with respect to each input is already
    /// known. `local_grads[i]` must have the shape of `inputs[i]`.
    pub fn fused_scalar(
        &mut self,
        inputs: &[NodeId],
        value: f64,
        local_grads: Vec<Tensor>,
    ) -> Result<NodeId> {
        if inputs.len() != local_grads.len() {
            return Err(shape_err!("fused node: {} inputs, {} gradients", inputs.len(), local_grads.len()));
        }
        for (id, g) in inputs.iter().zip(&local_grads) {
            if self.value(*id).shape() != g.shape() {
                return Err(shape_err!(
                    "fused node gradient {:?} for input {:?}",
                    g.shape(),
                    self.value(*id).shape()
                ));
            }
        }
        let v = Tensor::checked(vec![1], vec![value], "fused scalar")?;
        Ok(self.record(v, Op::Fused { inputs: inputs.to_vec(), local_grads }, inputs))
    }

    /// Mean binary cross-entropy between sigmoid(`logits`) and `targets`.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let z = self.value(logits);
        let loss = ops::bce_with_logits(z.data(), targets)?;
        let grad = Tensor::from_parts(z.shape().to_vec(), ops::bce_with_logits_grad(z.data(), targets));
        self.fused_scalar(&[logits], loss, vec![grad])
    }

    /// Gradients of the scalar `root` with respect to all upstream nodes
    /// that depend on a parameter.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let wants = |id: &NodeId| self.nodes[id.0].needs_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), &g);
                    accumulate(&mut grads, *a, da, wants(a));
                    accumulate(&mut grads, *b, db, wants(b));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone(), wants(a));
                    accumulate(&mut grads, *b, g.clone(), wants(b));
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        accumulate(&mut grads, *a, ops::mul(&g, self.value(*b))?, true);
                    }
                    if wants(b) {
                        accumulate(&mut grads, *b, ops::mul(&g, self.value(*a))?, true);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, ops::scale(&g, *s)?, wants(a)),
                Op::AddBias(x, b) => {
                    if wants(b) {
                        let db = ops::add_bias_backward(&g, self.value(*b).shape());
                        accumulate(&mut grads, *b, db, true);
                    }
                    accumulate(&mut grads, *x, g.clone(), wants(x));
                }
                Op::Relu(x) => {
                    accumulate(&mut grads, *x, ops::relu_backward(self.value(*x), &g), wants(x))
                }
                Op::Sigmoid(x) => {
                    accumulate(&mut grads, *x, ops::sigmoid_backward(&node.value, &g), wants(x))
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), s), wants(x));
                }
                Op::Mean(x) => {
                    let xs = self.value(*x);
                    let s = g.data()[0] / xs.numel() as f64;
                    accumulate(&mut grads, *x, Tensor::full(xs.shape(), s), wants(x));
                }
                Op::Reshape(x) => {
                    let back = g.reshape(self.value(*x).shape())?;
                    accumulate(&mut grads, *x, back, wants(x));
                }
                Op::Conv2d { x, kernel, bias, stride, pad } => {
                    let (dx, dk, db) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*kernel),
                        &g,
                        *stride,
                        *pad,
                        wants(x),
                    )?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx, true);
                    }
                    accumulate(&mut grads, *kernel, dk, wants(kernel));
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, db, wants(b));
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let dx = ops::max_pool2_backward(self.value(*x).shape(), argmax, &g);
                    accumulate(&mut grads, *x, dx, wants(x));
                }
                Op::GlobalAvgPool(x) => {
                    let dx = ops::global_avg_pool_backward(self.value(*x).shape(), &g);
                    accumulate(&mut grads, *x, dx, wants(x));
                }
                Op::BatchNorm { x, inv_std } => {
                    let dx = ops::batch_norm_backward(&node.value, inv_std, &g);
                    accumulate(&mut grads, *x, dx, wants(x));
                }
                Op::Fused { inputs, local_grads } => {
                    let s = g.data()[0];
                    for (id, lg) in inputs.iter().zip(local_grads) {
                        if wants(id) {
                            accumulate(&mut grads, *id, ops::scale(lg, s)?, true);
                        }
                    }
                }
            }
            if matches!(node.op, Op::Leaf) || node.retain_grad {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Hash of every piecewise-linear branch taken in the forward pass
    /// (ReLU signs and max-pool winners). Finite differences are only valid
    /// between two evaluations that share a signature.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor, wanted: bool) {
    if !wanted {
        return;
    }
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        slot => *slot = Some(g),
    }
}
