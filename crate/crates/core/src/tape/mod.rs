//! Reverse-mode autodiff on a Wengert list.
//!
//! A `Tape` owns every intermediate value of one forward pass. Ops append
//! nodes in topological order (inputs always precede their consumers), so the
//! backward pass is a single reverse sweep that visits each node exactly
//! once. Parameters enter the tape as leaves tagged with their registry
//! index; `export_param_grads` moves their gradients back out.

mod conv;
mod linalg;
mod pointwise;
mod pool;
mod resize;
mod structure;

use crate::error::{Result, XmsError};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a `Tape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Affine { a: f64 },
    Scale,
    BMul,
    BAdd,
    BSub,
    Sigmoid,
    Tanh,
    Relu,
    Sqrt,
    Ln,
    Clamp { lo: f64, hi: f64 },
    Softmax { axis: usize },
    SumAll,
    Cosine { eps: f64 },
    MatMul,
    Linear,
    Transpose2d,
    Reshape,
    Concat { axis: usize },
    Chunk { parts: usize, index: usize },
    ChannelShuffle { groups: usize },
    Conv2d { stride: usize, padding: usize, groups: usize },
    MaxPool2d { argmax: Vec<usize> },
    AvgPool2d { window: usize, stride: usize, padding: usize },
    GlobalAvgPool,
    GlobalMaxPool { argmax: Vec<usize> },
    ChannelMax { argmax: Vec<usize> },
    ChannelMean,
    ChannelL2Norm,
    BilinearResize,
    WeightedBce { target: Vec<T>, weights: Vec<T> },
    WeightedIou { target: Vec<T>, weights: Vec<T> },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Affine { .. } => "affine",
            Op::Scale => "scale",
            Op::BMul => "broadcast_mul",
            Op::BAdd => "broadcast_add",
            Op::BSub => "broadcast_sub",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Sqrt => "sqrt",
            Op::Ln => "ln",
            Op::Clamp { .. } => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::SumAll => "sum_all",
            Op::Cosine { .. } => "cosine_similarity",
            Op::MatMul => "matmul",
            Op::Linear => "linear",
            Op::Transpose2d => "transpose2d",
            Op::Reshape => "reshape",
            Op::Concat { .. } => "concat",
            Op::Chunk { .. } => "chunk",
            Op::ChannelShuffle { .. } => "channel_shuffle",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::GlobalMaxPool { .. } => "global_max_pool",
            Op::ChannelMax { .. } => "channel_max",
            Op::ChannelMean => "channel_mean",
            Op::ChannelL2Norm => "channel_l2_norm",
            Op::BilinearResize => "bilinear_resize",
            Op::WeightedBce { .. } => "weighted_bce",
            Op::WeightedIou { .. } => "weighted_iou",
        }
    }
}

/// Every differentiable op kind recorded by the tape. The gradient-check
/// registry must collectively exercise all of these; the coverage test
/// compares against this list.
pub const ALL_DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "affine",
    "scale",
    "broadcast_mul",
    "broadcast_add",
    "broadcast_sub",
    "sigmoid",
    "tanh",
    "relu",
    "sqrt",
    "ln",
    "clamp",
    "softmax",
    "sum_all",
    "cosine_similarity",
    "matmul",
    "linear",
    "transpose2d",
    "reshape",
    "concat",
    "chunk",
    "channel_shuffle",
    "conv2d",
    "max_pool2d",
    "avg_pool2d",
    "global_avg_pool",
    "global_max_pool",
    "channel_max",
    "channel_mean",
    "channel_l2_norm",
    "bilinear_resize",
    "weighted_bce",
    "weighted_iou",
];

pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) param: Option<usize>,
}

/// One forward pass worth of computation, replayable in reverse.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    flops: u64,
    strict_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            flops: 0,
            strict_finite: false,
        }
    }

    /// Check every op output for NaN/Inf as it is recorded. Used by tests;
    /// model forward instead checks per block.
    pub fn with_strict_finite() -> Self {
        Tape {
            nodes: Vec::new(),
            flops: 0,
            strict_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate count of everything recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub(crate) fn push(&mut self, node: Node<T>) -> Result<NodeId> {
        debug_assert!(node.inputs.iter().all(|i| i.0 < self.nodes.len()));
        if self.strict_finite && !node.data.iter().all(|v| v.is_finite()) {
            return Err(XmsError::NonFinite(node.op.name().to_string()));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(node);
        Ok(id)
    }

    pub(crate) fn add_flops(&mut self, n: u64) {
        self.flops += n;
    }

    /// Record a constant leaf.
    pub fn constant(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            grad: None,
            param: None,
        })
        .expect("leaf push cannot fail")
    }

    pub fn constant_scalar(&mut self, v: T) -> NodeId {
        self.constant(&Tensor::scalar(v))
    }

    /// Record a parameter leaf; its gradient is exported back to the set.
    pub fn leaf_param(&mut self, params: &ParamSet<T>, idx: usize) -> NodeId {
        let p = params.get(idx);
        self.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
            grad: None,
            param: Some(idx),
        })
        .expect("leaf push cannot fail")
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: NodeId) -> Tensor<T> {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        let n = &self.nodes[id.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.shape.clone(), g.clone()).expect("grad shape is consistent"))
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar_value(&self, id: NodeId) -> Result<T> {
        self.value(id).item()
    }

    pub fn assert_finite(&self, id: NodeId, context: &str) -> Result<()> {
        if self.nodes[id.0].data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(XmsError::NonFinite(context.to_string()))
        }
    }

    /// Names of all op kinds recorded on this tape (deduplicated).
    pub fn recorded_op_names(&self) -> Vec<&'static str> {
        let mut names: Vec<&'static str> = self.nodes.iter().map(|n| n.op.name()).collect();
        names.sort_unstable();
        names.dedup();
        names
    }

    fn accum_grad(&mut self, id: NodeId, contribution: Vec<T>) {
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(contribution.len(), node.data.len());
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi = *gi + ci;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// that the loss depends on; untouched nodes keep `grad = None`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(XmsError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].shape),
            ));
        }
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            self.backprop_node(NodeId(id));
        }
        Ok(())
    }

    /// Add the gradients of parameter leaves into the parameter set
    /// (accumulating, so multiple backward passes form a batch).
    pub fn export_param_grads(&self, params: &mut ParamSet<T>) {
        for node in &self.nodes {
            if let (Some(idx), Some(grad)) = (node.param, node.grad.as_ref()) {
                params.accumulate_grad(idx, grad);
            }
        }
    }

    fn backprop_node(&mut self, id: NodeId) {
        let gout = match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => return,
        };
        let op = self.nodes[id.0].op.clone();
        if matches!(op, Op::Leaf) {
            return;
        }
        let inputs = self.nodes[id.0].inputs.clone();
        let out_shape = self.nodes[id.0].shape.clone();
        let out_data = self.nodes[id.0].data.clone();
        let in_shapes: Vec<Vec<usize>> =
            inputs.iter().map(|i| self.nodes[i.0].shape.clone()).collect();
        let in_data: Vec<Vec<T>> = inputs.iter().map(|i| self.nodes[i.0].data.clone()).collect();

        let grads = input_grads(&op, &in_shapes, &in_data, &out_shape, &out_data, &gout);
        debug_assert_eq!(grads.len(), inputs.len());
        for (inp, g) in inputs.into_iter().zip(grads) {
            self.accum_grad(inp, g);
        }
    }
}

/// Gradient of each input given the output gradient. Dispatch table for the
/// reverse sweep; heavy kernels live beside their forward ops.
fn input_grads<T: Scalar>(
    op: &Op<T>,
    in_shapes: &[Vec<usize>],
    in_data: &[Vec<T>],
    out_shape: &[usize],
    out_data: &[T],
    gout: &[T],
) -> Vec<Vec<T>> {
    match op {
        Op::Leaf => vec![],
        Op::Add => vec![gout.to_vec(), gout.to_vec()],
        Op::Sub => vec![gout.to_vec(), gout.iter().map(|&g| -g).collect()],
        Op::Mul => vec![
            gout.iter().zip(&in_data[1]).map(|(&g, &y)| g * y).collect(),
            gout.iter().zip(&in_data[0]).map(|(&g, &x)| g * x).collect(),
        ],
        Op::Div => {
            let dx: Vec<T> = gout.iter().zip(&in_data[1]).map(|(&g, &y)| g / y).collect();
            let dy: Vec<T> = gout
                .iter()
                .zip(out_data.iter().zip(&in_data[1]))
                .map(|(&g, (&o, &y))| -g * o / y)
                .collect();
            vec![dx, dy]
        }
        Op::Affine { a } => {
            let a = crate::scalar::lit::<T>(*a);
            vec![gout.iter().map(|&g| g * a).collect()]
        }
        Op::Scale => pointwise::scale_backward(&in_data[0], &in_data[1], gout),
        Op::BMul | Op::BAdd | Op::BSub => {
            pointwise::broadcast_backward(op, &in_shapes[0], &in_data[0], &in_shapes[1], &in_data[1], gout)
        }
        Op::Sigmoid => vec![gout
            .iter()
            .zip(out_data)
            .map(|(&g, &s)| g * s * (T::one() - s))
            .collect()],
        Op::Tanh => vec![gout
            .iter()
            .zip(out_data)
            .map(|(&g, &t)| g * (T::one() - t * t))
            .collect()],
        Op::Relu => vec![gout
            .iter()
            .zip(&in_data[0])
            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
            .collect()],
        Op::Sqrt => {
            let two = crate::scalar::lit::<T>(2.0);
            vec![gout
                .iter()
                .zip(out_data)
                .map(|(&g, &s)| g / (two * s))
                .collect()]
        }
        Op::Ln => vec![gout
            .iter()
            .zip(&in_data[0])
            .map(|(&g, &x)| g / x)
            .collect()],
        Op::Clamp { lo, hi } => {
            let lo = crate::scalar::lit::<T>(*lo);
            let hi = crate::scalar::lit::<T>(*hi);
            vec![gout
                .iter()
                .zip(&in_data[0])
                .map(|(&g, &x)| if x > lo && x < hi { g } else { T::zero() })
                .collect()]
        }
        Op::Softmax { axis } => pointwise::softmax_backward(*axis, out_shape, out_data, gout),
        Op::SumAll => vec![vec![gout[0]; in_data[0].len()]],
        Op::Cosine { eps } => pointwise::cosine_backward(*eps, &in_data[0], &in_data[1], gout[0]),
        Op::MatMul => linalg::matmul_backward(&in_shapes[0], &in_data[0], &in_shapes[1], &in_data[1], gout),
        Op::Linear => linalg::linear_backward(&in_shapes[0], &in_data[0], &in_shapes[1], &in_data[1], gout),
        Op::Transpose2d => linalg::transpose2d_backward(out_shape, gout),
        Op::Reshape => vec![gout.to_vec()],
        Op::Concat { axis } => structure::concat_backward(*axis, in_shapes, gout),
        Op::Chunk { parts, index } => {
            structure::chunk_backward(*parts, *index, &in_shapes[0], gout)
        }
        Op::ChannelShuffle { groups } => {
            structure::shuffle_backward(*groups, &in_shapes[0], gout)
        }
        Op::Conv2d { stride, padding, groups } => conv::conv2d_backward(
            *stride,
            *padding,
            *groups,
            in_shapes,
            in_data,
            out_shape,
            gout,
        ),
        Op::MaxPool2d { argmax, .. } => {
            vec![pool::scatter_argmax(&in_shapes[0], argmax, gout)]
        }
        Op::AvgPool2d { window, stride, padding } => vec![pool::avg_pool_backward(
            *window,
            *stride,
            *padding,
            &in_shapes[0],
            out_shape,
            gout,
        )],
        Op::GlobalAvgPool => vec![pool::global_avg_backward(&in_shapes[0], gout)],
        Op::GlobalMaxPool { argmax } | Op::ChannelMax { argmax } => {
            vec![pool::scatter_argmax(&in_shapes[0], argmax, gout)]
        }
        Op::ChannelMean => vec![pool::channel_mean_backward(&in_shapes[0], gout)],
        Op::ChannelL2Norm => {
            vec![pool::channel_l2_backward(&in_shapes[0], &in_data[0], out_data, gout)]
        }
        Op::BilinearResize => {
            vec![resize::bilinear_backward(&in_shapes[0], out_shape, gout)]
        }
        Op::WeightedBce { target, weights } => {
            vec![pointwise::weighted_bce_backward(&in_data[0], target, weights, gout[0])]
        }
        Op::WeightedIou { target, weights } => {
            vec![pointwise::weighted_iou_backward(&in_data[0], target, weights, gout[0])]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn backward_of_linear_loss_gives_input() {
        // loss = sum(w * x)  =>  dw = x
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(&Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
        let x = tape.constant(&Tensor::from_f64(vec![3], &[4.0, 5.0, 6.0]).unwrap());
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn disconnected_leaf_has_no_grad() {
        let mut tape = Tape::<f64>::new();
        let w = tape.constant(&Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let x = tape.constant(&Tensor::from_f64(vec![2], &[3.0, 4.0]).unwrap());
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn strict_finite_flags_nan() {
        let mut tape = Tape::<f64>::with_strict_finite();
        let x = tape.constant(&Tensor::from_f64(vec![2], &[0.0, -1.0]).unwrap());
        // ln of a negative number is NaN
        assert!(tape.ln(x).is_err());
    }
}
