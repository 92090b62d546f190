//! Differentiable operations. Each submodule adds its forward methods to
//! [`Graph`](crate::Graph) and provides the matching vector-Jacobian product.

mod conv;
mod loss;
mod norm;
mod pointwise;
mod pool;
mod shape;

pub use norm::{BatchNormState, BnMode, BN_EPS, BN_MOMENTUM};
pub use loss::sigmoid;
pub use pointwise::Activation;
pub use pool::PoolKind;

use crate::float::Scalar;
use crate::graph::{Node, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool2d,
    AvgPool2d,
    Relu,
    Tanh,
    BatchNorm2d,
    GradReverse,
    MseMapLoss,
    L1Penalty,
    CrossEntropy,
    SmoothL1,
    BceWithLogits,
    Add,
    Affine,
    Gather,
    Concat,
    Narrow,
    Reshape,
    Sum,
    Mean,
    WeightedSum,
    LinComb,
}

impl OpKind {
    /// Every op that has a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 22] = [
        OpKind::Conv2d,
        OpKind::MaxPool2d,
        OpKind::AvgPool2d,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::BatchNorm2d,
        OpKind::GradReverse,
        OpKind::MseMapLoss,
        OpKind::L1Penalty,
        OpKind::CrossEntropy,
        OpKind::SmoothL1,
        OpKind::BceWithLogits,
        OpKind::Add,
        OpKind::Affine,
        OpKind::Gather,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::WeightedSum,
        OpKind::LinComb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::BatchNorm2d => "batchnorm2d",
            OpKind::GradReverse => "grad_reverse",
            OpKind::MseMapLoss => "mse_map_loss",
            OpKind::L1Penalty => "l1_penalty",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::SmoothL1 => "smooth_l1",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::Add => "add",
            OpKind::Affine => "affine",
            OpKind::Gather => "gather",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::LinComb => "lin_comb",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE
            .into_iter()
            .find(|k| k.name() == name)
    }
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Conv2d(conv::ConvSaved<T>),
    Pool(pool::PoolSaved),
    Relu { input: NodeId },
    Tanh { input: NodeId },
    BatchNorm(norm::BnSaved<T>),
    GradReverse { input: NodeId, coeff: T },
    Mse { pred: NodeId, target: NodeId },
    L1 { input: NodeId },
    CrossEntropy(loss::CeSaved<T>),
    SmoothL1 { pred: NodeId, target: NodeId, beta: T },
    Bce { logits: NodeId, targets: Vec<T> },
    Add { a: NodeId, b: NodeId },
    Affine { input: NodeId, scale: T },
    Gather { input: NodeId, indices: Vec<usize> },
    Concat { inputs: Vec<NodeId> },
    Narrow { input: NodeId, start: usize },
    Reshape { input: NodeId },
    Sum { input: NodeId },
    Mean { input: NodeId },
    WeightedSum { input: NodeId, weights: Vec<T> },
    LinComb { terms: Vec<(NodeId, T)> },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::Pool(p) => match p.kind {
                PoolKind::Max => OpKind::MaxPool2d,
                PoolKind::Avg => OpKind::AvgPool2d,
            },
            Op::Relu { .. } => OpKind::Relu,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::BatchNorm(_) => OpKind::BatchNorm2d,
            Op::GradReverse { .. } => OpKind::GradReverse,
            Op::Mse { .. } => OpKind::MseMapLoss,
            Op::L1 { .. } => OpKind::L1Penalty,
            Op::CrossEntropy(_) => OpKind::CrossEntropy,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
            Op::Bce { .. } => OpKind::BceWithLogits,
            Op::Add { .. } => OpKind::Add,
            Op::Affine { .. } => OpKind::Affine,
            Op::Gather { .. } => OpKind::Gather,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::LinComb { .. } => OpKind::LinComb,
        }
    }

    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d(s) => {
                let mut v = vec![s.input, s.weight];
                v.extend(s.bias);
                v
            }
            Op::Pool(p) => vec![p.input],
            Op::BatchNorm(b) => vec![b.input, b.gamma, b.beta],
            Op::CrossEntropy(c) => vec![c.logits],
            Op::Mse { pred, target } | Op::SmoothL1 { pred, target, .. } => vec![*pred, *target],
            Op::Add { a, b } => vec![*a, *b],
            Op::Concat { inputs } => inputs.clone(),
            Op::LinComb { terms } => terms.iter().map(|t| t.0).collect(),
            Op::Relu { input }
            | Op::Tanh { input }
            | Op::GradReverse { input, .. }
            | Op::L1 { input }
            | Op::Affine { input, .. }
            | Op::Gather { input, .. }
            | Op::Narrow { input, .. }
            | Op::Reshape { input }
            | Op::Sum { input }
            | Op::Mean { input }
            | Op::WeightedSum { input, .. } => vec![*input],
            Op::Bce { logits, .. } => vec![*logits],
        }
    }

    /// Vector-Jacobian product: gradient contributions for each input given
    /// the upstream gradient of node `idx`.
    pub(crate) fn backward(
        &self,
        nodes: &[Node<T>],
        idx: usize,
        upstream: &Tensor<T>,
    ) -> Vec<(NodeId, Tensor<T>)> {
        let val = |id: NodeId| &nodes[id.0].value;
        let rg = |id: NodeId| nodes[id.0].requires_grad;
        match self {
            Op::Leaf => vec![],
            Op::Conv2d(s) => conv::backward(s, val(s.input), val(s.weight), upstream, rg),
            Op::Pool(p) => pool::backward(p, val(p.input), upstream),
            Op::Relu { input } => pointwise::relu_backward(*input, val(*input), upstream),
            Op::Tanh { input } => pointwise::tanh_backward(*input, &nodes[idx].value, upstream),
            Op::BatchNorm(b) => norm::backward(b, val(b.gamma), upstream, rg),
            Op::GradReverse { input, coeff } => {
                vec![(*input, upstream.map(|g| -(*coeff) * g))]
            }
            Op::Mse { pred, target } => loss::mse_backward(*pred, *target, val(*pred), val(*target), upstream),
            Op::L1 { input } => loss::l1_backward(*input, val(*input), upstream),
            Op::CrossEntropy(c) => loss::ce_backward(c, val(c.logits), upstream),
            Op::SmoothL1 { pred, target, beta } => {
                loss::smooth_l1_backward(*pred, *target, val(*pred), val(*target), *beta, upstream)
            }
            Op::Bce { logits, targets } => loss::bce_backward(*logits, val(*logits), targets, upstream),
            Op::Add { a, b } => vec![(*a, upstream.clone()), (*b, upstream.clone())],
            Op::Affine { input, scale } => vec![(*input, upstream.map(|g| g * *scale))],
            Op::Gather { input, indices } => shape::gather_backward(*input, val(*input), indices, upstream),
            Op::Concat { inputs } => shape::concat_backward(inputs, nodes, upstream),
            Op::Narrow { input, start } => shape::narrow_backward(*input, val(*input), *start, upstream),
            Op::Reshape { input } => {
                let g = upstream
                    .clone()
                    .reshaped(val(*input).shape().to_vec())
                    .expect("reshape preserves numel");
                vec![(*input, g)]
            }
            Op::Sum { input } => {
                let x = val(*input);
                vec![(*input, Tensor::full(x.shape().to_vec(), upstream.item()))]
            }
            Op::Mean { input } => {
                let x = val(*input);
                let n = T::of(x.numel().max(1) as f64);
                vec![(*input, Tensor::full(x.shape().to_vec(), upstream.item() / n))]
            }
            Op::WeightedSum { input, weights } => {
                let x = val(*input);
                let g = upstream.item();
                let data = weights.iter().map(|&w| w * g).collect();
                vec![(*input, Tensor::new(x.shape().to_vec(), data).expect("same shape"))]
            }
            Op::LinComb { terms } => terms
                .iter()
                .map(|&(id, c)| {
                    let shape = val(id).shape().to_vec();
                    (id, Tensor::full(shape, upstream.item() * c))
                })
                .collect(),
        }
    }
}
