use crate::error::{AutogradError, Result};
use crate::float::Scalar;
use crate::ops::{Op, OpKind};
use crate::tensor::Tensor;

/// Environment variable that turns on finite-value checks at op boundaries.
pub const NAN_CHECK_ENV: &str = "WXADAPT_CHECK_NAN";

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// A single-use reverse-mode tape.
///
/// Nodes are appended in execution order, so the record order is already a
/// topological order; `backward` walks it in reverse.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    check_finite: bool,
    fault: Option<(OpKind, T)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        let check_finite = std::env::var(NAN_CHECK_ENV)
            .map(|v| !v.is_empty() && v != "0")
            .unwrap_or(false);
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            check_finite,
            fault: None,
        }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Scales every gradient emitted by ops of `kind` by `factor`.
    /// Only meant for mutation-testing the gradient checker.
    pub fn inject_fault(&mut self, kind: OpKind, factor: T) {
        self.fault = Some((kind, factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Gradient of the last backward pass. Every `requires_grad` node has
    /// one after backward, zero-filled when it did not influence the loss.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    pub(crate) fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(AutogradError::UnknownNode(id.0));
        }
        Ok(())
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<NodeId> {
        if self.check_finite && !value.all_finite() {
            return Err(AutogradError::NonFinite(op.kind().name()));
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        if self.backward_done {
            return Err(AutogradError::BackwardTwice);
        }
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(AutogradError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            let mut contributions = node.op.backward(&self.nodes, idx, &upstream);
            if let Some((kind, factor)) = self.fault {
                if kind == node.op.kind() {
                    for (_, g) in contributions.iter_mut() {
                        for v in g.data_mut() {
                            *v *= factor;
                        }
                    }
                }
            }
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut self.grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            self.grads[idx] = Some(upstream);
        }

        for (node, slot) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && slot.is_none() {
                *slot = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(vec![3], 2.0));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(AutogradError::BackwardTwice));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(vec![3], 2.0));
        assert!(matches!(g.backward(x), Err(AutogradError::NonScalarLoss(_))));
    }

    #[test]
    fn unreached_params_get_zero_grads() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(vec![2, 2], 1.0));
        let unused = g.param(Tensor::full(vec![5], 1.0));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &Tensor::zeros(vec![5]));
        assert_eq!(g.grad(x).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn nan_check_names_the_op() {
        let mut g = Graph::<f64>::new();
        g.set_check_finite(true);
        let x = g.param(Tensor::full(vec![2], f64::MAX));
        let err = g.affine(x, 10.0, 0.0).unwrap_err();
        assert_eq!(err, AutogradError::NonFinite("affine"));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(vec![3], 1.5));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
    }
}
