use crate::error::{shape_err, AutogradError, Result};
use crate::float::Scalar;
use crate::graph::{Graph, NodeId};
use crate::ops::Op;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl<T: Scalar> Graph<T> {
    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { input })
    }

    pub fn tanh(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).map(|v| v.tanh());
        self.push(value, Op::Tanh { input })
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> Result<NodeId> {
        match kind {
            Activation::Relu => self.relu(input),
            Activation::Tanh => self.tanh(input),
        }
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-coeff` on the way back.
    pub fn grad_reverse(&mut self, input: NodeId, coeff: T) -> Result<NodeId> {
        self.check(input)?;
        if !(coeff >= T::zero()) || !coeff.is_finite() {
            return Err(AutogradError::InvalidArgument {
                op: "grad_reverse",
                detail: format!("coefficient must be finite and non-negative, got {coeff}"),
            });
        }
        let value = self.value(input).clone();
        self.push(value, Op::GradReverse { input, coeff })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Add { a, b })
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, input: NodeId, scale: T, shift: T) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).map(|v| scale * v + shift);
        self.push(value, Op::Affine { input, scale })
    }
}

pub(crate) fn relu_backward<T: Scalar>(
    input: NodeId,
    x: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Vec<(NodeId, Tensor<T>)> {
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    vec![(input, Tensor::new(x.shape().to_vec(), data).expect("same shape"))]
}

pub(crate) fn tanh_backward<T: Scalar>(
    input: NodeId,
    y: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Vec<(NodeId, Tensor<T>)> {
    let data = y
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&t, &g)| g * (T::one() - t * t))
        .collect();
    vec![(input, Tensor::new(y.shape().to_vec(), data).expect("same shape"))]
}
