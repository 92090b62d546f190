use crate::error::{shape_err, Result};
use crate::float::Scalar;
use crate::graph::{Graph, Node, NodeId};
use crate::ops::Op;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// Picks flat elements of `input` into a 1-d tensor.
    pub fn gather(&mut self, input: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(shape_err(
                "gather",
                format!("index {bad} out of bounds for {} elements", x.len()),
            ));
        }
        let data = indices.iter().map(|&i| x[i]).collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        self.push(
            value,
            Op::Gather {
                input,
                indices: indices.to_vec(),
            },
        )
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs
            .first()
            .ok_or_else(|| shape_err("concat", "needs at least one input"))?;
        for &i in inputs {
            self.check(i)?;
        }
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &i in inputs {
            let s = self.shape(i);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat", format!("{s:?} incompatible with trailing {tail:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(i).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Slice `[start, start + len)` of the leading axis.
    pub fn narrow(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check(input)?;
        let s = self.shape(input).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(shape_err("narrow", format!("range {start}..{} outside {s:?}", start + len)));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(input).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::Narrow { input, start })
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(input)?;
        let value = self.value(input).clone().reshaped(shape.to_vec())?;
        self.push(value, Op::Reshape { input })
    }

    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let s: T = self.value(input).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    pub fn mean(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input);
        let s: T = x.data().iter().copied().sum();
        let value = Tensor::scalar(s / T::of(x.numel().max(1) as f64));
        self.push(value, Op::Mean { input })
    }

    /// `sum(x ⊙ w)` for a constant weight tensor `w` of the same shape.
    pub fn weighted_sum(&mut self, input: NodeId, weights: &Tensor<T>) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input);
        if x.shape() != weights.shape() {
            return Err(shape_err(
                "weighted_sum",
                format!("{:?} vs {:?}", x.shape(), weights.shape()),
            ));
        }
        let s: T = x.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                input,
                weights: weights.data().to_vec(),
            },
        )
    }

    /// `Σ cᵢ·xᵢ` over single-element tensors, accumulated left to right.
    pub fn lin_comb(&mut self, terms: &[(NodeId, T)]) -> Result<NodeId> {
        let mut total = T::zero();
        for &(id, c) in terms {
            self.check(id)?;
            let v = self.value(id);
            if v.numel() != 1 {
                return Err(shape_err("lin_comb", format!("term has shape {:?}", v.shape())));
            }
            total += c * v.item();
        }
        self.push(
            Tensor::scalar(total),
            Op::LinComb {
                terms: terms.to_vec(),
            },
        )
    }
}

pub(crate) fn gather_backward<T: Scalar>(
    input: NodeId,
    x: &Tensor<T>,
    indices: &[usize],
    upstream: &Tensor<T>,
) -> Vec<(NodeId, Tensor<T>)> {
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let d = dx.data_mut();
    for (&i, &g) in indices.iter().zip(upstream.data()) {
        d[i] += g;
    }
    vec![(input, dx)]
}

pub(crate) fn concat_backward<T: Scalar>(
    inputs: &[NodeId],
    nodes: &[Node<T>],
    upstream: &Tensor<T>,
) -> Vec<(NodeId, Tensor<T>)> {
    let mut offset = 0;
    inputs
        .iter()
        .map(|&id| {
            let shape = nodes[id.index()].value.shape().to_vec();
            let n: usize = shape.iter().product();
            let data = upstream.data()[offset..offset + n].to_vec();
            offset += n;
            (id, Tensor::new(shape, data).expect("slice matches shape"))
        })
        .collect()
}

pub(crate) fn narrow_backward<T: Scalar>(
    input: NodeId,
    x: &Tensor<T>,
    start: usize,
    upstream: &Tensor<T>,
) -> Vec<(NodeId, Tensor<T>)> {
    let inner: usize = x.shape()[1..].iter().product();
    let mut dx = Tensor::zeros(x.shape().to_vec());
    let off = start * inner;
    dx.data_mut()[off..off + upstream.numel()].copy_from_slice(upstream.data());
    vec![(input, dx)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_narrow_round_trips() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_fn(vec![2, 3], |i| i as f64));
        let b = g.param(Tensor::from_fn(vec![1, 3], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[3, 3]);
        let back = g.narrow(c, 2, 1).unwrap();
        assert_eq!(g.value(back), g.value(b));
        let s = g.sum(back).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gather_scatters_back_with_repeats() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(vec![4], |i| i as f64));
        let y = g.gather(x, &[3, 1, 3]).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 1.0, 3.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 2.0]);
        assert!(g.gather(x, &[4]).is_err());
    }

    #[test]
    fn lin_comb_weights_terms() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(5.0));
        let l = g.lin_comb(&[(a, 1.0), (b, 0.1)]).unwrap();
        assert!((g.value(l).item() - 2.5).abs() < 1e-15);
        g.backward(l).unwrap();
        assert_eq!(g.grad(b).unwrap().item(), 0.1);
    }
}
