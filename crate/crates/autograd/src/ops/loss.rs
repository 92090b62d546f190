//! Scalar-valued losses. Empty inputs reduce to exactly zero so callers can
//! feed "no positives" without special cases.

use crate::error::{shape_err, AutogradError, Result};
use crate::float::Scalar;
use crate::graph::{Graph, NodeId};
use crate::ops::Op;
use crate::tensor::Tensor;

pub(crate) struct CeSaved<T> {
    pub(crate) logits: NodeId,
    probs: Vec<T>,
    labels: Vec<usize>,
}

fn mean_divisor<T: Scalar>(n: usize) -> T {
    T::of(n.max(1) as f64)
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Mean squared difference over every element (batch, channels, rows, columns).
    pub fn mse_map_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape("mse_map_loss", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let sum: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(sum / mean_divisor(p.len()));
        self.push(value, Op::Mse { pred, target })
    }

    /// Per-sample L1 norm averaged over the leading (batch) axis.
    pub fn l1_penalty(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let x = self.value(input);
        let batch = x.shape().first().copied().unwrap_or(1);
        let sum: T = x.data().iter().map(|v| v.abs()).sum();
        let value = Tensor::scalar(sum / mean_divisor(batch));
        self.push(value, Op::L1 { input })
    }

    /// Softmax cross-entropy of `N×C` logits, averaged over rows.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let x = self.value(logits);
        let (n, c) = match x.shape() {
            [n, c] => (*n, *c),
            s => return Err(shape_err("cross_entropy", format!("expected N×C logits, got {s:?}"))),
        };
        if labels.len() != n {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(AutogradError::LabelOutOfRange {
                op: "cross_entropy",
                label: bad,
                classes: c,
            });
        }
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &x.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - row[label];
            for k in 0..c {
                probs[r * c + k] = (row[k] - log_z).exp();
            }
        }
        let value = Tensor::scalar(total / mean_divisor(n));
        self.push(
            value,
            Op::CrossEntropy(CeSaved {
                logits,
                probs,
                labels: labels.to_vec(),
            }),
        )
    }

    /// Huber-style loss with quadratic zone `|d| < beta`, averaged over elements.
    pub fn smooth_l1(&mut self, pred: NodeId, target: NodeId, beta: T) -> Result<NodeId> {
        self.same_shape("smooth_l1", pred, target)?;
        if !(beta > T::zero()) {
            return Err(AutogradError::InvalidArgument {
                op: "smooth_l1",
                detail: format!("beta must be positive, got {beta}"),
            });
        }
        let half = T::of(0.5);
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let sum: T = p
            .iter()
            .zip(t)
            .map(|(&a, &b)| {
                let d = (a - b).abs();
                if d < beta {
                    half * d * d / beta
                } else {
                    d - half * beta
                }
            })
            .sum();
        let value = Tensor::scalar(sum / mean_divisor(p.len()));
        self.push(value, Op::SmoothL1 { pred, target, beta })
    }

    /// Numerically stable binary cross-entropy on logits, averaged over elements.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[T]) -> Result<NodeId> {
        self.check(logits)?;
        let x = self.value(logits).data();
        if x.len() != targets.len() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} targets for {} logits", targets.len(), x.len()),
            ));
        }
        let sum: T = x
            .iter()
            .zip(targets)
            .map(|(&v, &y)| v.max(T::zero()) - v * y + (-v.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(sum / mean_divisor(x.len()));
        self.push(
            value,
            Op::Bce {
                logits,
                targets: targets.to_vec(),
            },
        )
    }
}

pub(crate) fn mse_backward<T: Scalar>(
    pred: NodeId,
    target: NodeId,
    p: &Tensor<T>,
    t: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Vec<(NodeId, Tensor<T>)> {
    let scale = T::of(2.0) * upstream.item() / mean_divisor(p.numel());
    let dp: Vec<T> = p.data().iter().zip(t.data()).map(|(&a, &b)| scale * (a - b)).collect();
    let dt: Vec<T> = dp.iter().map(|&v| -v).collect();
    vec![
        (pred, Tensor::new(p.shape().to_vec(), dp).expect("same shape")),
        (target, Tensor::new(t.shape().to_vec(), dt).expect("same shape")),
    ]
}

pub(crate) fn l1_backward<T: Scalar>(
    input: NodeId,
    x: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Vec<(NodeId, Tensor<T>)> {
    let batch = x.shape().first().copied().unwrap_or(1);
    let scale = upstream.item() / mean_divisor(batch);
    let g = x.map(|v| {
        if v > T::zero() {
            scale
        } else if v < T::zero() {
            -scale
        } else {
            T::zero()
        }
    });
    vec![(input, g)]
}

pub(crate) fn ce_backward<T: Scalar>(
    c: &CeSaved<T>,
    x: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Vec<(NodeId, Tensor<T>)> {
    let classes = x.shape()[1];
    let scale = upstream.item() / mean_divisor(c.labels.len());
    let mut d: Vec<T> = c.probs.iter().map(|&p| p * scale).collect();
    for (r, &label) in c.labels.iter().enumerate() {
        d[r * classes + label] -= scale;
    }
    vec![(c.logits, Tensor::new(x.shape().to_vec(), d).expect("same shape"))]
}

pub(crate) fn smooth_l1_backward<T: Scalar>(
    pred: NodeId,
    target: NodeId,
    p: &Tensor<T>,
    t: &Tensor<T>,
    beta: T,
    upstream: &Tensor<T>,
) -> Vec<(NodeId, Tensor<T>)> {
    let scale = upstream.item() / mean_divisor(p.numel());
    let dp: Vec<T> = p
        .data()
        .iter()
        .zip(t.data())
        .map(|(&a, &b)| {
            let d = a - b;
            let g = if d.abs() < beta { d / beta } else { d.signum() };
            g * scale
        })
        .collect();
    let dt: Vec<T> = dp.iter().map(|&v| -v).collect();
    vec![
        (pred, Tensor::new(p.shape().to_vec(), dp).expect("same shape")),
        (target, Tensor::new(t.shape().to_vec(), dt).expect("same shape")),
    ]
}

pub(crate) fn bce_backward<T: Scalar>(
    logits: NodeId,
    x: &Tensor<T>,
    targets: &[T],
    upstream: &Tensor<T>,
) -> Vec<(NodeId, Tensor<T>)> {
    let scale = upstream.item() / mean_divisor(x.numel());
    let d = x
        .data()
        .iter()
        .zip(targets)
        .map(|(&v, &y)| (sigmoid(v) - y) * scale)
        .collect();
    vec![(logits, Tensor::new(x.shape().to_vec(), d).expect("same shape"))]
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
