use crate::error::{shape_err, AutogradError, Result};
use crate::float::Scalar;
use crate::graph::{Graph, NodeId};
use crate::ops::Op;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

pub(crate) struct BnSaved<T> {
    pub(crate) input: NodeId,
    pub(crate) gamma: NodeId,
    pub(crate) beta: NodeId,
    train: bool,
    dims: (usize, usize, usize, usize),
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> Graph<T> {
    pub fn batchnorm2d(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BnMode,
        state: &mut BatchNormState<T>,
    ) -> Result<NodeId> {
        self.check(input)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (n, c, h, w) = self.value(input).dims4()?;
        for (id, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(id).shape() != [c] {
                return Err(shape_err(
                    "batchnorm2d",
                    format!("{name} shape {:?} does not match {c} channels", self.value(id).shape()),
                ));
            }
        }
        if state.running_mean.len() != c || state.running_var.len() != c {
            return Err(shape_err("batchnorm2d", "running statistics have the wrong channel count"));
        }
        let m = n * h * w;
        if mode == BnMode::Train && m < 2 {
            return Err(AutogradError::BatchTooSmall(m));
        }
        let eps = T::of(BN_EPS);
        let momentum = T::of(BN_MOMENTUM);
        let x = self.value(input).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let hw = h * w;
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ch in 0..c {
            let plane = |s: usize| (s * c + ch) * hw;
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mf = T::of(m as f64);
                    let mut sum = T::zero();
                    for s in 0..n {
                        sum += x[plane(s)..plane(s) + hw].iter().copied().sum::<T>();
                    }
                    let mean = sum / mf;
                    let mut sq = T::zero();
                    for s in 0..n {
                        for &v in &x[plane(s)..plane(s) + hw] {
                            sq += (v - mean) * (v - mean);
                        }
                    }
                    let var = sq / mf;
                    let unbiased = sq / T::of((m - 1) as f64);
                    state.running_mean[ch] =
                        (T::one() - momentum) * state.running_mean[ch] + momentum * mean;
                    state.running_var[ch] =
                        (T::one() - momentum) * state.running_var[ch] + momentum * unbiased;
                    (mean, var)
                }
                BnMode::Eval => (state.running_mean[ch], state.running_var[ch]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for s in 0..n {
                for i in plane(s)..plane(s) + hw {
                    let xh = (x[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(
            value,
            Op::BatchNorm(BnSaved {
                input,
                gamma,
                beta,
                train: mode == BnMode::Train,
                dims: (n, c, h, w),
                xhat,
                inv_std,
            }),
        )
    }
}

pub(crate) fn backward<T: Scalar>(
    b: &BnSaved<T>,
    gamma: &Tensor<T>,
    upstream: &Tensor<T>,
    rg: impl Fn(NodeId) -> bool,
) -> Vec<(NodeId, Tensor<T>)> {
    let (n, c, h, w) = b.dims;
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let dy = upstream.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                dgamma[ch] += dy[i] * b.xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut out = Vec::new();
    if rg(b.input) {
        let mut dx = vec![T::zero(); dy.len()];
        for ch in 0..c {
            let g = gamma.data()[ch];
            let is = b.inv_std[ch];
            for s in 0..n {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    dx[i] = if b.train {
                        // d xhat = dy * gamma; sums over the channel reduce to dbeta / dgamma.
                        g * is / m * (m * dy[i] - dbeta[ch] - b.xhat[i] * dgamma[ch])
                    } else {
                        g * is * dy[i]
                    };
                }
            }
        }
        out.push((b.input, Tensor::new(vec![n, c, h, w], dx).expect("input shape")));
    }
    if rg(b.gamma) {
        out.push((b.gamma, Tensor::new(vec![c], dgamma).expect("gamma shape")));
    }
    if rg(b.beta) {
        out.push((b.beta, Tensor::new(vec![c], dbeta).expect("beta shape")));
    }
    out
}
