use crate::error::{shape_err, AutogradError, Result};
use crate::float::Scalar;
use crate::graph::{Graph, NodeId};
use crate::ops::Op;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

pub(crate) struct PoolSaved {
    pub(crate) input: NodeId,
    pub(crate) kind: PoolKind,
    window: usize,
    stride: usize,
    out_hw: (usize, usize),
    /// Flat input index chosen by each max-pool output.
    argmax: Vec<usize>,
}

impl<T: Scalar> Graph<T> {
    pub fn max_pool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        self.pool2d(input, PoolKind::Max, window, stride)
    }

    pub fn avg_pool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        self.pool2d(input, PoolKind::Avg, window, stride)
    }

    /// Ties in max-pooling go to the first element in row-major window order.
    pub fn pool2d(
        &mut self,
        input: NodeId,
        kind: PoolKind,
        window: usize,
        stride: usize,
    ) -> Result<NodeId> {
        self.check(input)?;
        let op = match kind {
            PoolKind::Max => "max_pool2d",
            PoolKind::Avg => "avg_pool2d",
        };
        let (n, c, h, w) = self.value(input).dims4()?;
        if window == 0 || stride == 0 {
            return Err(shape_err(op, "window and stride must be positive"));
        }
        if window == stride {
            if h % stride != 0 {
                return Err(AutogradError::NotDivisible { op, axis: "height", size: h, stride });
            }
            if w % stride != 0 {
                return Err(AutogradError::NotDivisible { op, axis: "width", size: w, stride });
            }
        }
        if h < window || w < window {
            return Err(shape_err(op, format!("input {h}x{w} smaller than window {window}")));
        }
        let (ho, wo) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::new();
        let inv = T::one() / T::of((window * window) as f64);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y0, x0) = (oy * stride, ox * stride);
                    match kind {
                        PoolKind::Max => {
                            let mut best = base + y0 * w + x0;
                            for dy in 0..window {
                                for dx in 0..window {
                                    let i = base + (y0 + dy) * w + x0 + dx;
                                    if x[i] > x[best] {
                                        best = i;
                                    }
                                }
                            }
                            argmax.push(best);
                            out.push(x[best]);
                        }
                        PoolKind::Avg => {
                            let mut acc = T::zero();
                            for dy in 0..window {
                                let row = base + (y0 + dy) * w + x0;
                                for &v in &x[row..row + window] {
                                    acc += v;
                                }
                            }
                            out.push(acc * inv);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(
            value,
            Op::Pool(PoolSaved {
                input,
                kind,
                window,
                stride,
                out_hw: (ho, wo),
                argmax,
            }),
        )
    }
}

pub(crate) fn backward<T: Scalar>(
    p: &PoolSaved,
    input: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Vec<(NodeId, Tensor<T>)> {
    let mut dx = Tensor::zeros(input.shape().to_vec());
    let dy = upstream.data();
    match p.kind {
        PoolKind::Max => {
            let d = dx.data_mut();
            for (&i, &g) in p.argmax.iter().zip(dy) {
                d[i] += g;
            }
        }
        PoolKind::Avg => {
            let (_, _, h, w) = input.dims4().expect("4-d input");
            let (ho, wo) = p.out_hw;
            let inv = T::one() / T::of((p.window * p.window) as f64);
            let d = dx.data_mut();
            for (o, &g) in dy.iter().enumerate() {
                let plane = o / (ho * wo);
                let (oy, ox) = ((o / wo) % ho, o % wo);
                let base = plane * h * w;
                for dyy in 0..p.window {
                    for dxx in 0..p.window {
                        d[base + (oy * p.stride + dyy) * w + ox * p.stride + dxx] += g * inv;
                    }
                }
            }
        }
    }
    vec![(p.input, dx)]
}
