use crate::error::{shape_err, Result};
use crate::float::{gemm, Scalar};
use crate::graph::{Graph, NodeId};
use crate::ops::Op;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1, stride 1, no padding: the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) struct ConvSaved<T> {
    pub(crate) input: NodeId,
    pub(crate) weight: NodeId,
    pub(crate) bias: Option<NodeId>,
    geom: ConvGeom,
    /// Per-sample column matrices, kept only when the weight needs a gradient.
    cols: Vec<T>,
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw = g.hw_out();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.hw_out();
    for ci in 0..g.c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// 2-d cross-correlation over NCHW input with OIKK weights.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.check(input)?;
        self.check(weight)?;
        let (n, c, h, w) = self.value(input).dims4()?;
        let (o, ci, kh, kw) = self.value(weight).dims4()?;
        if kh != kw {
            return Err(shape_err("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        if ci != c {
            return Err(shape_err(
                "conv2d",
                format!("input has {c} channels but weight expects {ci}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err(
                "conv2d",
                format!("padded input {}x{} smaller than kernel {kh}", h + 2 * padding, w + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            self.check(b)?;
            if self.value(b).shape() != [o] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias shape {:?} does not match {o} output channels", self.value(b).shape()),
                ));
            }
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            k: kh,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let keep_cols = self.requires_grad(weight) && !geom.is_pointwise();
        let (ckk, hw) = (geom.ckk(), geom.hw_out());
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let mut out = vec![T::zero(); n * o * hw];
        let mut cols_all = if keep_cols { vec![T::zero(); n * ckk * hw] } else { Vec::new() };
        let mut scratch = if keep_cols || geom.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * hw] };
        for s in 0..n {
            let xs = &x[s * c * h * w..(s + 1) * c * h * w];
            let cols: &[T] = if geom.is_pointwise() {
                xs
            } else if keep_cols {
                let dst = &mut cols_all[s * ckk * hw..(s + 1) * ckk * hw];
                im2col(xs, &geom, dst);
                dst
            } else {
                im2col(xs, &geom, &mut scratch);
                &scratch
            };
            let os = &mut out[s * o * hw..(s + 1) * o * hw];
            gemm(o, ckk, hw, wt, false, cols, false, os, false);
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for s in 0..n {
                for oc in 0..o {
                    let base = (s * o + oc) * hw;
                    for v in &mut out[base..base + hw] {
                        *v += bv[oc];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, o, geom.ho, geom.wo], out)?;
        self.push(
            value,
            Op::Conv2d(ConvSaved {
                input,
                weight,
                bias,
                geom,
                cols: cols_all,
            }),
        )
    }
}

pub(crate) fn backward<T: Scalar>(
    s: &ConvSaved<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    upstream: &Tensor<T>,
    rg: impl Fn(NodeId) -> bool,
) -> Vec<(NodeId, Tensor<T>)> {
    let g = s.geom;
    let (ckk, hw) = (g.ckk(), g.hw_out());
    let in_sz = g.c * g.h * g.w;
    let dy = upstream.data();
    let mut out = Vec::new();

    if rg(s.weight) {
        let mut dw = vec![T::zero(); g.o * ckk];
        for n in 0..g.n {
            let cols = if g.is_pointwise() {
                &input.data()[n * in_sz..(n + 1) * in_sz]
            } else {
                &s.cols[n * ckk * hw..(n + 1) * ckk * hw]
            };
            let dys = &dy[n * g.o * hw..(n + 1) * g.o * hw];
            gemm(g.o, hw, ckk, dys, false, cols, true, &mut dw, true);
        }
        out.push((s.weight, Tensor::new(weight.shape().to_vec(), dw).expect("weight shape")));
    }
    if let Some(b) = s.bias {
        if rg(b) {
            let mut db = vec![T::zero(); g.o];
            for n in 0..g.n {
                for (oc, acc) in db.iter_mut().enumerate() {
                    let base = (n * g.o + oc) * hw;
                    *acc += dy[base..base + hw].iter().copied().sum::<T>();
                }
            }
            out.push((b, Tensor::new(vec![g.o], db).expect("bias shape")));
        }
    }
    if rg(s.input) {
        let mut dx = vec![T::zero(); g.n * in_sz];
        let mut dcols = vec![T::zero(); ckk * hw];
        for n in 0..g.n {
            let dys = &dy[n * g.o * hw..(n + 1) * g.o * hw];
            let dxs = &mut dx[n * in_sz..(n + 1) * in_sz];
            if g.is_pointwise() {
                gemm(ckk, g.o, hw, weight.data(), true, dys, false, dxs, false);
            } else {
                gemm(ckk, g.o, hw, weight.data(), true, dys, false, &mut dcols, false);
                col2im(&dcols, &g, dxs);
            }
        }
        out.push((s.input, Tensor::new(input.shape().to_vec(), dx).expect("input shape")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_sums_window() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut g = Graph::<f64>::new();
        let data = Tensor::from_fn(vec![2, 1, 4, 5], |i| i as f64 * 0.37 - 3.0);
        let x = g.constant(data.clone());
        let w = g.constant(Tensor::full(vec![1, 1, 1, 1], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), &data);
    }

    #[test]
    fn output_size_law() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 9, 7]));
        let w = g.constant(Tensor::zeros(vec![4, 2, 3, 3]));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 4, 5, 4]);
    }

    #[test]
    fn channel_mismatch_is_descriptive() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 5, 5]));
        let w = g.constant(Tensor::zeros(vec![4, 3, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("2 channels") && err.contains("expects 3"), "{err}");
        let w = g.constant(Tensor::zeros(vec![4, 2, 7, 7]));
        assert!(g.conv2d(x, w, None, 1, 0).is_err());
    }

    #[test]
    fn padded_conv_matches_direct_loop() {
        let (n, c, h, w, o, k, p) = (2, 3, 5, 4, 2, 3, 1);
        let xt = Tensor::from_fn(vec![n, c, h, w], |i| ((i * 7919) % 13) as f64 - 6.0);
        let wt = Tensor::from_fn(vec![o, c, k, k], |i| ((i * 31) % 7) as f64 * 0.25 - 0.75);
        let bt = Tensor::new(vec![o], vec![0.5, -1.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let (x, wn, b) = (g.constant(xt.clone()), g.constant(wt.clone()), g.constant(bt.clone()));
        let y = g.conv2d(x, wn, Some(b), 1, p).unwrap();
        let yv = g.value(y);
        for s in 0..n {
            for oc in 0..o {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = bt.data()[oc];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - p as isize;
                                    let ix = ox as isize + kx as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += xt.data()[((s * c + ci) * h + iy as usize) * w + ix as usize]
                                            * wt.data()[((oc * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        let got = yv.data()[((s * o + oc) * h + oy) * w + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
