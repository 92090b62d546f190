//! Central-difference gradient checker and the registry of per-op checks
//! behind the `gradcheck` command.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AutogradError, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::{BatchNormState, BnMode, OpKind};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const BATCHNORM_TOL: f64 = 1e-3;

/// Gradients smaller than this are compared in absolute terms against it.
pub const REL_FLOOR: f64 = 1e-3;

/// Worst coordinate found by [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub max_rel_error: f64,
    /// Which input tensor and which flat coordinate produced the maximum.
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of a scalar-valued `build` against central
/// differences `(f(x+eps) - f(x-eps)) / 2eps` on every input coordinate.
pub fn finite_diff_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckResult>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    finite_diff_check_with_fault(build, inputs, eps, None)
}

/// Same as [`finite_diff_check`] with a gradient fault injected into every
/// op of the given kind (scaled by 1.01).
pub fn finite_diff_check_with_fault<F>(
    build: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    fault: Option<OpKind>,
) -> Result<GradCheckResult>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-7..=1e-2).contains(&eps) {
        return Err(AutogradError::InvalidArgument {
            op: "finite_diff_check",
            detail: format!("eps {eps} outside [1e-7, 1e-2]"),
        });
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(&mut g, &ids)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(AutogradError::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut g = Graph::new();
    if let Some(kind) = fault {
        g.inject_fault(kind, 1.01);
    }
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).cloned().expect("param grads exist after backward"))
        .collect();

    let mut worst = GradCheckResult {
        max_rel_error: 0.0,
        input: 0,
        coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for coord in 0..probe[k].numel() {
            let orig = probe[k].data()[coord];
            probe[k].data_mut()[coord] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[coord] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[coord];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error || !err.is_finite() {
                worst = GradCheckResult {
                    max_rel_error: err,
                    input: k,
                    coord,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}

/// One registered op check.
pub struct GradCase {
    pub kind: OpKind,
    pub tol: f64,
    run: fn(&mut ChaCha8Rng, Option<OpKind>) -> Result<GradCheckResult>,
}

impl GradCase {
    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn run(&self, seed: u64, fault: Option<OpKind>) -> Result<GradCheckResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (self.run)(&mut rng, fault)
    }
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub tol: f64,
    pub seeds: usize,
    pub worst: GradCheckResult,
    pub error: Option<String>,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.worst.max_rel_error <= self.tol
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub ops: Vec<OpReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &OpReport> {
        self.ops.iter().filter(|r| !r.passed())
    }
}

/// Runs every registered case over seeds `0..seeds`.
pub fn run_suite(seeds: u64, fault: Option<OpKind>) -> SuiteReport {
    let ops = registry()
        .iter()
        .map(|case| {
            let mut report = OpReport {
                name: case.name(),
                tol: case.tol,
                seeds: seeds as usize,
                worst: GradCheckResult {
                    max_rel_error: 0.0,
                    input: 0,
                    coord: 0,
                    analytic: 0.0,
                    numeric: 0.0,
                },
                error: None,
            };
            for seed in 0..seeds {
                match case.run(seed, fault) {
                    Ok(r) if r.max_rel_error > report.worst.max_rel_error || !r.max_rel_error.is_finite() => {
                        report.worst = r
                    }
                    Ok(_) => {}
                    Err(e) => {
                        report.error = Some(format!("seed {seed}: {e}"));
                        break;
                    }
                }
            }
            report
        })
        .collect();
    SuiteReport { ops }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values bounded away from zero (for relu, l1 and other kinked ops).
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let mag = rng.random_range(margin..1.5);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Distinct values with gaps far larger than the difference step.
fn spaced(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Tensor::from_fn(shape.to_vec(), |i| order[i] as f64 * 0.1 + rng.random_range(0.0..0.01) - 1.0)
}

fn probe_loss(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    g.weighted_sum(y, &w)
}

fn check(
    fault: Option<OpKind>,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
) -> Result<GradCheckResult> {
    finite_diff_check_with_fault(build, &inputs, DEFAULT_EPS, fault)
}

pub fn registry() -> Vec<GradCase> {
    fn case(kind: OpKind, run: fn(&mut ChaCha8Rng, Option<OpKind>) -> Result<GradCheckResult>) -> GradCase {
        let tol = if kind == OpKind::BatchNorm2d { BATCHNORM_TOL } else { DEFAULT_TOL };
        GradCase { kind, tol, run }
    }
    vec![
        case(OpKind::Conv2d, |rng, fault| {
            let (stride, pad) = if rng.random_bool(0.5) { (1, 1) } else { (2, 0) };
            let inputs = vec![randn(&[2, 4, 8, 8], rng), randn(&[8, 4, 3, 3], rng), randn(&[8], rng)];
            let ps = rng.random();
            check(fault, inputs, move |g, x| {
                let y = g.conv2d(x[0], x[1], Some(x[2]), stride, pad)?;
                probe_loss(g, y, ps)
            })
        }),
        case(OpKind::MaxPool2d, |rng, fault| {
            let inputs = vec![spaced(&[1, 2, 6, 6], rng)];
            let ps = rng.random();
            check(fault, inputs, move |g, x| {
                let y = g.max_pool2d(x[0], 2, 2)?;
                probe_loss(g, y, ps)
            })
        }),
        case(OpKind::AvgPool2d, |rng, fault| {
            let inputs = vec![randn(&[1, 2, 6, 6], rng)];
            let ps = rng.random();
            check(fault, inputs, move |g, x| {
                let y = g.avg_pool2d(x[0], 2, 2)?;
                probe_loss(g, y, ps)
            })
        }),
        case(OpKind::Relu, |rng, fault| {
            let inputs = vec![away_from_zero(&[3, 7], 0.01, rng)];
            let ps = rng.random();
            check(fault, inputs, move |g, x| {
                let y = g.relu(x[0])?;
                probe_loss(g, y, ps)
            })
        }),
        case(OpKind::Tanh, |rng, fault| {
            let inputs = vec![randn(&[3, 7], rng)];
            let ps = rng.random();
            check(fault, inputs, move |g, x| {
                let y = g.tanh(x[0])?;
                probe_loss(g, y, ps)
            })
        }),
        case(OpKind::BatchNorm2d, |rng, fault| {
            let mode = if rng.random_bool(0.75) { BnMode::Train } else { BnMode::Eval };
            let inputs = vec![randn(&[4, 3, 5, 5], rng), randn(&[3], rng), randn(&[3], rng)];
            let ps = rng.random();
            check(fault, inputs, move |g, x| {
                let mut state = BatchNormState::new(3);
                state.running_var = vec![0.5, 1.5, 2.0];
                state.running_mean = vec![0.1, -0.2, 0.3];
                let y = g.batchnorm2d(x[0], x[1], x[2], mode, &mut state)?;
                probe_loss(g, y, ps)
            })
        }),
        case(OpKind::GradReverse, |rng, fault| {
            let coeff = rng.random_range(0.1..2.0);
            let inputs = vec![randn(&[2, 5], rng)];
            let ps = rng.random();
            check(fault, inputs, move |g, x| {
                // Reversal with c then 1/c: forward identity, backward (-c)(-1/c) = 1.
                let r = g.grad_reverse(x[0], coeff)?;
                let r = g.grad_reverse(r, 1.0 / coeff)?;
                probe_loss(g, r, ps)
            })
        }),
        case(OpKind::MseMapLoss, |rng, fault| {
            let inputs = vec![randn(&[2, 1, 4, 4], rng), randn(&[2, 1, 4, 4], rng)];
            check(fault, inputs, |g, x| g.mse_map_loss(x[0], x[1]))
        }),
        case(OpKind::L1Penalty, |rng, fault| {
            let inputs = vec![away_from_zero(&[3, 2, 2, 2], 0.01, rng)];
            check(fault, inputs, |g, x| g.l1_penalty(x[0]))
        }),
        case(OpKind::CrossEntropy, |rng, fault| {
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
            let inputs = vec![randn(&[5, 4], rng)];
            check(fault, inputs, move |g, x| g.cross_entropy(x[0], &labels))
        }),
        case(OpKind::SmoothL1, |rng, fault| {
            // Differences kept away from the |d| = beta seam.
            let target = randn(&[12], rng);
            let diff = Tensor::from_fn(vec![12], |i| {
                let m = if i % 2 == 0 { rng.random_range(0.05..0.9) } else { rng.random_range(1.1..2.5) };
                if rng.random_bool(0.5) { m } else { -m }
            });
            let pred = Tensor::from_fn(vec![12], |i| target.data()[i] + diff.data()[i]);
            check(fault, vec![pred, target], |g, x| g.smooth_l1(x[0], x[1], 1.0))
        }),
        case(OpKind::BceWithLogits, |rng, fault| {
            let targets: Vec<f64> = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
            let inputs = vec![Tensor::randn(vec![9], 2.0, rng)];
            check(fault, inputs, move |g, x| g.bce_with_logits(x[0], &targets))
        }),
        case(OpKind::Add, |rng, fault| {
            let inputs = vec![randn(&[2, 3], rng), randn(&[2, 3], rng)];
            let ps = rng.random();
            check(fault, inputs, move |g, x| {
                let y = g.add(x[0], x[1])?;
                probe_loss(g, y, ps)
            })
        }),
        case(OpKind::Affine, |rng, fault| {
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            let inputs = vec![randn(&[4, 2], rng)];
            let ps = rng.random();
            check(fault, inputs, move |g, x| {
                let y = g.affine(x[0], a, b)?;
                probe_loss(g, y, ps)
            })
        }),
        case(OpKind::Gather, |rng, fault| {
            let idx: Vec<usize> = (0..10).map(|_| rng.random_range(0..12)).collect();
            let inputs = vec![randn(&[3, 4], rng)];
            let ps = rng.random();
            check(fault, inputs, move |g, x| {
                let y = g.gather(x[0], &idx)?;
                probe_loss(g, y, ps)
            })
        }),
        case(OpKind::Concat, |rng, fault| {
            let inputs = vec![randn(&[2, 3, 2], rng), randn(&[1, 3, 2], rng)];
            let ps = rng.random();
            check(fault, inputs, move |g, x| {
                let y = g.concat(&[x[0], x[1]])?;
                probe_loss(g, y, ps)
            })
        }),
        case(OpKind::Narrow, |rng, fault| {
            let inputs = vec![randn(&[4, 3], rng)];
            let ps = rng.random();
            check(fault, inputs, move |g, x| {
                let y = g.narrow(x[0], 1, 2)?;
                probe_loss(g, y, ps)
            })
        }),
        case(OpKind::Reshape, |rng, fault| {
            let inputs = vec![randn(&[2, 6], rng)];
            let ps = rng.random();
            check(fault, inputs, move |g, x| {
                let y = g.reshape(x[0], &[3, 4])?;
                probe_loss(g, y, ps)
            })
        }),
        case(OpKind::Sum, |rng, fault| {
            let inputs = vec![randn(&[3, 3], rng)];
            check(fault, inputs, |g, x| {
                let t = g.tanh(x[0])?;
                let s = g.sum(t)?;
                let s2 = g.tanh(s)?;
                g.sum(s2)
            })
        }),
        case(OpKind::Mean, |rng, fault| {
            let inputs = vec![randn(&[3, 3], rng)];
            check(fault, inputs, |g, x| {
                let t = g.tanh(x[0])?;
                let m = g.mean(t)?;
                let m2 = g.tanh(m)?;
                g.mean(m2)
            })
        }),
        case(OpKind::WeightedSum, |rng, fault| {
            let w = randn(&[5], rng);
            let inputs = vec![randn(&[5], rng)];
            check(fault, inputs, move |g, x| {
                let t = g.tanh(x[0])?;
                g.weighted_sum(t, &w)
            })
        }),
        case(OpKind::LinComb, |rng, fault| {
            let (c0, c1) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let inputs = vec![randn(&[3], rng), randn(&[2, 2], rng)];
            check(fault, inputs, move |g, x| {
                let t = g.tanh(x[0])?;
                let a = g.sum(t)?;
                let b = g.mean(x[1])?;
                let ab = g.lin_comb(&[(a, c0), (b, c1)])?;
                g.tanh(ab)
            })
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let x = Tensor::from_fn(vec![6], |i| i as f64 - 2.0);
        let r = finite_diff_check(
            |g, ids| {
                let y = g.affine(ids[0], 3.0, 0.0)?;
                g.sum(y)
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn rejects_non_scalar_and_bad_eps() {
        let x = Tensor::from_fn(vec![3], |i| i as f64);
        assert!(matches!(
            finite_diff_check(|_, ids| Ok(ids[0]), &[x.clone()], 1e-5),
            Err(AutogradError::NonScalarLoss(_))
        ));
        assert!(finite_diff_check(|g, ids| g.sum(ids[0]), &[x.clone()], 1.0).is_err());
        assert!(finite_diff_check(|g, ids| g.sum(ids[0]), &[x], 1e-9).is_err());
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let x = Tensor::from_fn(vec![4], |i| 0.3 * i as f64 + 0.1);
        let r = finite_diff_check_with_fault(
            |g, ids| {
                let y = g.tanh(ids[0])?;
                g.sum(y)
            },
            &[x],
            DEFAULT_EPS,
            Some(OpKind::Tanh),
        )
        .unwrap();
        assert!((r.max_rel_error - 0.01 / 1.01).abs() < 1e-6, "{r:?}");
        assert!(r.max_rel_error > DEFAULT_TOL);
    }

    #[test]
    fn registry_lists_each_differentiable_op_once() {
        let names: Vec<_> = registry().iter().map(|c| c.kind).collect();
        for kind in OpKind::DIFFERENTIABLE {
            assert_eq!(names.iter().filter(|&&k| k == kind).count(), 1, "{kind:?}");
        }
        assert_eq!(names.len(), OpKind::DIFFERENTIABLE.len());
    }
}
