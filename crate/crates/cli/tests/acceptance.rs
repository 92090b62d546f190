//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Pass criterion numbers as arguments to run a subset.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wxadapt_autograd::{BnMode, Graph, Tensor};
use wxadapt_core::models::{Ctx, Detection, Detector};
use wxadapt_core::priors::{PriorKind, PriorMap};
use wxadapt_core::stats::pearson;
use wxadapt_core::trainer::{
    ablation_run, build_losses, evaluate_map, lambda_sweep, pal_level_loss, pen_learnability, sweep_csv, train, Batch,
    Item, Mode, TrainConfig, TrainData,
};
use wxadapt_core::weathersim::{generate_sample, synthesize_dataset, DatasetManifest, Split, SynthConfig, Weather};
use wxadapt_core::BBox;

const ACCEPTANCE_TOML: &str = include_str!("../../../configs/acceptance.toml");
const LADDER_SEEDS: [u64; 3] = [0, 1, 2];
const LADDER_DATA_SEED: u64 = 1;
const LADDER_BUDGET_S: f64 = 45.0 * 60.0;
const SWEEP_ITERATIONS: usize = 300;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn acceptance_config() -> TrainConfig {
    TrainConfig::from_toml(ACCEPTANCE_TOML).expect("acceptance config parses")
}

/// The 500/500/200 haze benchmark, synthesized once per process.
fn benchmark() -> &'static DatasetManifest {
    static DATA: OnceLock<(tempfile::TempDir, DatasetManifest)> = OnceLock::new();
    &DATA
        .get_or_init(|| {
            let dir = tempfile::tempdir().expect("temp dir");
            let t = Instant::now();
            let m = synthesize_dataset(&SynthConfig::default(), dir.path(), LADDER_DATA_SEED).expect("synthesis");
            println!("  (benchmark synthesized in {:.1}s)", t.elapsed().as_secs_f64());
            (dir, m)
        })
        .1
}

fn load(m: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainData, String> {
    let mut data = TrainData::load(m, cfg, true).map_err(err)?;
    data.cache_stem(&cfg.model_config(data.num_classes)).map_err(err)?;
    Ok(data)
}

fn gradient_suite() -> Result<String, String> {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_wxadapt"))
        .args(["gradcheck", "--seeds", "10"])
        .output()
        .map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let ops = stdout.lines().filter(|l| l.contains(" tol ")).count();
    ensure(out.status.success(), || {
        format!("gradcheck exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim())
    })?;
    ensure(ops == wxadapt_autograd::OpKind::DIFFERENTIABLE.len(), || format!("{ops} ops reported"))?;
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{ops} ops x 10 seeds, exit 0 in {secs:.1}s"))
}

const SIZE: usize = 64;

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let s = rng.random_range(14.0..40.0f32);
    let x = rng.random_range(0.0..SIZE as f32 - s);
    let y = rng.random_range(0.0..SIZE as f32 - s);
    BBox::new(x, y, x + s, y + s)
}

fn random_data(seed: u64) -> TrainData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut item = |labeled: bool, prior: bool| {
        let image = Some((0..3 * SIZE * SIZE).map(|_| rng.random_range(-2.0..2.0f32)).collect());
        let n = if labeled { rng.random_range(1..=2) } else { 0 };
        let boxes = (0..n).map(|_| random_box(&mut rng)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
        let priors = prior.then(|| {
            let mut map = |s: usize, l: u8| {
                PriorMap::new(s, s, 1, (0..s * s).map(|_| rng.random()).collect(), PriorKind::Haze, l).unwrap()
            };
            [map(SIZE / 16, 4), map(SIZE / 32, 5)]
        });
        Item {
            image,
            boxes,
            labels,
            priors,
            f2: None,
        }
    };
    let source = (0..4).map(|_| item(true, true)).collect();
    let target = (0..4).map(|_| item(false, true)).collect();
    let val = (0..2).map(|_| item(true, false)).collect();
    let names = ["circle", "square", "triangle"].map(String::from).to_vec();
    TrainData::from_items(Weather::Haze, (SIZE, SIZE), names, source, Some(target), val)
}

fn structural_identities() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    // reversal: identity forward, -c times the upstream gradient backward
    for c in [1.0, 0.5, 0.1] {
        let x = Tensor::<f64>::randn(vec![2, 3, 4, 4], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(vec![2, 3, 4, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.param(x.clone());
        let y = g.grad_reverse(xn, c).map_err(err)?;
        ensure(g.value(y) == &x, || "reversal changed the forward value".into())?;
        let l = g.weighted_sum(y, &w).map_err(err)?;
        g.backward(l).map_err(err)?;
        ensure(g.grad(xn) == Some(&w.map(|v| -c * v)), || format!("reversal gradient wrong at coeff {c}"))?;
    }

    // zero-initialized recovery blocks leave target features unchanged
    let cfg = TrainConfig {
        mode: Mode::P45r45,
        batch_source: 2,
        batch_target: 2,
        iterations: 2,
        ..TrainConfig::default()
    };
    let mut det = Detector::<f64>::new(cfg.model_config(3), 0).map_err(err)?;
    {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut det.store, BnMode::Eval);
        let x = ctx.g.constant(Tensor::randn(vec![2, 3, 64, 64], 1.0, &mut rng));
        let f = det.net.forward_target(&mut ctx, x).map_err(err)?;
        ensure(g.value(f.f4_hat) == g.value(f.f4) && g.value(f.f5_hat) == g.value(f.f5), || {
            "recovery blocks changed features at init".into()
        })?;
    }

    // source-only loss sends no gradient into recovery blocks
    let data = random_data(1);
    for id in det.store.ids_with_prefix("rfrb").collect::<Vec<_>>() {
        let shape = det.store.get(id).shape().to_vec();
        *det.store.get_mut(id) = Tensor::randn(shape, 0.05, &mut rng);
    }
    let batch = Batch {
        src: data.source.iter().take(2).collect(),
        tgt: data.target_items(&[0, 1]).map_err(err)?,
    };
    let mut g = Graph::new();
    let (nodes, bound) = {
        let mut ctx = Ctx::new(&mut g, &mut det.store, BnMode::Train);
        let nodes = build_losses(&mut ctx, &det.net, &cfg, &data, &batch, false).map_err(err)?;
        (nodes, ctx.bound())
    };
    g.backward(nodes.det.total).map_err(err)?;
    let mut rfrb = 0;
    for &(p, n) in &bound {
        if det.store.name(p).starts_with("rfrb") {
            rfrb += 1;
            let zero = g.grad(n).is_none_or(|t| t.data().iter().all(|&v| v == 0.0));
            ensure(zero, || format!("{} received source gradient", det.store.name(p)))?;
        }
    }
    ensure(rfrb > 0, || "no recovery parameters bound".into())?;

    // prior loss: nonnegative, zero exactly at the target
    for _ in 0..20 {
        let p = Tensor::<f64>::from_fn(vec![2, 1, 4, 4], |_| rng.random());
        let z = Tensor::<f64>::from_fn(vec![2, 1, 4, 4], |_| rng.random());
        let mut g = Graph::new();
        let (pn, zn, qn) = (g.constant(p.clone()), g.constant(z), g.constant(p));
        let l = pal_level_loss(&mut g, pn, zn).map_err(err)?;
        let l0 = pal_level_loss(&mut g, pn, qn).map_err(err)?;
        ensure(g.value(l).item() >= 0.0 && g.value(l0).item() == 0.0, || "prior loss law violated".into())?;
    }

    // logged total equals the weighted sum of logged components
    let mut rows = 0;
    for mode in Mode::ALL {
        for lambda in [0.0f32, 0.01, 0.1, 1.0] {
            let c = TrainConfig {
                mode,
                lambda_reg: lambda,
                ..cfg.clone()
            };
            for r in train(&c, &data).map_err(err)?.metrics.rows() {
                rows += 1;
                let parts = r.recomputed_total(lambda);
                ensure((r.total - parts).abs() <= 1e-6 * (1.0 + parts.abs()), || {
                    format!("{mode:?} lambda {lambda}: total {} vs parts {parts}", r.total)
                })?;
            }
        }
    }
    Ok(format!("reversal, zero-init, source purity, prior-loss law, bookkeeping over {rows} steps"))
}

fn fidelity(weather: Weather, n: usize) -> Result<f64, String> {
    let cfg = SynthConfig {
        weather,
        ..SynthConfig::default()
    };
    let (mut gt, mut est) = (Vec::new(), Vec::new());
    for i in 0..n {
        let g = generate_sample(&cfg, Split::TrainTarget, i, 7).map_err(err)?;
        gt.extend_from_slice(g.sample.gt_prior.as_ref().ok_or("no ground truth")?.values());
        est.extend_from_slice(g.sample.est_prior.as_ref().ok_or("no estimate")?.values());
    }
    Ok(pearson(&gt, &est))
}

fn prior_fidelity() -> Result<String, String> {
    let t = Instant::now();
    let haze = fidelity(Weather::Haze, 50)?;
    let rain = fidelity(Weather::Rain, 50)?;
    let secs = t.elapsed().as_secs_f64();
    let detail = format!("haze r = {haze:.3}, rain r = {rain:.3} over 50 samples each in {secs:.1}s");
    ensure(haze >= 0.7 && rain >= 0.6 && secs < 120.0, || detail.clone())?;
    Ok(detail)
}

fn pen_learnable() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let sc = SynthConfig {
        n_source: 16,
        n_target: 16,
        n_val: 4,
        ..SynthConfig::default()
    };
    let m = synthesize_dataset(&sc, dir.path(), 1).map_err(err)?;
    let cfg = TrainConfig::default();
    let data = load(&m, &cfg)?;
    let losses = pen_learnability(&cfg, &data, 201).map_err(err)?;
    let (first, last) = (losses[0], losses[200]);
    let drop = 1.0 - last / first;
    let detail = format!("prior loss {first:.4} -> {last:.4} after 200 steps ({:.0}% drop)", 100.0 * drop);
    ensure(drop >= 0.5, || detail.clone())?;
    Ok(detail)
}

fn directional_adaptation() -> Result<String, String> {
    let m = benchmark();
    let base = acceptance_config();
    let data = load(m, &base)?;
    let t = Instant::now();
    let mut hook = |mode: Mode, seed: u64, o: &wxadapt_core::trainer::TrainOutcome| {
        println!(
            "  {:<14} seed {seed}: mAP {:.3} ({:.0}s elapsed)",
            mode.label(),
            o.final_report().map,
            t.elapsed().as_secs_f64()
        );
        Ok(())
    };
    let table = ablation_run(&base, &data, &Mode::LADDER, &LADDER_SEEDS, 1, None, &mut hook).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    print!("{}", table.to_markdown());
    let med = |mode| table.row(mode).map(|r| r.map).unwrap_or(f64::NAN);
    let (frcnn, d5, ours) = (med(Mode::Frcnn), med(Mode::D5), med(Mode::P45r45));
    let detail = format!(
        "median mAP FRCNN {:.1}, D5 {:.1}, P45R45 {:.1}; ladder {:.1} min",
        100.0 * frcnn,
        100.0 * d5,
        100.0 * ours,
        secs / 60.0
    );
    ensure(ours >= frcnn + 0.05 && ours >= d5 && secs <= LADDER_BUDGET_S, || detail.clone())?;
    Ok(detail)
}

/// Average precision from the full precision-recall curve: every ranked
/// cutoff is matched from scratch, then precision is made monotone from the
/// right and integrated over recall steps.
fn oracle_ap(dets: &[Vec<Detection>], gts: &[(Vec<BBox>, Vec<usize>)], c: usize, thr: f32) -> Option<f64> {
    let npos = gts.iter().flat_map(|(_, l)| l).filter(|&&k| k == c).count();
    if npos == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, usize)> = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, det) in d.iter().enumerate() {
            if det.class == c {
                ranked.push((i, j));
            }
        }
    }
    ranked.sort_by(|x, y| {
        let (sx, sy) = (dets[x.0][x.1].score, dets[y.0][y.1].score);
        sy.total_cmp(&sx).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1))
    });
    let tp_upto = |k: usize| -> usize {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|(b, _)| vec![false; b.len()]).collect();
        let mut tp = 0;
        for &(i, j) in &ranked[..k] {
            let bb = dets[i][j].bbox;
            let (boxes, labels) = &gts[i];
            let best = (0..boxes.len())
                .filter(|&g| labels[g] == c)
                .map(|g| (g, bb.iou(&boxes[g])))
                .fold(None, |acc: Option<(usize, f32)>, (g, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((g, v)),
                });
            if let Some((g, v)) = best {
                if v >= thr && !used[i][g] {
                    used[i][g] = true;
                    tp += 1;
                }
            }
        }
        tp
    };
    let n = ranked.len();
    let tps: Vec<usize> = (0..=n).map(tp_upto).collect();
    let prec: Vec<f64> = (1..=n).map(|k| tps[k] as f64 / k as f64).collect();
    let mut ap = 0.0;
    for k in 1..=n {
        if tps[k] > tps[k - 1] {
            let envelope = prec[k - 1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ap += envelope;
        }
    }
    Some(ap / npos as f64)
}

fn map_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let n_img = rng.random_range(1..=3);
        let (mut gts, mut dets) = (Vec::new(), Vec::new());
        for _ in 0..n_img {
            let k = rng.random_range(0..=5);
            let boxes: Vec<BBox> = (0..k).map(|_| random_box(&mut rng)).collect();
            let labels: Vec<usize> = (0..k).map(|_| rng.random_range(0..3)).collect();
            let mut d = Vec::new();
            for (b, &l) in boxes.iter().zip(&labels) {
                for _ in 0..rng.random_range(0..=2) {
                    let j = rng.random_range(-6.0..6.0f32);
                    d.push(Detection {
                        bbox: BBox::new(b.x_min + j, b.y_min, b.x_max + j, b.y_max),
                        class: if rng.random_bool(0.8) { l } else { rng.random_range(0..3) },
                        score: rng.random_range(0..5) as f32 / 4.0,
                    });
                }
            }
            for _ in 0..rng.random_range(0..=2) {
                d.push(Detection {
                    bbox: random_box(&mut rng),
                    class: rng.random_range(0..3),
                    score: rng.random_range(0..5) as f32 / 4.0,
                });
            }
            gts.push((boxes, labels));
            dets.push(d);
        }
        let r = evaluate_map(&dets, &gts, 3, 0.5);
        let want: Vec<Option<f64>> = (0..3).map(|c| oracle_ap(&dets, &gts, c, 0.5)).collect();
        ensure(r.ap == want, || format!("scene {trial}: {:?} vs oracle {want:?}", r.ap))?;
        let present: Vec<f64> = want.iter().flatten().copied().collect();
        let want_map = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        ensure(r.map == want_map, || format!("scene {trial}: mAP {} vs oracle {want_map}", r.map))?;
    }
    Ok("100 random scenes match exactly".into())
}

fn same_file(a: &Path, b: &Path, name: &str) -> Result<(), String> {
    let (x, y) = (std::fs::read(a.join(name)).map_err(err)?, std::fs::read(b.join(name)).map_err(err)?);
    ensure(x == y, || format!("{name} differs between runs"))
}

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let sc = SynthConfig {
        n_source: 12,
        n_target: 12,
        n_val: 6,
        ..SynthConfig::default()
    };
    let m = synthesize_dataset(&sc, &dir.path().join("data"), 5).map_err(err)?;
    let cfg = TrainConfig {
        iterations: 30,
        ..acceptance_config()
    };
    let data = load(&m, &cfg)?;
    for run in ["a", "b"] {
        train(&cfg, &data)
            .map_err(err)?
            .write(&dir.path().join(run), &data.class_names)
            .map_err(err)?;
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for f in ["metrics.csv", "eval.csv", "checkpoint.wxa"] {
        same_file(&a, &b, f)?;
    }
    Ok("metrics.csv, eval.csv and checkpoint.wxa byte-identical across two 30-step runs".into())
}

fn lambda_sensitivity() -> Result<String, String> {
    let base = TrainConfig {
        iterations: SWEEP_ITERATIONS,
        ..acceptance_config()
    };
    let data = load(benchmark(), &base)?;
    let rows = lambda_sweep(&base, &data, &[0.01, 0.1, 1.0]).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let csv = sweep_csv(&rows);
    let path = dir.path().join("lambda_sweep.csv");
    std::fs::write(&path, &csv).map_err(err)?;
    ensure(std::fs::read_to_string(&path).map_err(err)?.lines().count() == 4, || "sweep CSV incomplete".into())?;
    print!("{}", csv.lines().map(|l| format!("  {l}\n")).collect::<String>());
    for r in &rows {
        ensure(r.diverged.is_none() && r.iterations == SWEEP_ITERATIONS, || {
            format!("lambda {} diverged ({:?}) at {}", r.lambda, r.diverged, r.iterations)
        })?;
    }
    let maps: Vec<String> = rows.iter().map(|r| format!("{}: {:.1}", r.lambda, 100.0 * r.map)).collect();
    Ok(format!("no divergence over {SWEEP_ITERATIONS} steps; mAP {}", maps.join(", ")))
}

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("gradient suite", gradient_suite),
        ("structural identities", structural_identities),
        ("prior fidelity", prior_fidelity),
        ("prior head learnability", pen_learnable),
        ("directional adaptation", directional_adaptation),
        ("mAP oracle", map_oracle),
        ("determinism", determinism),
        ("lambda sweep", lambda_sensitivity),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let k = i + 1;
        if !only.is_empty() && !only.contains(&k) {
            continue;
        }
        let t = Instant::now();
        let r = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(detail) => println!("PASS criterion {k} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {k} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
