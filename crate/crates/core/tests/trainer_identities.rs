use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wxadapt_autograd::{BnMode, Graph, NodeId, Tensor};
use wxadapt_core::models::{Ctx, Detection, Detector};
use wxadapt_core::priors::{PriorKind, PriorMap};
use wxadapt_core::trainer::{
    build_losses, evaluate_map, pal_level_loss, train, Batch, Item, Mode, Sgd, TrainConfig, TrainData, Trainer,
};
use wxadapt_core::weathersim::Weather;
use wxadapt_core::BBox;

const SIZE: usize = 64;

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let s = rng.random_range(14.0..40.0f32);
    let x = rng.random_range(0.0..SIZE as f32 - s);
    let y = rng.random_range(0.0..SIZE as f32 - s);
    BBox::new(x, y, x + s, y + s)
}

fn item(rng: &mut ChaCha8Rng, labeled: bool, with_prior: bool) -> Item {
    let image = (0..3 * SIZE * SIZE).map(|_| rng.random_range(-2.0..2.0f32)).collect();
    let (boxes, labels) = if labeled {
        let n = rng.random_range(1..=2);
        ((0..n).map(|_| random_box(rng)).collect(), (0..n).map(|_| rng.random_range(0..3)).collect())
    } else {
        (Vec::new(), Vec::new())
    };
    let priors = with_prior.then(|| {
        let mut map = |s: usize, l: u8| {
            PriorMap::new(s, s, 1, (0..s * s).map(|_| rng.random()).collect(), PriorKind::Haze, l).unwrap()
        };
        [map(SIZE / 16, 4), map(SIZE / 32, 5)]
    });
    Item {
        image: Some(image),
        boxes,
        labels,
        priors,
        f2: None,
    }
}

fn data(seed: u64) -> TrainData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = (0..6).map(|_| item(&mut rng, true, true)).collect();
    let target = (0..6).map(|_| item(&mut rng, false, true)).collect();
    let val = (0..4).map(|_| item(&mut rng, true, false)).collect();
    let names = ["circle", "square", "triangle"].map(String::from).to_vec();
    TrainData::from_items(Weather::Haze, (SIZE, SIZE), names, source, Some(target), val)
}

fn cfg(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        iterations: 3,
        batch_source: 2,
        batch_target: 2,
        lr: 1e-2,
        ..TrainConfig::default()
    }
}

/// Gradients of every bound parameter under the given loss, by name.
fn grads_of(
    cfg: &TrainConfig,
    data: &TrainData,
    det: &mut Detector<f64>,
    pick: impl Fn(&mut Graph<f64>, &wxadapt_core::trainer::LossNodes) -> NodeId,
) -> Vec<(String, Option<Tensor<f64>>)> {
    let batch = Batch {
        src: data.source.iter().take(2).collect(),
        tgt: data.target_items(&[0, 1]).unwrap(),
    };
    let mut g = Graph::new();
    let (nodes, bound) = {
        let mut ctx = Ctx::new(&mut g, &mut det.store, BnMode::Train);
        let nodes = build_losses(&mut ctx, &det.net, cfg, data, &batch, false).unwrap();
        (nodes, ctx.bound())
    };
    let loss = pick(&mut g, &nodes);
    g.backward(loss).unwrap();
    bound
        .iter()
        .map(|&(p, n)| (det.store.name(p).to_string(), g.grad(n).cloned()))
        .collect()
}

fn is_zero(t: &Option<Tensor<f64>>) -> bool {
    t.as_ref().is_none_or(|t| t.data().iter().all(|&v| v == 0.0))
}

fn randomized_detector(cfg: &TrainConfig, seed: u64) -> Detector<f64> {
    let mut det = Detector::<f64>::new(cfg.model_config(3), cfg.seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in det.store.ids_with_prefix("rfrb").collect::<Vec<_>>() {
        let shape = det.store.get(id).shape().to_vec();
        *det.store.get_mut(id) = Tensor::randn(shape, 0.05, &mut rng);
    }
    det
}

#[test]
fn source_loss_never_reaches_recovery_blocks() {
    let d = data(1);
    for mode in [Mode::P45r45, Mode::D5r5, Mode::P5r5] {
        let c = cfg(mode);
        let mut det = randomized_detector(&c, 2);
        let grads = grads_of(&c, &d, &mut det, |_, n| n.det.total);
        let rfrb: Vec<_> = grads.iter().filter(|(n, _)| n.starts_with("rfrb")).collect();
        assert!(!rfrb.is_empty());
        assert!(rfrb.iter().all(|(_, g)| is_zero(g)), "{mode:?}");
    }
}

#[test]
fn frozen_stem_gets_no_gradient_in_any_mode() {
    let d = data(2);
    for mode in Mode::ALL {
        let c = cfg(mode);
        let mut det = randomized_detector(&c, 3);
        let grads = grads_of(&c, &d, &mut det, |_, n| n.total);
        for (name, g) in &grads {
            if name.starts_with("extractor.c1.") || name.starts_with("extractor.c2.") {
                assert!(is_zero(g), "{mode:?} {name}");
            }
        }
    }
}

#[test]
fn zero_reversal_coefficient_decouples_extractor_from_priors() {
    let d = data(3);
    let c = TrainConfig {
        grl_coeff: 0.0,
        ..cfg(Mode::P45r45)
    };
    let mut det = randomized_detector(&c, 4);
    let grads = grads_of(&c, &d, &mut det, |_, n| n.adv);
    let mut pen_moved = false;
    for (name, g) in &grads {
        if name.starts_with("extractor") || name.starts_with("rfrb") {
            assert!(is_zero(g), "{name}");
        }
        if name.starts_with("pen") && !is_zero(g) {
            pen_moved = true;
        }
    }
    assert!(pen_moved);
}

#[test]
fn zero_lambda_removes_the_regularizer_gradient() {
    let d = data(4);
    let c = TrainConfig {
        lambda_reg: 0.0,
        ..cfg(Mode::P45r45)
    };
    let mut det = randomized_detector(&c, 5);
    let with = grads_of(&c, &d, &mut det, |_, n| n.total);
    let without = grads_of(&c, &d, &mut det, |g, n| {
        g.lin_comb(&[(n.det.total, 1.0), (n.adv, 1.0), (n.disc, 1.0)]).unwrap()
    });
    for ((name, a), (_, b)) in with.iter().zip(&without) {
        if name.starts_with("rfrb") {
            let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{name}");
            }
        }
    }
}

#[test]
fn logged_total_is_the_sum_of_its_parts() {
    let d = data(5);
    for mode in Mode::ALL {
        for lambda in [0.0f32, 0.01, 0.1, 1.0] {
            let c = TrainConfig {
                lambda_reg: lambda,
                iterations: 2,
                ..cfg(mode)
            };
            let out = train(&c, &d).unwrap();
            for r in out.metrics.rows() {
                assert_eq!(r.total, r.recomputed_total(lambda), "{mode:?} {lambda}");
                assert_eq!(r.det, 0.0 + r.det_obj + r.det_cls + r.det_box);
                assert_eq!(r.adv, 0.5 * r.pal_src + 0.5 * r.pal_tgt);
            }
        }
    }
}

#[test]
fn source_only_mode_draws_no_target_images() {
    let d = data(6);
    let out = train(&cfg(Mode::Frcnn), &d).unwrap();
    assert_eq!(out.target_draws, 0);
    assert_eq!(d.target_draws(), 0);
    for r in out.metrics.rows() {
        assert!(r.det > 0.0);
        assert_eq!((r.adv, r.disc, r.reg, r.pal_src, r.pal_tgt), (0.0, 0.0, 0.0, 0.0, 0.0));
    }
    let adapted = train(&cfg(Mode::P45r45), &d).unwrap();
    assert_eq!(adapted.target_draws, 3 * 2);
    assert_eq!(d.target_draws(), 3 * 2);
}

#[test]
fn adaptation_modes_need_the_target_split() {
    let mut d = data(6);
    d.source.truncate(3);
    let names = d.class_names.clone();
    let bare = TrainData::from_items(Weather::Haze, (SIZE, SIZE), names, d.source.clone(), None, d.val.clone());
    assert!(Trainer::new(cfg(Mode::D5), &bare).is_err());
    assert!(Trainer::new(cfg(Mode::Frcnn), &bare).is_ok());
}

#[test]
fn frozen_stem_is_bitwise_unchanged_after_a_step() {
    let d = data(7);
    let mut t = Trainer::new(cfg(Mode::P45r45), &d).unwrap();
    let before = t.detector.clone();
    t.step().unwrap();
    let mut moved = false;
    for id in before.store.ids() {
        let name = before.store.name(id);
        let same = before.store.get(id) == t.detector.store.get(id);
        if name.starts_with("extractor.c1.") || name.starts_with("extractor.c2.") {
            assert!(same, "{name}");
        } else if !same {
            moved = true;
        }
    }
    assert!(moved);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let d = data(8);
    let c = TrainConfig {
        lr: 0.0,
        lr_final: 0.0,
        ..cfg(Mode::P45r45)
    };
    let mut t = Trainer::new(c, &d).unwrap();
    let before = t.detector.clone();
    t.step().unwrap();
    t.step().unwrap();
    for id in before.store.ids() {
        assert_eq!(before.store.get(id), t.detector.store.get(id));
    }
    let mut opt = Sgd::new(0.9, 5e-4);
    let mut det = before.clone();
    let id = det.store.find("head.out.weight").unwrap();
    let g = Tensor::full(det.store.get(id).shape().to_vec(), 1.0f32);
    opt.step(&mut det.store, &[(id, &g)], 0.0);
    assert_eq!(det.store.get(id), before.store.get(id));
}

#[test]
fn single_iteration_run_logs_one_row() {
    let d = data(9);
    let c = TrainConfig {
        iterations: 1,
        ..cfg(Mode::P45r45)
    };
    let out = train(&c, &d).unwrap();
    assert_eq!(out.metrics.len(), 1);
    assert_eq!(out.checkpoint().iteration, 1);
    assert_eq!(out.evals.len(), 1);
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let d = data(10);
    let c = cfg(Mode::P45r45);
    let a = train(&c, &d).unwrap();
    let b = train(&c, &d).unwrap();
    assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
    let other = train(&TrainConfig { seed: 1, ..c }, &d).unwrap();
    assert_ne!(a.metrics.to_csv(), other.metrics.to_csv());
}

#[test]
fn batch_prior_loss_is_the_mean_of_per_sample_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pred = Tensor::<f64>::from_fn(vec![2, 1, 3, 4], |_| rng.random());
    let prior = Tensor::<f64>::from_fn(vec![2, 1, 3, 4], |_| rng.random());
    let mut g = Graph::new();
    let (p, z) = (g.constant(pred.clone()), g.constant(prior.clone()));
    let both = pal_level_loss(&mut g, p, z).unwrap();
    let mut per = 0.0;
    for n in 0..2 {
        let s = |t: &Tensor<f64>| Tensor::new(vec![1, 1, 3, 4], t.data()[n * 12..(n + 1) * 12].to_vec()).unwrap();
        let (p, z) = (g.constant(s(&pred)), g.constant(s(&prior)));
        let l = pal_level_loss(&mut g, p, z).unwrap();
        per += g.value(l).item() / 2.0;
    }
    assert!((g.value(both).item() - per).abs() < 1e-15);
}

/// Recounts everything per cutoff rank: true positives among the first `k`
/// detections, precision, and the precision envelope at every recall step.
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
    let hit_at = |k: usize| -> Vec<bool> {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|(b, _)| vec![false; b.len()]).collect();
        let mut out = Vec::new();
        for &(i, j) in &ranked[..k] {
            let bb = dets[i][j].bbox;
            let (boxes, labels) = &gts[i];
            let mut best = None;
            let mut best_iou = f32::NEG_INFINITY;
            for g in 0..boxes.len() {
                if labels[g] == c && bb.iou(&boxes[g]) > best_iou {
                    best_iou = bb.iou(&boxes[g]);
                    best = Some(g);
                }
            }
            let tp = matches!(best, Some(g) if best_iou >= thr && !used[i][g]);
            if tp {
                used[i][best.unwrap()] = true;
            }
            out.push(tp);
        }
        out
    };
    let n = ranked.len();
    let hits = hit_at(n);
    let prec: Vec<f64> = (1..=n)
        .map(|k| hit_at(k).iter().filter(|&&h| h).count() as f64 / k as f64)
        .collect();
    let mut sum = 0.0;
    for k in 0..n {
        if hits[k] {
            sum += prec[k..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    Some(sum / npos as f64)
}

#[test]
fn map_matches_brute_force_oracle_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..100 {
        let n_img = rng.random_range(1..=3);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..n_img {
            let k = rng.random_range(0..=5);
            let boxes: Vec<BBox> = (0..k).map(|_| random_box(&mut rng)).collect();
            let labels: Vec<usize> = (0..k).map(|_| rng.random_range(0..3)).collect();
            let mut d = Vec::new();
            for (b, &l) in boxes.iter().zip(&labels) {
                for _ in 0..rng.random_range(0..=2) {
                    let j = rng.random_range(-6.0..6.0f32);
                    let class = if rng.random_bool(0.8) { l } else { rng.random_range(0..3) };
                    d.push(Detection {
                        bbox: BBox::new(b.x_min + j, b.y_min, b.x_max + j, b.y_max),
                        class,
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
        let mut present = Vec::new();
        for c in 0..3 {
            let want = oracle_ap(&dets, &gts, c, 0.5);
            assert_eq!(r.ap[c], want, "trial {trial} class {c}");
            present.extend(want);
        }
        let want_map = if present.is_empty() { 0.0 } else { present.iter().fold(0.0, |a, b| a + b) / present.len() as f64 };
        assert_eq!(r.map, want_map, "trial {trial}");
    }
}

#[test]
fn parallel_ablation_matches_sequential() {
    use wxadapt_core::trainer::ablation_run;
    let d = data(13);
    let modes = [Mode::Frcnn, Mode::P45r45];
    let mut seen = Vec::new();
    let mut hook = |m: Mode, s: u64, _: &wxadapt_core::trainer::TrainOutcome| {
        seen.push((m, s));
        Ok(())
    };
    let seq = ablation_run(&cfg(Mode::Frcnn), &d, &modes, &[0, 1], 1, None, &mut hook).unwrap();
    let par = ablation_run(&cfg(Mode::Frcnn), &d, &modes, &[0, 1], 3, None, &mut |_, _, _| Ok(())).unwrap();
    assert_eq!(seen, vec![(Mode::Frcnn, 0), (Mode::Frcnn, 1), (Mode::P45r45, 0), (Mode::P45r45, 1)]);
    assert_eq!(seq.to_csv(), par.to_csv());
    assert_eq!(seq.rows.len(), 2);
}
