use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wxadapt_autograd::{BnMode, Graph, NodeId, Scalar, Tensor};

use crate::error::{CoreError, Result};
use crate::models::{decode_detections, Checkpoint, Ctx, Detection, Detector, Features, Net, RngState};
use crate::priors::{PriorKind, PriorMap};

use super::config::TrainConfig;
use super::data::{batch_input, batch_prior, BatchInput, Item, Sampler, StemKey, TrainData};
use super::losses::{
    adv_loss, build_targets, detection_loss, domain_loss, mean_of, pal_domain_loss, pal_level_loss, reg_loss,
    DetLoss,
};
use super::metrics::{eval_csv, evaluate_map, EvalRecord, MapReport, MetricsLog, StepRecord};
use super::optim::Sgd;

const EVAL_BATCH: usize = 20;

pub const CHECKPOINT_FILE: &str = "checkpoint.wxa";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Items of one step. `tgt` is empty in source-only mode.
pub struct Batch<'a> {
    pub src: Vec<&'a Item>,
    pub tgt: Vec<&'a Item>,
}

/// Tape nodes of every loss term of one step.
pub struct LossNodes {
    pub total: NodeId,
    pub det: DetLoss,
    pub adv: NodeId,
    pub pal_src: NodeId,
    pub pal_tgt: NodeId,
    pub disc: NodeId,
    pub reg: NodeId,
    pub src_feats: Features,
    pub tgt_feats: Option<Features>,
}

fn input_node<T: Scalar>(ctx: &mut Ctx<'_, T>, net: &Net, input: BatchInput) -> Result<NodeId> {
    Ok(match input {
        BatchInput::F2(t) => ctx.g.constant(t.cast()),
        BatchInput::Image(t) => {
            let x = ctx.g.constant(t.cast());
            net.stem(ctx, x)?
        }
    })
}

fn zero<T: Scalar>(ctx: &mut Ctx<'_, T>) -> NodeId {
    ctx.g.constant(Tensor::scalar(T::zero()))
}

/// Records the full objective on one tape:
/// `det(src) + adv(src, tgt) + disc(src, tgt) + lambda * reg(tgt)`.
pub fn build_losses<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    net: &Net,
    cfg: &TrainConfig,
    data: &TrainData,
    batch: &Batch<'_>,
    use_cache: bool,
) -> Result<LossNodes> {
    let model = &net.config;
    let ns = batch.src.len();
    let x = batch_input(&batch.src, model, data, use_cache)?;
    let f2 = input_node(ctx, net, x)?;
    let src_feats = net.forward_from_f2(ctx, f2, false)?;
    let preds = net.detect_forward(ctx, src_feats.f5)?;
    let grid = net.anchor_grid(data.height, data.width);
    let gts: Vec<_> = batch.src.iter().map(|it| (&it.boxes[..], &it.labels[..])).collect();
    let targets = build_targets(&grid, model.num_classes, &gts);
    let det = detection_loss(ctx.g, preds, &targets, model.num_classes)?;

    let uses_target = cfg.mode.uses_target();
    let (mut pal_src, mut pal_tgt, mut disc, mut reg) = (None, None, None, None);
    let mut tgt_feats = None;
    if uses_target {
        if batch.tgt.is_empty() {
            return Err(CoreError::InvalidArgument(format!("mode {} needs a target batch", cfg.mode.name())));
        }
        let x = batch_input(&batch.tgt, model, data, use_cache)?;
        let f2 = input_node(ctx, net, x)?;
        let tf = net.forward_from_f2(ctx, f2, true)?;
        let nt = batch.tgt.len();
        let (mut ls, mut lt) = (Vec::new(), Vec::new());
        for pen in &net.pens {
            let l = pen.level;
            let ft = if model.pen_on_corrected { tf.corrected(l) } else { tf.raw(l) };
            let both = ctx.g.concat(&[src_feats.raw(l), ft])?;
            let pred = net.pen_forward(ctx, l, both)?;
            let ps = ctx.g.narrow(pred, 0, ns)?;
            let pt = ctx.g.narrow(pred, ns, nt)?;
            let zs = batch_prior(&batch.src, l, model.pen_out_channels)?;
            let zs = ctx.g.constant(zs.cast());
            let zt = batch_prior(&batch.tgt, l, model.pen_out_channels)?;
            let zt = ctx.g.constant(zt.cast());
            ls.push(pal_level_loss(ctx.g, ps, zs)?);
            lt.push(pal_level_loss(ctx.g, pt, zt)?);
        }
        if !ls.is_empty() {
            pal_src = Some(pal_domain_loss(ctx.g, &ls)?);
            pal_tgt = Some(pal_domain_loss(ctx.g, &lt)?);
        }
        let mut dl = Vec::new();
        for d in &net.discs {
            let both = ctx.g.concat(&[src_feats.raw(d.level), tf.corrected(d.level)])?;
            let logits = net.disc_forward(ctx, d.level, both)?;
            dl.push(domain_loss(ctx.g, logits, ns)?);
        }
        if !dl.is_empty() {
            disc = Some(mean_of(ctx.g, &dl)?);
        }
        if !tf.residuals.is_empty() {
            let r: Vec<NodeId> = tf.residuals.iter().map(|r| r.1).collect();
            reg = Some(reg_loss(ctx.g, &r)?);
        }
        tgt_feats = Some(tf);
    }
    let pal_src = pal_src.unwrap_or_else(|| zero(ctx));
    let pal_tgt = pal_tgt.unwrap_or_else(|| zero(ctx));
    let adv = adv_loss(ctx.g, pal_src, pal_tgt)?;
    let disc = disc.unwrap_or_else(|| zero(ctx));
    let reg = reg.unwrap_or_else(|| zero(ctx));
    let total = ctx.g.lin_comb(&[
        (det.total, T::one()),
        (adv, T::one()),
        (disc, T::one()),
        (reg, T::of(cfg.lambda_reg as f64)),
    ])?;
    Ok(LossNodes {
        total,
        det,
        adv,
        pal_src,
        pal_tgt,
        disc,
        reg,
        src_feats,
        tgt_feats,
    })
}

fn check_divergence(iteration: usize, parts: &[(&str, f32)], total: f32, threshold: f32) -> Result<()> {
    let fail = |component: &str, value: f32| CoreError::Diverged {
        iteration,
        component: component.to_string(),
        value: value as f64,
    };
    if let Some(&(name, v)) = parts.iter().find(|(_, v)| !v.is_finite()) {
        return Err(fail(name, v));
    }
    if !total.is_finite() || total > threshold {
        let worst = parts
            .iter()
            .filter(|(n, _)| *n != "det")
            .fold(("total", total), |acc, &(n, v)| if v > threshold { (n, v) } else { acc });
        return Err(fail(worst.0, worst.1));
    }
    Ok(())
}

/// One forward/backward pass and optimizer update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    det: &mut Detector<f32>,
    opt: &mut Sgd,
    cfg: &TrainConfig,
    data: &TrainData,
    batch: &Batch<'_>,
    use_cache: bool,
    iteration: usize,
    lr: f32,
) -> Result<StepRecord> {
    let mut g = Graph::<f32>::new();
    let (nodes, bound) = {
        let mut ctx = Ctx::new(&mut g, &mut det.store, BnMode::Train);
        let nodes = build_losses(&mut ctx, &det.net, cfg, data, batch, use_cache)?;
        (nodes, ctx.bound())
    };
    let v = |id: NodeId| g.value(id).item();
    let mut rec = StepRecord {
        iter: iteration,
        lr,
        total: v(nodes.total),
        det: v(nodes.det.total),
        det_obj: v(nodes.det.obj),
        det_cls: v(nodes.det.cls),
        det_box: v(nodes.det.bbox),
        adv: v(nodes.adv),
        pal_src: v(nodes.pal_src),
        pal_tgt: v(nodes.pal_tgt),
        disc: v(nodes.disc),
        reg: v(nodes.reg),
        grad_norm: 0.0,
    };
    check_divergence(
        iteration,
        &[
            ("det_obj", rec.det_obj),
            ("det_cls", rec.det_cls),
            ("det_box", rec.det_box),
            ("det", rec.det),
            ("adv", rec.adv),
            ("disc", rec.disc),
            ("reg", rec.reg),
        ],
        rec.total,
        cfg.divergence_threshold,
    )?;
    g.backward(nodes.total)?;
    let grads: Vec<_> = bound
        .iter()
        .filter(|(p, _)| !det.store.is_frozen(*p))
        .filter_map(|&(p, n)| g.grad(n).map(|t| (p, t)))
        .collect();
    let sq: f64 = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter().map(|&x| (x as f64) * (x as f64)))
        .sum();
    rec.grad_norm = sq.sqrt() as f32;
    opt.step_clipped(&mut det.store, &grads, lr, cfg.grad_clip);
    Ok(rec)
}

/// Whether cached block-2 features in `data` match this detector's frozen stem.
pub fn can_use_cache(det: &Detector<f32>, data: &TrainData) -> bool {
    det.config().freeze_early && data.stem_key() == Some(StemKey::of(det.config()))
}

/// Target-pipeline detections for each item.
pub fn predict(det: &mut Detector<f32>, data: &TrainData, items: &[Item], score_thresh: f32, nms_iou: f32) -> Result<Vec<Vec<Detection>>> {
    let use_cache = can_use_cache(det, data);
    let grid = det.net.anchor_grid(data.height, data.width);
    let nc = det.config().num_classes;
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_BATCH) {
        let refs: Vec<&Item> = chunk.iter().collect();
        let mut g = Graph::<f32>::new();
        let mut ctx = Ctx::new(&mut g, &mut det.store, BnMode::Eval);
        let x = batch_input(&refs, &det.net.config, data, use_cache)?;
        let f2 = input_node(&mut ctx, &det.net, x)?;
        let f = det.net.forward_from_f2(&mut ctx, f2, true)?;
        let preds = det.net.detect_forward(&mut ctx, f.f5_hat)?;
        let vals = g.value(preds).data();
        for n in 0..chunk.len() {
            out.push(decode_detections(
                vals,
                n,
                &grid,
                nc,
                data.width as f32,
                data.height as f32,
                score_thresh,
                nms_iou,
            ));
        }
    }
    Ok(out)
}

/// Target-pipeline prior-head predictions at `level` for each item.
pub fn predict_priors(det: &mut Detector<f32>, data: &TrainData, items: &[Item], level: u8, kind: PriorKind) -> Result<Vec<PriorMap>> {
    let use_cache = can_use_cache(det, data);
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_BATCH) {
        let refs: Vec<&Item> = chunk.iter().collect();
        let mut g = Graph::<f32>::new();
        let mut ctx = Ctx::new(&mut g, &mut det.store, BnMode::Eval);
        let x = batch_input(&refs, &det.net.config, data, use_cache)?;
        let f2 = input_node(&mut ctx, &det.net, x)?;
        let f = det.net.forward_from_f2(&mut ctx, f2, true)?;
        let feat = if det.net.config.pen_on_corrected { f.corrected(level) } else { f.raw(level) };
        let pred = det.net.pen_forward(&mut ctx, level, feat)?;
        let (_, c, h, w) = g.value(pred).dims4()?;
        for plane in g.value(pred).data().chunks(c * h * w) {
            // CHW to HWC
            let hwc = (0..h * w).flat_map(|p| (0..c).map(move |k| plane[k * h * w + p])).collect();
            out.push(PriorMap::new(h, w, c, hwc, kind, level)?);
        }
    }
    Ok(out)
}

pub fn evaluate(det: &mut Detector<f32>, cfg: &TrainConfig, data: &TrainData) -> Result<MapReport> {
    let dets = predict(det, data, &data.val, cfg.score_thresh, cfg.nms_iou)?;
    let gts: Vec<_> = data.val.iter().map(|it| (it.boxes.clone(), it.labels.clone())).collect();
    Ok(evaluate_map(&dets, &gts, data.num_classes, cfg.eval_iou))
}

/// Stateful training loop over a loaded data set.
pub struct Trainer<'d> {
    pub cfg: TrainConfig,
    pub data: &'d TrainData,
    pub detector: Detector<f32>,
    pub opt: Sgd,
    pub metrics: MetricsLog,
    pub evals: Vec<EvalRecord>,
    rng: ChaCha8Rng,
    src: Sampler,
    tgt: Sampler,
    iteration: usize,
    use_cache: bool,
    target_draws: usize,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: TrainConfig, data: &'d TrainData) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode.uses_target() && !data.has_target() {
            return Err(CoreError::InvalidArgument(format!(
                "mode {} needs the target split",
                cfg.mode.name()
            )));
        }
        let mut detector = Detector::new(cfg.model_config(data.num_classes), cfg.seed)?;
        if cfg.pen_only {
            for id in detector.store.ids().collect::<Vec<_>>() {
                let frozen = !detector.store.name(id).starts_with("pen");
                detector.store.set_frozen(id, frozen);
            }
        }
        let use_cache = can_use_cache(&detector, data);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            src: Sampler::new(data.source.len()),
            tgt: Sampler::new(data.target_len()),
            cfg,
            data,
            detector,
            metrics: MetricsLog::default(),
            evals: Vec::new(),
            rng,
            iteration: 0,
            use_cache,
            target_draws: 0,
        })
    }

    /// Copies every parameter and batch-norm buffer of `from` whose name and
    /// shape match. Returns the number of parameters copied.
    pub fn warm_start(&mut self, from: &Detector<f32>) -> usize {
        let mut copied = 0;
        for id in from.store.ids() {
            if let Some(dst) = self.detector.store.find(from.store.name(id)) {
                let src = from.store.get(id);
                if src.shape() == self.detector.store.get(dst).shape() {
                    *self.detector.store.get_mut(dst) = src.clone();
                    copied += 1;
                }
            }
        }
        let names = self.detector.store.bn_names().to_vec();
        for (i, name) in names.iter().enumerate() {
            if let Some(j) = from.store.bn_names().iter().position(|n| n == name) {
                self.detector.store.bn_states_mut()[i] = from.store.bn_states()[j].clone();
            }
        }
        copied
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Target items this run has consumed.
    pub fn target_draws(&self) -> usize {
        self.target_draws
    }

    /// Draws the next batch and runs one step on it.
    pub fn step(&mut self) -> Result<StepRecord> {
        let src_idx = self.src.next(&mut self.rng, self.cfg.batch_source);
        let src: Vec<&Item> = src_idx.iter().map(|&i| &self.data.source[i]).collect();
        let tgt = if self.cfg.mode.uses_target() {
            let idx = self.tgt.next(&mut self.rng, self.cfg.batch_target);
            self.target_draws += idx.len();
            self.data.target_items(&idx)?
        } else {
            Vec::new()
        };
        self.step_on(&Batch { src, tgt })
    }

    /// Runs one step on a caller-chosen batch.
    pub fn step_on(&mut self, batch: &Batch<'_>) -> Result<StepRecord> {
        let lr = self.cfg.lr_at(self.iteration);
        let rec = train_step(
            &mut self.detector,
            &mut self.opt,
            &self.cfg,
            self.data,
            batch,
            self.use_cache,
            self.iteration + 1,
            lr,
        )?;
        self.iteration += 1;
        self.metrics.push(rec);
        Ok(rec)
    }

    pub fn evaluate(&mut self) -> Result<MapReport> {
        let r = evaluate(&mut self.detector, &self.cfg, self.data)?;
        self.evals.push(EvalRecord {
            iter: self.iteration,
            report: r.clone(),
        });
        Ok(r)
    }

    /// Runs the remaining schedule, evaluating every `eval_interval` steps and at the end.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.iteration < self.cfg.iterations {
            self.step()?;
            let it = self.iteration;
            if self.cfg.eval_interval > 0 && it % self.cfg.eval_interval == 0 && it != self.cfg.iterations {
                self.evaluate()?;
            }
        }
        self.evaluate()?;
        Ok(TrainOutcome {
            rng: RngState::capture(&self.rng),
            iterations: self.iteration,
            target_draws: self.target_draws,
            detector: self.detector,
            metrics: self.metrics,
            evals: self.evals,
            config: self.cfg,
        })
    }
}

pub struct TrainOutcome {
    pub config: TrainConfig,
    pub detector: Detector<f32>,
    pub metrics: MetricsLog,
    pub evals: Vec<EvalRecord>,
    pub rng: RngState,
    pub iterations: usize,
    pub target_draws: usize,
}

impl TrainOutcome {
    pub fn final_report(&self) -> &MapReport {
        &self.evals.last().expect("run always evaluates at the end").report
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.detector.clone(),
            iteration: self.iterations as u64,
            rng: Some(self.rng.clone()),
            train_config: serde_json::to_value(&self.config).expect("config serializes"),
        }
    }

    /// Writes checkpoint, metrics CSV, evaluation CSV and the config.
    pub fn write(&self, dir: &Path, class_names: &[String]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        self.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| CoreError::io(&p, e))
        };
        put(METRICS_FILE, self.metrics.to_csv())?;
        put(EVAL_FILE, eval_csv(&self.evals, class_names))?;
        put(CONFIG_FILE, self.config.to_toml())
    }
}

/// Convenience wrapper: builds a trainer and runs it to completion.
pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    Trainer::new(cfg.clone(), data)?.run()
}

/// Trains only the prior heads on a fixed batch with everything else frozen
/// and returns the mean prior-regression loss before each step.
pub fn pen_learnability(cfg: &TrainConfig, data: &TrainData, iterations: usize) -> Result<Vec<f32>> {
    let cfg = TrainConfig {
        pen_only: true,
        iterations: iterations.max(1),
        lr_drop_at: 1.0,
        ..cfg.clone()
    };
    let mut t = Trainer::new(cfg, data)?;
    let src: Vec<&Item> = data.source.iter().take(t.cfg.batch_source).collect();
    let n = t.cfg.batch_target.min(data.target_len());
    let tgt = data.target_items(&(0..n).collect::<Vec<_>>())?;
    let batch = Batch { src, tgt };
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let r = t.step_on(&batch)?;
        out.push(r.adv);
    }
    Ok(out)
}
