use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::de::DeserializeOwned;
use serde_json::json;
use wxadapt_autograd::gradcheck::run_suite;
use wxadapt_autograd::OpKind;
use wxadapt_core::models::Checkpoint;
use wxadapt_core::priors::{estimate_prior, EstimatorConfig, PriorKind, PriorMap};
use wxadapt_core::stats::pearson;
use wxadapt_core::trainer::{
    ablation_run, evaluate, lambda_sweep, predict_priors, sweep_csv, train as train_run, MapReport, MetricsLog, Mode,
    TrainConfig, TrainData, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE,
};
use wxadapt_core::weathersim::{synthesize_dataset, DatasetManifest, Split, SynthConfig, MANIFEST_FILE};
use wxadapt_core::ImageF;

use crate::provenance::RunRecord;
use crate::{
    resolve_seed, AblateArgs, CliError, EvalArgs, ExportArgs, GradcheckArgs, PriorArgs, Result, SynthArgs, TrainArgs,
};

pub const EVAL_LOG: &str = "evals.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const SWEEP_FILE: &str = "lambda_sweep.csv";
pub const REPORT_FILE: &str = "gradcheck.txt";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display()))),
    }
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => TrainConfig::from_toml(&read_text(p)?).map_err(|e| CliError::Usage(format!("{}: {e}", p.display()))),
    }
}

fn parse_mode(s: &str) -> Result<Mode> {
    s.parse().map_err(|e: wxadapt_core::CoreError| CliError::Usage(e.to_string()))
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Loads the splits a config needs and caches frozen stem features.
fn load_data(manifest: &DatasetManifest, cfg: &TrainConfig, with_target: bool) -> Result<TrainData> {
    let mut data = TrainData::load(manifest, cfg, with_target)?;
    if cfg.freeze_early {
        data.cache_stem(&cfg.model_config(data.num_classes))?;
    }
    Ok(data)
}

fn print_report(report: &MapReport, class_names: &[String]) {
    println!("mAP {:.4}", report.map);
    for (name, ap) in class_names.iter().zip(&report.ap) {
        match ap {
            Some(v) => println!("  AP {name:<10} {v:.4}"),
            None => println!("  AP {name:<10} n/a"),
        }
    }
}

pub fn synth(a: SynthArgs, argv: Vec<String>) -> Result<()> {
    let mut cfg: SynthConfig = read_toml(a.config.as_deref())?;
    if let Some(w) = a.weather {
        cfg.weather = w.into();
    }
    if let Some(n) = a.n {
        cfg.n_source = n;
        cfg.n_target = n;
        cfg.n_val = n;
    }
    if let Some(r) = &a.angle_range {
        cfg.angle_min = r[0];
        cfg.angle_max = r[1];
    }
    let seed = resolve_seed(a.seed, 0)?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let started = Instant::now();
    let m = synthesize_dataset(&cfg, &a.out, seed)?;
    let mut rec = RunRecord::new("synth", argv, Some(seed), to_json(&cfg));
    if let Some(p) = &a.config {
        rec = rec.input("config", p)?;
    }
    rec.save(&a.out)?;
    let total: usize = m.splits.iter().map(|s| s.count).sum();
    info!("{total} samples in {:.1}s", started.elapsed().as_secs_f64());
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

pub fn prior(a: PriorArgs, argv: Vec<String>) -> Result<()> {
    let mut est: EstimatorConfig = read_toml(a.config.as_deref())?;
    if let Some(o) = a.omega {
        est.omega = o;
    }
    if let Some(p) = a.patch {
        est.patch = p;
    }
    if a.no_refine {
        est.refine = false;
    }
    let seed = resolve_seed(a.seed, 0)?;
    if !a.input.exists() {
        return Err(CliError::io(&a.input, "no such file or directory"));
    }
    create_dir(&a.out)?;
    let dataset = a.input.is_dir() || a.input.extension().is_some_and(|e| e == "json");
    let (kind, split) = if dataset {
        let m = DatasetManifest::load(&a.input)?;
        let kind = a.kind.map(PriorKind::from).unwrap_or(m.weather.prior_kind());
        let split = Split::from(a.split);
        prior_dataset(&a, &est, &m, kind, split)?;
        (kind, Some(split))
    } else {
        let kind = a.kind.map(PriorKind::from).unwrap_or(PriorKind::Haze);
        prior_image(&a, &est, kind)?;
        (kind, None)
    };
    let cfg = json!({
        "kind": kind,
        "split": split.map(Split::name),
        "limit": a.limit,
        "compare_gt": a.compare_gt,
        "estimator": est,
    });
    let mut rec = RunRecord::new("prior", argv, Some(seed), cfg).input("input", &a.input)?;
    if let Some(g) = &a.gt {
        rec = rec.input("gt", g)?;
    }
    rec.save(&a.out)
}

fn prior_image(a: &PriorArgs, est: &EstimatorConfig, kind: PriorKind) -> Result<()> {
    if a.compare_gt && a.gt.is_none() {
        return Err(CliError::Usage("--compare-gt on a single image needs --gt <file>".into()));
    }
    let img = ImageF::load_png(&a.input)?;
    let p = estimate_prior(&img, kind, est)?;
    let stem = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("prior".into());
    p.save(&a.out.join(format!("{stem}.pri")))?;
    p.save_pgm(&a.out.join(format!("{stem}.pgm")))?;
    println!("mean {:.6}", p.mean());
    if let (true, Some(g)) = (a.compare_gt, &a.gt) {
        let gt = PriorMap::load(g)?;
        if gt.values().len() != p.values().len() {
            return Err(CliError::Usage(format!(
                "ground truth is {}x{}, image is {}x{}",
                gt.height(),
                gt.width(),
                p.height(),
                p.width()
            )));
        }
        println!("pearson_r {:.4}", pearson(gt.values(), p.values()));
    }
    Ok(())
}

fn prior_dataset(a: &PriorArgs, est: &EstimatorConfig, m: &DatasetManifest, kind: PriorKind, split: Split) -> Result<()> {
    let recs = &m.split(split)?.records;
    let recs = &recs[..a.limit.unwrap_or(recs.len()).min(recs.len())];
    let dir = a.out.join(split.name());
    create_dir(&dir)?;
    let (mut gt_all, mut est_all) = (Vec::new(), Vec::new());
    let mut mean = 0.0;
    for r in recs {
        let p = estimate_prior(&m.load_image(r)?, kind, est)?;
        p.save(&dir.join(format!("{:05}.pri", r.id)))?;
        p.save_pgm(&dir.join(format!("{:05}.pgm", r.id)))?;
        mean += p.mean();
        if a.compare_gt {
            let gt = PriorMap::load(&m.path(&r.gt_prior))?;
            gt_all.extend_from_slice(gt.values());
            est_all.extend_from_slice(p.values());
        }
    }
    println!("samples {}", recs.len());
    println!("mean {:.6}", mean / recs.len().max(1) as f64);
    if a.compare_gt {
        println!("pearson_r {:.4}", pearson(&gt_all, &est_all));
    }
    Ok(())
}

pub fn train(a: TrainArgs, argv: Vec<String>) -> Result<()> {
    let mut cfg = train_config(a.config.as_deref())?;
    if let Some(m) = &a.mode {
        cfg.mode = parse_mode(m)?;
    }
    if let Some(l) = a.lambda {
        cfg.lambda_reg = l;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let m = DatasetManifest::load(&a.data)?;
    let mut rec = RunRecord::new("train", argv, Some(cfg.seed), to_json(&cfg)).input("data", &a.data)?;
    if let Some(p) = &a.config {
        rec = rec.input("config", p)?;
    }
    let data = load_data(&m, &cfg, cfg.mode.uses_target())?;
    info!("training {} for {} iterations", cfg.mode.label(), cfg.iterations);
    let started = Instant::now();
    let o = train_run(&cfg, &data)?;
    info!("done in {:.1}s", started.elapsed().as_secs_f64());
    o.write(&a.out, &data.class_names)?;
    rec.save(&a.out)?;
    print_report(o.final_report(), &data.class_names);
    Ok(())
}

/// Config and checkpoint of a `train` output directory.
fn load_run(run: &Path) -> Result<(TrainConfig, Checkpoint)> {
    if !run.is_dir() {
        return Err(CliError::io(run, "run directory not found"));
    }
    let cfg_path = run.join(CONFIG_FILE);
    let cfg = TrainConfig::from_toml(&read_text(&cfg_path)?).map_err(|e| CliError::io(&cfg_path, e))?;
    let ck = Checkpoint::load(&run.join(CHECKPOINT_FILE))?;
    Ok((cfg, ck))
}

fn run_data_path(run: &Path, flag: Option<&PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.clone());
    }
    RunRecord::load(run)?
        .input_path("data")
        .ok_or_else(|| CliError::Usage(format!("{} records no dataset; pass --data", run.display())))
}

pub fn eval(a: EvalArgs, argv: Vec<String>) -> Result<()> {
    let (cfg, ck) = load_run(&a.run)?;
    let data_path = run_data_path(&a.run, a.data.as_ref())?;
    let out = a.out.clone().unwrap_or_else(|| a.run.join("eval"));
    let csv = a.csv.clone().unwrap_or_else(|| out.join(EVAL_LOG));
    let m = DatasetManifest::load(&data_path)?;
    let data = load_data(&m, &cfg, false)?;
    let mut det = ck.model;
    let report = evaluate(&mut det, &cfg, &data)?;
    print_report(&report, &data.class_names);

    if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let fresh = !csv.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv)
        .map_err(|e| CliError::io(&csv, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str("run,mode,seed,iteration,map");
        for name in &data.class_names {
            text.push_str(&format!(",ap_{name}"));
        }
        text.push('\n');
    }
    text.push_str(&format!(
        "{},{},{},{},{:.6}",
        a.run.display(),
        cfg.mode.name(),
        cfg.seed,
        ck.iteration,
        report.map
    ));
    for ap in &report.ap {
        text.push(',');
        if let Some(v) = ap {
            text.push_str(&format!("{v:.6}"));
        }
    }
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(&csv, e))?;

    RunRecord::new("eval", argv, Some(cfg.seed), to_json(&cfg))
        .input_files("run", &a.run, &[CONFIG_FILE, CHECKPOINT_FILE])?
        .input("data", &data_path)?
        .save(&out)
}

pub fn ablate(a: AblateArgs, argv: Vec<String>) -> Result<()> {
    let mut base = train_config(a.config.as_deref())?;
    if let Some(n) = a.iterations {
        base.iterations = n;
    }
    base.seed = resolve_seed(a.seed, base.seed)?;
    base.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let modes = match &a.modes {
        Some(list) => list.iter().map(|s| parse_mode(s)).collect::<Result<Vec<_>>>()?,
        None => Mode::LADDER.to_vec(),
    };
    let m = DatasetManifest::load(&a.data)?;
    let mut rec = RunRecord::new("ablate", argv, Some(base.seed), to_json(&base)).input("data", &a.data)?;
    if let Some(p) = &a.config {
        rec = rec.input("config", p)?;
    }
    create_dir(&a.out)?;

    if let Some(lambdas) = &a.lambdas {
        if lambdas.is_empty() || lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(CliError::Usage("lambda values must be >= 0".into()));
        }
        let data = load_data(&m, &base, base.mode.uses_target())?;
        let rows = lambda_sweep(&base, &data, lambdas)?;
        let csv = sweep_csv(&rows);
        write_file(&a.out.join(SWEEP_FILE), &csv)?;
        rec.config["lambdas"] = json!(lambdas);
        rec.save(&a.out)?;
        print!("{csv}");
        return Ok(());
    }

    let seeds: Vec<u64> = (0..a.seeds as u64).map(|k| base.seed + k).collect();
    let with_target = modes.iter().any(|m| m.uses_target());
    let data = load_data(&m, &base, with_target)?;
    let mut hook = |mode: Mode, seed: u64, o: &wxadapt_core::trainer::TrainOutcome| {
        info!("{} seed {seed}: mAP {:.4}", mode.label(), o.final_report().map);
        Ok(())
    };
    let table = ablation_run(&base, &data, &modes, &seeds, a.jobs, Some(&a.out), &mut hook)?;
    rec.config["modes"] = json!(modes);
    rec.config["seeds"] = json!(seeds);
    rec.config["jobs"] = json!(a.jobs);
    rec.save(&a.out)?;
    print!("{}", table.to_markdown());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs, argv: Vec<String>) -> Result<()> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let fault = match &a.inject_fault {
        None => None,
        Some(name) => Some(
            OpKind::DIFFERENTIABLE
                .into_iter()
                .find(|k| k.name() == name)
                .ok_or_else(|| CliError::Usage(format!("unknown op '{name}'")))?,
        ),
    };
    let started = Instant::now();
    let report = run_suite(a.seeds, fault);
    let mut text = String::new();
    for op in &report.ops {
        let status = if op.passed() { "ok" } else { "FAIL" };
        text.push_str(&format!(
            "{:<22} tol {:.0e}  max rel {:.3e}  {status}",
            op.name, op.tol, op.worst.max_rel_error
        ));
        if let Some(e) = &op.error {
            text.push_str(&format!("  ({e})"));
        }
        text.push('\n');
    }
    text.push_str(&format!(
        "{} ops x {} seeds in {:.1}s\n",
        report.ops.len(),
        a.seeds,
        started.elapsed().as_secs_f64()
    ));
    print!("{text}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_file(&out.join(REPORT_FILE), &text)?;
        let cfg = json!({ "seeds": a.seeds, "inject_fault": a.inject_fault });
        RunRecord::new("gradcheck", argv, None, cfg).save(out)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|o| o.name).collect();
        Err(CliError::Check(format!("gradient check failed for {}", names.join(", "))))
    }
}

pub fn export(a: ExportArgs, argv: Vec<String>) -> Result<()> {
    let (cfg, ck) = load_run(&a.run)?;
    let metrics_path = a.run.join(METRICS_FILE);
    let metrics = MetricsLog::from_csv(&read_text(&metrics_path)?).map_err(|e| CliError::io(&metrics_path, e))?;
    let data_path = run_data_path(&a.run, a.data.as_ref())?;
    let m = DatasetManifest::load(&data_path)?;
    let kind = m.weather.prior_kind();

    create_dir(&a.out)?;
    write_file(&a.out.join(LOSS_FILE), metrics.to_csv())?;

    let heat = a.out.join("heatmaps");
    create_dir(&heat)?;
    let data = TrainData::load(&m, &cfg, false)?;
    let n = a.samples.min(data.val.len());
    let recs = &m.split(Split::ValTarget)?.records[..n];
    for r in recs {
        PriorMap::load(&m.path(&r.gt_prior))?.save_pgm(&heat.join(format!("{:05}_gt.pgm", r.id)))?;
        PriorMap::load(&m.path(&r.est_prior))?.save_pgm(&heat.join(format!("{:05}_est.pgm", r.id)))?;
    }
    let mut det = ck.model;
    let items = data.val[..n].to_vec();
    for level in cfg.mode.pen_levels() {
        let preds = predict_priors(&mut det, &data, &items, level, kind)?;
        for (r, p) in recs.iter().zip(&preds) {
            p.save_pgm(&heat.join(format!("{:05}_pen_l{level}.pgm", r.id)))?;
        }
    }
    println!("{} loss rows, {n} heatmap sets in {}", metrics.len(), a.out.display());

    let extra = json!({ "samples": a.samples, "train": to_json(&cfg) });
    RunRecord::new("export", argv, Some(cfg.seed), extra)
        .input_files("run", &a.run, &[CONFIG_FILE, CHECKPOINT_FILE, METRICS_FILE])?
        .input("data", &data_path)?
        .save(&a.out)
}
