use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::stats::median;

use super::config::{Mode, TrainConfig};
use super::data::TrainData;
use super::metrics::MapReport;
use super::train::{train, TrainOutcome};

/// Results of one configuration across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub maps: Vec<f64>,
    /// Median over seeds; `None` where a class has no ground truth.
    pub ap: Vec<Option<f64>>,
    pub map: f64,
    pub target_draws: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub class_names: Vec<String>,
    pub rows: Vec<AblationRow>,
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".into(), |v| format!("{:.1}", 100.0 * v))
}

impl AblationTable {
    pub fn row(&self, mode: Mode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode");
        for c in &self.class_names {
            let _ = write!(s, ",ap_{c}");
        }
        s.push_str(",map,map_per_seed,target_draws\n");
        for r in &self.rows {
            let _ = write!(s, "{}", r.mode.label());
            for ap in &r.ap {
                let _ = write!(s, ",{}", ap.map_or_else(|| "absent".into(), |v| v.to_string()));
            }
            let per: Vec<String> = r.maps.iter().map(|m| m.to_string()).collect();
            let _ = writeln!(s, ",{},{},{}", r.map, per.join(";"), r.target_draws);
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method |");
        for c in &self.class_names {
            let _ = write!(s, " {c} |");
        }
        s.push_str(" mAP |\n|---|");
        s.push_str(&"---:|".repeat(self.class_names.len() + 1));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} |", r.mode.label());
            for &ap in &r.ap {
                let _ = write!(s, " {} |", fmt_ap(ap));
            }
            let _ = writeln!(s, " {:.1} |", 100.0 * r.map);
        }
        s
    }
}

fn median_report(reports: &[&MapReport], classes: usize) -> (Vec<Option<f64>>, f64) {
    let ap = (0..classes)
        .map(|c| {
            let mut v: Vec<f64> = reports.iter().filter_map(|r| r.ap[c]).collect();
            (!v.is_empty()).then(|| median(&mut v))
        })
        .collect();
    let mut maps: Vec<f64> = reports.iter().map(|r| r.map).collect();
    (ap, median(&mut maps))
}

/// Called after every finished run with its mode, seed and outcome.
pub type RunHook<'a> = dyn FnMut(Mode, u64, &TrainOutcome) -> Result<()> + 'a;

/// Trains every mode for every seed on shared data and tabulates median
/// validation mAP. Runs are spread over `jobs` threads; results and hook
/// calls keep the (mode, seed) order. Each run writes to
/// `out/<mode>/seed<k>` when `out` is given.
pub fn ablation_run(
    base: &TrainConfig,
    data: &TrainData,
    modes: &[Mode],
    seeds: &[u64],
    jobs: usize,
    out: Option<&Path>,
    hook: &mut RunHook<'_>,
) -> Result<AblationTable> {
    if seeds.is_empty() || modes.is_empty() {
        return Err(CoreError::InvalidArgument("ablation needs at least one mode and one seed".into()));
    }
    let tasks: Vec<(Mode, u64)> = modes.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let run = |(mode, seed): (Mode, u64)| -> Result<(TrainOutcome, f64)> {
        let started = Instant::now();
        let cfg = TrainConfig { mode, seed, ..base.clone() };
        let o = train(&cfg, data)?;
        if let Some(dir) = out {
            o.write(&dir.join(mode.name()).join(format!("seed{seed}")), &data.class_names)?;
        }
        Ok((o, started.elapsed().as_secs_f64()))
    };
    let jobs = jobs.clamp(1, tasks.len());
    let results: Vec<Result<(TrainOutcome, f64)>> = if jobs == 1 {
        tasks.iter().map(|&t| run(t)).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<(TrainOutcome, f64)>>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= tasks.len() {
                        break;
                    }
                    let r = run(tasks[i]);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot lock").expect("every task ran"))
            .collect()
    };
    let mut results = results.into_iter();
    let mut rows = Vec::new();
    for &mode in modes {
        let mut reports = Vec::new();
        let (mut draws, mut seconds) = (0, 0.0);
        for &seed in seeds {
            let (o, secs) = results.next().expect("one result per task")?;
            draws += o.target_draws;
            seconds += secs;
            hook(mode, seed, &o)?;
            reports.push(o.final_report().clone());
        }
        let refs: Vec<&MapReport> = reports.iter().collect();
        let (ap, map) = median_report(&refs, data.num_classes);
        rows.push(AblationRow {
            mode,
            seeds: seeds.to_vec(),
            maps: reports.iter().map(|r| r.map).collect(),
            ap,
            map,
            target_draws: draws,
            seconds,
        });
    }
    let table = AblationTable {
        class_names: data.class_names.clone(),
        rows,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        for (name, text) in [("ablation.csv", table.to_csv()), ("ablation.md", table.to_markdown())] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| CoreError::io(&p, e))?;
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f32,
    /// Component that diverged, if any.
    pub diverged: Option<String>,
    pub iterations: usize,
    pub total: f32,
    pub det: f32,
    pub adv: f32,
    pub reg: f32,
    pub map: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("lambda,diverged,iterations,total,det,adv,reg,map\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.lambda,
            r.diverged.as_deref().unwrap_or(""),
            r.iterations,
            r.total,
            r.det,
            r.adv,
            r.reg,
            r.map
        );
    }
    s
}

/// Trains one run per regularization weight. A diverged run is reported,
/// not propagated.
pub fn lambda_sweep(base: &TrainConfig, data: &TrainData, lambdas: &[f32]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &lambda in lambdas {
        let cfg = TrainConfig {
            lambda_reg: lambda,
            ..base.clone()
        };
        rows.push(match train(&cfg, data) {
            Ok(o) => {
                let last = o.metrics.last().copied().unwrap_or_default();
                SweepRow {
                    lambda,
                    diverged: None,
                    iterations: o.iterations,
                    total: last.total,
                    det: last.det,
                    adv: last.adv,
                    reg: last.reg,
                    map: o.final_report().map,
                }
            }
            Err(CoreError::Diverged { iteration, component, .. }) => SweepRow {
                lambda,
                diverged: Some(component),
                iterations: iteration,
                total: f32::NAN,
                det: f32::NAN,
                adv: f32::NAN,
                reg: f32::NAN,
                map: 0.0,
            },
            Err(e) => return Err(e),
        });
    }
    Ok(rows)
}
