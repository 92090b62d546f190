use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::models::Detection;
use crate::sample::BBox;

pub const STEP_COLUMNS: [&str; 13] = [
    "iter", "lr", "total", "det", "det_obj", "det_cls", "det_box", "adv", "pal_src", "pal_tgt", "disc", "reg",
    "grad_norm",
];

/// Loss components of one optimizer step. `total = det + adv + disc + lambda * reg`
/// and `det = det_obj + det_cls + det_box`, both evaluated in `f32` left to right.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub lr: f32,
    pub total: f32,
    pub det: f32,
    pub det_obj: f32,
    pub det_cls: f32,
    pub det_box: f32,
    pub adv: f32,
    pub pal_src: f32,
    pub pal_tgt: f32,
    pub disc: f32,
    pub reg: f32,
    pub grad_norm: f32,
}

impl StepRecord {
    fn fields(&self) -> [String; 13] {
        [
            self.iter.to_string(),
            self.lr.to_string(),
            self.total.to_string(),
            self.det.to_string(),
            self.det_obj.to_string(),
            self.det_cls.to_string(),
            self.det_box.to_string(),
            self.adv.to_string(),
            self.pal_src.to_string(),
            self.pal_tgt.to_string(),
            self.disc.to_string(),
            self.reg.to_string(),
            self.grad_norm.to_string(),
        ]
    }

    /// Recomputes the total from the logged components.
    pub fn recomputed_total(&self, lambda: f32) -> f32 {
        0.0 + self.det + self.adv + self.disc + lambda * self.reg
    }
}

/// Append-only per-iteration log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<StepRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, r: StepRecord) {
        self.rows.push(r);
    }

    pub fn rows(&self) -> &[StepRecord] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = STEP_COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.fields().join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> crate::Result<Self> {
        let bad = |m: String| crate::CoreError::Format(m);
        let mut lines = text.lines();
        if lines.next() != Some(STEP_COLUMNS.join(",").as_str()) {
            return Err(bad("metrics header mismatch".into()));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != STEP_COLUMNS.len() {
                return Err(bad(format!("bad metrics row '{line}'")));
            }
            let p = |i: usize| f[i].parse::<f32>().map_err(|e| bad(format!("{}: {e}", STEP_COLUMNS[i])));
            rows.push(StepRecord {
                iter: f[0].parse().map_err(|e| bad(format!("iter: {e}")))?,
                lr: p(1)?,
                total: p(2)?,
                det: p(3)?,
                det_obj: p(4)?,
                det_cls: p(5)?,
                det_box: p(6)?,
                adv: p(7)?,
                pal_src: p(8)?,
                pal_tgt: p(9)?,
                disc: p(10)?,
                reg: p(11)?,
                grad_norm: p(12)?,
            });
        }
        Ok(MetricsLog { rows })
    }
}

/// Per-class average precision at one IoU threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    /// `None` for classes without ground truth.
    pub ap: Vec<Option<f64>>,
    pub map: f64,
    pub absent: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub report: MapReport,
}

pub fn eval_csv(records: &[EvalRecord], class_names: &[String]) -> String {
    let mut s = String::from("iter");
    for c in class_names {
        let _ = write!(s, ",ap_{c}");
    }
    s.push_str(",map\n");
    for r in records {
        let _ = write!(s, "{}", r.iter);
        for ap in &r.report.ap {
            match ap {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s.push_str(",absent"),
            }
        }
        let _ = writeln!(s, ",{}", r.report.map);
    }
    s
}

/// All-points interpolated AP per class. Detections are ranked by score
/// (ties by image then list order); each is a true positive when its best
/// same-class ground truth overlaps by at least `iou` and is still unclaimed.
pub fn evaluate_map(dets: &[Vec<Detection>], gts: &[(Vec<BBox>, Vec<usize>)], num_classes: usize, iou: f32) -> MapReport {
    let mut ap = Vec::with_capacity(num_classes);
    let mut absent = Vec::new();
    for c in 0..num_classes {
        let npos: usize = gts.iter().map(|(_, l)| l.iter().filter(|&&k| k == c).count()).sum();
        if npos == 0 {
            ap.push(None);
            absent.push(c);
            continue;
        }
        let mut cand: Vec<(f32, usize, BBox)> = dets
            .iter()
            .enumerate()
            .flat_map(|(i, d)| d.iter().filter(|d| d.class == c).map(move |d| (d.score, i, d.bbox)))
            .collect();
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|(b, _)| vec![false; b.len()]).collect();
        let mut hits = Vec::with_capacity(cand.len());
        for (_, img, bbox) in &cand {
            let (boxes, labels) = &gts[*img];
            let mut best: Option<(usize, f32)> = None;
            for (k, gt) in boxes.iter().enumerate() {
                if labels[k] != c {
                    continue;
                }
                let o = bbox.iou(gt);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((k, o));
                }
            }
            let tp = match best {
                Some((k, o)) if o >= iou && !taken[*img][k] => {
                    taken[*img][k] = true;
                    true
                }
                _ => false,
            };
            hits.push(tp);
        }
        ap.push(Some(average_precision(&hits, npos)));
    }
    let present: Vec<f64> = ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().fold(0.0, |a, b| a + b) / present.len() as f64
    };
    MapReport { ap, map, absent }
}

/// Area under the precision envelope for a ranked hit list.
pub fn average_precision(hits: &[bool], npos: usize) -> f64 {
    let mut prec = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        prec.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let sum: f64 = hits.iter().zip(&prec).filter(|(h, _)| **h).fold(0.0, |acc, (_, p)| acc + p);
    sum / npos as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f32, y: f32, s: f32) -> BBox {
        BBox::new(x, y, x + s, y + s)
    }

    #[test]
    fn perfect_and_empty_detections() {
        let gts = vec![(vec![b(0.0, 0.0, 10.0), b(20.0, 20.0, 10.0)], vec![0, 1])];
        let perfect = vec![gts[0]
            .0
            .iter()
            .zip(&gts[0].1)
            .map(|(&bbox, &class)| Detection { bbox, class, score: 1.0 })
            .collect()];
        let r = evaluate_map(&perfect, &gts, 3, 0.5);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.absent, vec![2]);
        assert_eq!(r.ap[2], None);
        let r = evaluate_map(&[vec![]], &gts, 3, 0.5);
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn one_tp_one_fp_one_miss() {
        let gts = vec![(vec![b(0.0, 0.0, 10.0), b(40.0, 40.0, 10.0)], vec![0, 0])];
        let dets = vec![vec![
            Detection { bbox: b(0.0, 0.0, 10.0), class: 0, score: 0.9 },
            Detection { bbox: b(80.0, 80.0, 10.0), class: 0, score: 0.8 },
        ]];
        let r = evaluate_map(&dets, &gts, 1, 0.5);
        // recall reaches 1/2 at precision 1, then nothing more
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn duplicate_detection_counts_as_false_positive() {
        assert_eq!(average_precision(&[true, false, true], 2), (1.0 + 2.0 / 3.0) / 2.0);
        assert_eq!(average_precision(&[false, true], 1), 0.5);
        assert_eq!(average_precision(&[], 3), 0.0);
    }

    #[test]
    fn csv_round_trip() {
        let mut log = MetricsLog::default();
        log.push(StepRecord {
            iter: 1,
            lr: 1e-3,
            total: 0.1 + 0.2,
            det: 0.3,
            reg: 1.0 / 3.0,
            ..Default::default()
        });
        let text = log.to_csv();
        assert!(text.starts_with("iter,lr,total,"));
        assert_eq!(MetricsLog::from_csv(&text).unwrap(), log);
    }
}
