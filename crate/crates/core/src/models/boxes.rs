//! Anchors, box coding, matching and non-maximum suppression.

use wxadapt_autograd::sigmoid;

use crate::sample::BBox;

/// Upper bound on the log-size deltas before exponentiation.
const MAX_LOG_SCALE: f32 = 4.0;

pub const POSITIVE_IOU: f32 = 0.5;
pub const NEGATIVE_IOU: f32 = 0.3;

/// Square anchors centred on every cell of a `gh × gw` grid. Anchor `j`
/// enumerates `(a, y, x)` with `x` fastest, matching the head's channel
/// layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub gh: usize,
    pub gw: usize,
    pub stride: f32,
    pub sizes: Vec<f32>,
}

impl AnchorGrid {
    pub fn new(gh: usize, gw: usize, stride: f32, sizes: Vec<f32>) -> Self {
        AnchorGrid { gh, gw, stride, sizes }
    }

    pub fn len(&self) -> usize {
        self.sizes.len() * self.gh * self.gw
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(a, y, x)` of anchor `j`.
    pub fn locate(&self, j: usize) -> (usize, usize, usize) {
        let cells = self.gh * self.gw;
        (j / cells, (j % cells) / self.gw, j % self.gw)
    }

    pub fn anchor(&self, j: usize) -> BBox {
        let (a, y, x) = self.locate(j);
        let s = self.sizes[a];
        let cx = (x as f32 + 0.5) * self.stride;
        let cy = (y as f32 + 0.5) * self.stride;
        BBox::new(cx - s / 2.0, cy - s / 2.0, cx + s / 2.0, cy + s / 2.0)
    }

    pub fn anchors(&self) -> Vec<BBox> {
        (0..self.len()).map(|j| self.anchor(j)).collect()
    }

    /// Flat index into an `N × A·per_anchor × gh × gw` output of channel
    /// `k` of anchor `j` in image `n`.
    pub fn flat_index(&self, n: usize, j: usize, k: usize, per_anchor: usize) -> usize {
        let (a, y, x) = self.locate(j);
        let cells = self.gh * self.gw;
        let ch = self.sizes.len() * per_anchor;
        n * ch * cells + (a * per_anchor + k) * cells + y * self.gw + x
    }
}

/// Centre/size deltas `(dx, dy, dw, dh)` taking `anchor` to `gt`.
pub fn encode(gt: &BBox, anchor: &BBox) -> [f32; 4] {
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Inverse of [`encode`]: `cx = ax + dx·aw`, `w = aw·exp(dw)`.
pub fn decode(d: [f32; 4], anchor: &BBox) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + d[0] * aw;
    let cy = ay + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_SCALE).exp();
    let h = ah * d[3].min(MAX_LOG_SCALE).exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

pub fn clip(b: BBox, width: f32, height: f32) -> BBox {
    BBox::new(
        b.x_min.clamp(0.0, width),
        b.y_min.clamp(0.0, height),
        b.x_max.clamp(0.0, width),
        b.y_max.clamp(0.0, height),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// IoU ≥ 0.5 positive, < 0.3 negative, otherwise ignored; every GT also
/// claims its best anchor (lowest index on ties).
pub fn match_anchors(anchors: &[BBox], gts: &[BBox]) -> Vec<AnchorLabel> {
    let mut labels = Vec::with_capacity(anchors.len());
    for a in anchors {
        let mut best: Option<(usize, f32)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let iou = a.iou(gt);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        labels.push(match best {
            Some((g, iou)) if iou >= POSITIVE_IOU => AnchorLabel::Positive(g),
            Some((_, iou)) if iou >= NEGATIVE_IOU => AnchorLabel::Ignore,
            _ => AnchorLabel::Negative,
        });
    }
    for (g, gt) in gts.iter().enumerate() {
        let mut best: Option<(usize, f32)> = None;
        for (j, a) in anchors.iter().enumerate() {
            let iou = a.iou(gt);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou > 0.0 {
                labels[j] = AnchorLabel::Positive(g);
            }
        }
    }
    labels
}

/// Greedy suppression in descending score order, lower index first on ties.
pub fn nms(boxes: &[BBox], scores: &[f32], iou_threshold: f32) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "boxes and scores must align");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f32,
}

/// Decodes image `n` of a dense head output into per-class detections:
/// score = σ(objectness) · softmax(class)ᶜ, thresholded, then per-class NMS.
#[allow(clippy::too_many_arguments)]
pub fn decode_detections(
    out: &[f32],
    n: usize,
    grid: &AnchorGrid,
    num_classes: usize,
    image_w: f32,
    image_h: f32,
    score_thresh: f32,
    nms_iou: f32,
) -> Vec<Detection> {
    let per = 5 + num_classes;
    let at = |j: usize, k: usize| out[grid.flat_index(n, j, k, per)];
    let mut by_class: Vec<Vec<Detection>> = vec![Vec::new(); num_classes];
    for j in 0..grid.len() {
        let obj = sigmoid(at(j, 0));
        let logits: Vec<f32> = (0..num_classes).map(|c| at(j, 1 + c)).collect();
        let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f32 = exps.iter().sum();
        let d = [0, 1, 2, 3].map(|k| at(j, 1 + num_classes + k));
        let bbox = clip(decode(d, &grid.anchor(j)), image_w, image_h);
        if bbox.area() <= 0.0 {
            continue;
        }
        for c in 0..num_classes {
            let score = obj * exps[c] / z;
            if score >= score_thresh {
                by_class[c].push(Detection { bbox, class: c, score });
            }
        }
    }
    let mut dets = Vec::new();
    for list in by_class {
        let boxes: Vec<BBox> = list.iter().map(|d| d.bbox).collect();
        let scores: Vec<f32> = list.iter().map(|d| d.score).collect();
        for k in nms(&boxes, &scores, nms_iou) {
            dets.push(list[k]);
        }
    }
    dets
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_deltas_reproduce_anchor() {
        let a = BBox::new(10.0, 20.0, 42.0, 52.0);
        assert_eq!(decode([0.0; 4], &a), a);
    }

    #[test]
    fn encode_decode_round_trip() {
        let a = BBox::new(0.0, 0.0, 32.0, 32.0);
        let g = BBox::new(3.0, 5.0, 30.0, 41.0);
        let r = decode(encode(&g, &a), &a);
        for (x, y) in r.to_array().iter().zip(g.to_array()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn grid_count_and_layout() {
        let g = AnchorGrid::new(4, 4, 32.0, vec![16.0, 32.0, 64.0]);
        assert_eq!(g.len(), 48);
        assert_eq!(g.anchor(0), BBox::new(8.0, 8.0, 24.0, 24.0));
        assert_eq!(g.locate(17), (1, 0, 1));
        assert_eq!(g.flat_index(1, 17, 2, 8), 24 * 16 + 10 * 16 + 1);
    }

    #[test]
    fn nms_basics() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[b, b], &[0.9, 0.9], 0.5), vec![0]);
        let c = BBox::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(nms(&[b, c], &[0.1, 0.9], 0.5), vec![1, 0]);
    }

    #[test]
    fn every_gt_gets_an_anchor() {
        let g = AnchorGrid::new(4, 4, 32.0, vec![16.0, 32.0, 64.0]);
        let gt = [BBox::new(40.0, 40.0, 60.0, 60.0)];
        let labels = match_anchors(&g.anchors(), &gt);
        assert!(labels.contains(&AnchorLabel::Positive(0)));
        let none = match_anchors(&g.anchors(), &[]);
        assert!(none.iter().all(|l| *l == AnchorLabel::Negative));
    }
}
