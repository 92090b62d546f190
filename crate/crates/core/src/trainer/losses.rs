use wxadapt_autograd::{Graph, NodeId, Scalar, Tensor};

use crate::error::Result;
use crate::models::boxes::{encode, match_anchors, AnchorGrid, AnchorLabel};
use crate::sample::BBox;

/// Squared error between a predicted prior map and its target, averaged
/// over batch, channels and pixels.
pub fn pal_level_loss<T: Scalar>(g: &mut Graph<T>, pred: NodeId, prior: NodeId) -> Result<NodeId> {
    Ok(g.mse_map_loss(pred, prior)?)
}

/// Mean over the configured levels (a single level passes through with weight 1).
pub fn pal_domain_loss<T: Scalar>(g: &mut Graph<T>, levels: &[NodeId]) -> Result<NodeId> {
    mean_of(g, levels)
}

pub fn adv_loss<T: Scalar>(g: &mut Graph<T>, src: NodeId, tgt: NodeId) -> Result<NodeId> {
    Ok(g.lin_comb(&[(src, T::of(0.5)), (tgt, T::of(0.5))])?)
}

/// Sum over levels of the batch-averaged L1 norm of each residual. No residuals: 0.
pub fn reg_loss<T: Scalar>(g: &mut Graph<T>, residuals: &[NodeId]) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(residuals.len());
    for &r in residuals {
        terms.push((g.l1_penalty(r)?, T::one()));
    }
    Ok(g.lin_comb(&terms)?)
}

/// Per-location domain classification loss, labels 0 for source rows and 1 for target rows.
pub fn domain_loss<T: Scalar>(g: &mut Graph<T>, logits: NodeId, n_src: usize) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    let per: usize = shape[1..].iter().product();
    let targets: Vec<T> = (0..shape[0])
        .flat_map(|n| std::iter::repeat_n(if n < n_src { T::zero() } else { T::one() }, per))
        .collect();
    Ok(g.bce_with_logits(logits, &targets)?)
}

pub(crate) fn mean_of<T: Scalar>(g: &mut Graph<T>, terms: &[NodeId]) -> Result<NodeId> {
    let w = T::of(1.0 / terms.len().max(1) as f64);
    let terms: Vec<_> = terms.iter().map(|&t| (t, w)).collect();
    Ok(g.lin_comb(&terms)?)
}

/// Flat indices into the head output and the matching regression targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetTargets {
    pub obj_index: Vec<usize>,
    pub obj_target: Vec<f32>,
    /// `num_classes` consecutive logit indices per positive anchor.
    pub cls_index: Vec<usize>,
    pub cls_label: Vec<usize>,
    pub box_index: Vec<usize>,
    pub box_target: Vec<f32>,
}

impl DetTargets {
    pub fn num_positive(&self) -> usize {
        self.cls_label.len()
    }
}

/// Matches anchors to ground truth for each image of a batch.
pub fn build_targets(grid: &AnchorGrid, num_classes: usize, gts: &[(&[BBox], &[usize])]) -> DetTargets {
    let per = 5 + num_classes;
    let anchors = grid.anchors();
    let mut t = DetTargets::default();
    for (n, (boxes, labels)) in gts.iter().enumerate() {
        for (j, m) in match_anchors(&anchors, boxes).into_iter().enumerate() {
            match m {
                AnchorLabel::Negative => {
                    t.obj_index.push(grid.flat_index(n, j, 0, per));
                    t.obj_target.push(0.0);
                }
                AnchorLabel::Positive(k) => {
                    t.obj_index.push(grid.flat_index(n, j, 0, per));
                    t.obj_target.push(1.0);
                    t.cls_index.extend((0..num_classes).map(|c| grid.flat_index(n, j, 1 + c, per)));
                    t.cls_label.push(labels[k]);
                    t.box_index.extend((0..4).map(|d| grid.flat_index(n, j, 1 + num_classes + d, per)));
                    t.box_target.extend(encode(&boxes[k], &anchors[j]));
                }
                AnchorLabel::Ignore => {}
            }
        }
    }
    t
}

#[derive(Clone, Copy, Debug)]
pub struct DetLoss {
    pub total: NodeId,
    pub obj: NodeId,
    pub cls: NodeId,
    pub bbox: NodeId,
}

pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Objectness BCE over positive and negative anchors, class cross-entropy
/// and smooth-L1 box regression over positives.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    preds: NodeId,
    targets: &DetTargets,
    num_classes: usize,
) -> Result<DetLoss> {
    let obj_logits = g.gather(preds, &targets.obj_index)?;
    let obj_t: Vec<T> = targets.obj_target.iter().map(|&v| T::of(v as f64)).collect();
    let obj = g.bce_with_logits(obj_logits, &obj_t)?;
    let cls = g.gather(preds, &targets.cls_index)?;
    let cls = g.reshape(cls, &[targets.num_positive(), num_classes])?;
    let cls = g.cross_entropy(cls, &targets.cls_label)?;
    let deltas = g.gather(preds, &targets.box_index)?;
    let box_t = Tensor::new(
        vec![targets.box_target.len()],
        targets.box_target.iter().map(|&v| T::of(v as f64)).collect(),
    )?;
    let box_t = g.constant(box_t);
    let bbox = g.smooth_l1(deltas, box_t, T::of(SMOOTH_L1_BETA))?;
    let total = g.lin_comb(&[(obj, T::one()), (cls, T::one()), (bbox, T::one())])?;
    Ok(DetLoss { total, obj, cls, bbox })
}
