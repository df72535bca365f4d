//! Cross-modal transfer: logit distillation targets, feature distillation and
//! the vision-point matching (VPM) module.

mod vpm;

pub use vpm::{vpm_forward, vpm_forward_traced, VpmParams, VpmTrace};

use crate::alignment::{ce_dice_loss, ClassId, ClassVocabulary, LossTerm, SegLoss};
use crate::engine::{Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{LabelGrid, PairEntry};

/// Per-point supervision for logit distillation: novel-class pseudo-labels on
/// unannotated points, the ignore sentinel everywhere else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistillTargets(pub Vec<ClassId>);

impl DistillTargets {
    pub fn labels(&self) -> &[ClassId] {
        &self.0
    }

    pub fn supervised(&self, ignore: ClassId) -> usize {
        self.0.iter().filter(|&&l| l != ignore).count()
    }
}

/// Keeps a pseudo-label only where the point carries no base annotation and
/// the label is a novel class.
pub fn build_distill_targets(
    pseudo_labels: &[ClassId],
    base_mask: &[bool],
    vocab: &ClassVocabulary,
) -> Result<DistillTargets> {
    if pseudo_labels.len() != base_mask.len() {
        return Err(Error::Shape {
            op: "build_distill_targets",
            lhs: vec![pseudo_labels.len()],
            rhs: vec![base_mask.len()],
        });
    }
    let ignore = vocab.ignore();
    let labels = pseudo_labels
        .iter()
        .zip(base_mask)
        .map(|(&l, &annotated)| {
            if annotated || l == ignore || !vocab.is_novel(l) {
                ignore
            } else {
                l
            }
        })
        .collect();
    Ok(DistillTargets(labels))
}

/// Logit distillation: CE + dice of point logits against the distill targets.
pub fn logit_distill_loss(
    g: &mut Graph,
    point_logits: Var,
    targets: &DistillTargets,
    ignore: ClassId,
) -> Result<SegLoss> {
    ce_dice_loss(g, point_logits, targets.labels(), ignore)
}

/// Mean over pairs of `1 − cos(image_row, point_row)`. Image rows are treated
/// as constants. A zero-norm row has cosine 0.
pub fn feature_distill_loss(g: &mut Graph, image_feats: Var, point_feats: Var) -> Result<LossTerm> {
    let di = g.dims(image_feats);
    let dp = g.dims(point_feats);
    if di != dp {
        return Err(Error::Shape {
            op: "feature_distill_loss",
            lhs: vec![di.0, di.1],
            rhs: vec![dp.0, dp.1],
        });
    }
    if di.0 == 0 {
        return Ok(LossTerm::empty(g));
    }
    let teacher = g.detach(image_feats);
    let a = g.normalize_rows(teacher);
    let b = g.normalize_rows(point_feats);
    let prod = g.mul(a, b)?;
    let cos_total = g.sum(prod);
    let mean_cos = g.scale(cos_total, 1.0 / di.0 as f64);
    let loss = g.scale(mean_cos, -1.0);
    let loss = g.add_scalar(loss, 1.0);
    Ok(LossTerm {
        var: loss,
        value: g.scalar(loss),
        empty: false,
    })
}

/// Binary match label per pairing entry: 1 iff the point's class equals the
/// class at its pixel and neither is the ignore sentinel.
pub fn vpm_match_labels(
    entries: &[PairEntry],
    point_classes: &[ClassId],
    pixel_classes: &[LabelGrid],
    ignore: ClassId,
) -> Vec<usize> {
    entries
        .iter()
        .map(|e| {
            let (col, row) = e.pixel();
            let pix = pixel_classes[e.camera].get(col, row);
            let pt = point_classes[e.point];
            usize::from(pt != ignore && pt == pix)
        })
        .collect()
}

/// Softmax over the two match logits (column 1 = matched) followed by binary
/// cross-entropy, averaged over pairs.
pub fn vpm_loss(g: &mut Graph, match_logits: Var, labels: &[usize]) -> Result<LossTerm> {
    let (r, c) = g.dims(match_logits);
    if c != 2 || labels.len() != r {
        return Err(Error::Shape {
            op: "vpm_loss",
            lhs: vec![r, c],
            rhs: vec![labels.len(), 2],
        });
    }
    if r == 0 {
        return Ok(LossTerm::empty(g));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::data("match labels must be 0 or 1"));
    }
    let logp = g.log_softmax_rows(match_logits);
    let picked = g.pick(logp, labels)?;
    let mean = g.mean(picked);
    let loss = g.scale(mean, -1.0);
    Ok(LossTerm {
        var: loss,
        value: g.scalar(loss),
        empty: false,
    })
}
