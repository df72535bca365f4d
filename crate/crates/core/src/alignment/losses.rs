use super::vocab::{ClassId, ClassVocabulary};
use crate::engine::{Graph, Var};
use crate::error::{Error, Result};

/// Additive smoothing in the dice numerator and denominator.
pub const DICE_SMOOTH: f64 = 1.0;

/// A scalar loss node together with its logged parts.
///
/// `empty` marks a loss with nothing to supervise; its node is a constant
/// zero that contributes no gradient.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub var: Var,
    pub value: f64,
    pub empty: bool,
}

impl LossTerm {
    pub fn empty(g: &mut Graph) -> Self {
        let var = g.constant(1, 1, vec![0.0]).expect("1x1");
        Self {
            var,
            value: 0.0,
            empty: true,
        }
    }
}

/// Cross-entropy plus soft dice on one set of class logits.
#[derive(Clone, Copy, Debug)]
pub struct SegLoss {
    pub term: LossTerm,
    pub cross_entropy: f64,
    pub dice: f64,
}

/// Mean softmax cross-entropy over non-ignored rows plus soft dice
/// (1 − mean per-class dice over classes present in the targets).
pub fn ce_dice_loss(g: &mut Graph, logits: Var, labels: &[ClassId], ignore: ClassId) -> Result<SegLoss> {
    let (rows, classes) = g.dims(logits);
    if labels.len() != rows {
        return Err(Error::Shape {
            op: "ce_dice_loss",
            lhs: vec![rows, classes],
            rhs: vec![labels.len()],
        });
    }
    let mut kept = Vec::new();
    let mut targets = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == ignore {
            continue;
        }
        if l >= classes {
            return Err(Error::data(format!("label {l} outside {classes} classes")));
        }
        kept.push(i);
        targets.push(l);
    }
    if kept.is_empty() {
        return Ok(SegLoss {
            term: LossTerm::empty(g),
            cross_entropy: 0.0,
            dice: 0.0,
        });
    }
    let m = kept.len();
    let sub = if m == rows {
        logits
    } else {
        g.gather_rows(logits, &kept)?
    };

    let logp = g.log_softmax_rows(sub);
    let picked = g.pick(logp, &targets)?;
    let ce = g.mean(picked);
    let ce = g.scale(ce, -1.0);

    let probs = g.softmax_rows(sub);
    let mut onehot = vec![0.0; m * classes];
    let mut counts = vec![0.0; classes];
    for (i, &t) in targets.iter().enumerate() {
        onehot[i * classes + t] = 1.0;
        counts[t] += 1.0;
    }
    let present = counts.iter().filter(|c| **c > 0.0).count() as f64;
    let weights: Vec<f64> = counts
        .iter()
        .map(|&c| if c > 0.0 { 1.0 / present } else { 0.0 })
        .collect();
    let onehot = g.constant(m, classes, onehot)?;
    let inter = g.mul(probs, onehot)?;
    let inter = g.sum_rows(inter);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, DICE_SMOOTH);
    let psum = g.sum_rows(probs);
    let counts = g.constant(1, classes, counts)?;
    let den = g.add(psum, counts)?;
    let den = g.add_scalar(den, DICE_SMOOTH);
    let dice = g.div(num, den)?;
    let weights = g.constant(1, classes, weights)?;
    let dice = g.mul(dice, weights)?;
    let dice = g.sum(dice);
    let dice_loss = g.scale(dice, -1.0);
    let dice_loss = g.add_scalar(dice_loss, 1.0);

    let total = g.add(ce, dice_loss)?;
    Ok(SegLoss {
        term: LossTerm {
            var: total,
            value: g.scalar(total),
            empty: false,
        },
        cross_entropy: g.scalar(ce),
        dice: g.scalar(dice_loss),
    })
}

/// Image-text alignment loss against per-pixel pseudo-labels.
pub fn image_branch_loss(
    g: &mut Graph,
    logits: Var,
    pseudo_labels: &[ClassId],
    vocab: &ClassVocabulary,
) -> Result<SegLoss> {
    ce_dice_loss(g, logits, pseudo_labels, vocab.ignore())
}

/// Point-text alignment loss against ground truth. With `base_only`, labels
/// of novel classes are ignored.
pub fn point_branch_loss(
    g: &mut Graph,
    logits: Var,
    gt_labels: &[ClassId],
    base_only: bool,
    vocab: &ClassVocabulary,
) -> Result<SegLoss> {
    let ignore = vocab.ignore();
    if base_only {
        let masked: Vec<ClassId> = gt_labels
            .iter()
            .map(|&l| if l != ignore && vocab.is_novel(l) { ignore } else { l })
            .collect();
        ce_dice_loss(g, logits, &masked, ignore)
    } else {
        ce_dice_loss(g, logits, gt_labels, ignore)
    }
}
