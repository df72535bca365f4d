//! Point-label inference, segmentation metrics, the projection baseline and
//! the ablation harness.

mod ablation;

pub use ablation::{run_ablation, optimisation_variants, AblationRow, AblationTable, Variant};

use serde::{Serialize, Serializer};

use crate::alignment::{
    compute_logits, ClassId, ClassVocabulary, PointExtractor, ProjectionHead, Split, TextEmbeddings,
};
use crate::engine::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::{project_points, transfer_labels};
use crate::scenegen::SyntheticScene;
use crate::trainer::{argmax_rows, Model};

const INFER_CHUNK: usize = 4096;

/// GT-class × predicted-class counts. Predictions of the ignore sentinel
/// land in a separate per-class "unassigned" column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    unassigned: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            unassigned: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Adds one point. GT equal to the ignore sentinel (== class count) is skipped.
    pub fn add(&mut self, gt: ClassId, pred: ClassId) -> Result<()> {
        if gt == self.classes {
            return Ok(());
        }
        if gt > self.classes || pred > self.classes {
            return Err(Error::data(format!(
                "class id outside vocabulary of {} classes (gt {gt}, pred {pred})",
                self.classes
            )));
        }
        if pred == self.classes {
            self.unassigned[gt] += 1;
        } else {
            self.counts[gt * self.classes + pred] += 1;
        }
        Ok(())
    }

    pub fn count(&self, gt: ClassId, pred: ClassId) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn unassigned(&self, gt: ClassId) -> u64 {
        self.unassigned[gt]
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.unassigned.iter_mut().zip(&other.unassigned) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unassigned.iter().sum::<u64>()
    }

    pub fn gt_total(&self, c: ClassId) -> u64 {
        (0..self.classes).map(|p| self.count(c, p)).sum::<u64>() + self.unassigned[c]
    }

    /// TP / (TP + FP + FN), 0 when the denominator is 0.
    pub fn iou(&self, c: ClassId) -> f64 {
        let tp = self.count(c, c);
        let fn_ = self.gt_total(c) - tp;
        let fp = (0..self.classes).map(|g| self.count(g, c)).sum::<u64>() - tp;
        let den = tp + fp + fn_;
        if den == 0 {
            0.0
        } else {
            tp as f64 / den as f64
        }
    }
}

fn round6<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64((v * 1e6).round() / 1e6)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassIou {
    pub name: String,
    pub split: Split,
    #[serde(serialize_with = "round6")]
    pub iou: f64,
    /// Whether the class occurs in the ground truth at all.
    pub present: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ReportMeta {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub meta: ReportMeta,
    pub points: u64,
    pub classes: Vec<ClassIou>,
    #[serde(serialize_with = "round6")]
    pub miou_base: f64,
    #[serde(serialize_with = "round6")]
    pub miou_novel: f64,
    #[serde(serialize_with = "round6")]
    pub hiou: f64,
}

impl MetricsReport {
    pub fn with_meta(mut self, meta: ReportMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Harmonic mean of base and novel mIoU; 0 when both are 0.
pub fn harmonic_iou(base: f64, novel: f64) -> f64 {
    if base + novel == 0.0 {
        0.0
    } else {
        2.0 * base * novel / (base + novel)
    }
}

/// Per-class IoU and split means. Classes absent from the ground truth are
/// reported with IoU 0 and left out of the means.
pub fn report_from_confusion(cm: &ConfusionMatrix, vocab: &ClassVocabulary) -> MetricsReport {
    let classes: Vec<ClassIou> = (0..vocab.len())
        .map(|c| ClassIou {
            name: vocab.name(c).to_string(),
            split: vocab.split(c),
            iou: cm.iou(c),
            present: cm.gt_total(c) > 0,
        })
        .collect();
    let mean = |split: Split| {
        let vals: Vec<f64> = classes
            .iter()
            .filter(|c| c.split == split && c.present)
            .map(|c| c.iou)
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let miou_base = mean(Split::Base);
    let miou_novel = mean(Split::Novel);
    MetricsReport {
        meta: ReportMeta::default(),
        points: cm.total(),
        classes,
        miou_base,
        miou_novel,
        hiou: harmonic_iou(miou_base, miou_novel),
    }
}

pub fn confusion(pred: &[ClassId], gt: &[ClassId], vocab: &ClassVocabulary) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(vocab.len());
    for (&p, &g) in pred.iter().zip(gt) {
        cm.add(g, p)?;
    }
    Ok(cm)
}

pub fn compute_metrics(pred: &[ClassId], gt: &[ClassId], vocab: &ClassVocabulary) -> Result<MetricsReport> {
    Ok(report_from_confusion(&confusion(pred, gt, vocab)?, vocab))
}

/// Cosine-argmax class per point; ties go to the lowest class id. Uses the
/// point branch and text embeddings only.
pub fn infer_point_labels(
    store: &ParamStore,
    extractor: &PointExtractor,
    head: &ProjectionHead,
    emb: &TextEmbeddings,
    inputs: &[f64],
) -> Result<Vec<ClassId>> {
    let d = extractor.in_dim();
    let mut out = Vec::with_capacity(inputs.len() / d);
    for chunk in inputs.chunks(INFER_CHUNK * d) {
        let mut g = Graph::new();
        let feats = extractor.forward(&mut g, store, chunk)?;
        let logits = compute_logits(&mut g, store, feats, head, emb)?;
        out.extend(argmax_rows(g.value(logits), emb.classes()));
    }
    Ok(out)
}

pub fn predict_scene(model: &Model, scene: &SyntheticScene, extent: f64) -> Result<Vec<ClassId>> {
    infer_point_labels(
        &model.store,
        &model.point,
        &model.point_head,
        &model.embeddings,
        &scene.point_inputs(extent),
    )
}

/// Runs `per_scene` over the scenes on up to `workers` threads and sums the
/// confusion matrices. The result does not depend on `workers`.
fn accumulate<F>(scenes: &[SyntheticScene], vocab: &ClassVocabulary, workers: usize, per_scene: F) -> Result<ConfusionMatrix>
where
    F: Fn(&SyntheticScene) -> Result<Vec<ClassId>> + Sync,
{
    let one = |s: &SyntheticScene| confusion(&per_scene(s)?, s.gt(), vocab);
    let workers = workers.max(1).min(scenes.len().max(1));
    let mut total = ConfusionMatrix::new(vocab.len());
    if workers == 1 {
        for s in scenes {
            total.merge(&one(s)?);
        }
        return Ok(total);
    }
    let chunk = scenes.len().div_ceil(workers);
    let parts: Vec<Result<ConfusionMatrix>> = std::thread::scope(|sc| {
        let handles: Vec<_> = scenes
            .chunks(chunk)
            .map(|part| {
                let one = &one;
                sc.spawn(move || {
                    let mut cm = ConfusionMatrix::new(vocab.len());
                    for s in part {
                        cm.merge(&one(s)?);
                    }
                    Ok(cm)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

/// Metrics of the trained point branch over a scene set.
pub fn evaluate_model(
    model: &Model,
    scenes: &[SyntheticScene],
    extent: f64,
    vocab: &ClassVocabulary,
    workers: usize,
) -> Result<MetricsReport> {
    let cm = accumulate(scenes, vocab, workers, |s| predict_scene(model, s, extent))?;
    Ok(report_from_confusion(&cm, vocab))
}

/// Labels each point with its transferred pseudo-label, no learning.
/// Unpaired points keep the ignore sentinel and count against their class.
pub fn projection_labels(scene: &SyntheticScene, vocab: &ClassVocabulary) -> Result<Vec<ClassId>> {
    let pairing = project_points(&scene.cloud, &scene.calibrations);
    transfer_labels(&pairing, &scene.pseudo_labels, vocab)
}

pub fn run_projection_baseline(
    scenes: &[SyntheticScene],
    vocab: &ClassVocabulary,
    workers: usize,
) -> Result<MetricsReport> {
    let cm = accumulate(scenes, vocab, workers, |s| projection_labels(s, vocab))?;
    Ok(report_from_confusion(&cm, vocab))
}

#[cfg(test)]
mod tests;
