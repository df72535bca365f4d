use serde::Serialize;

use super::{evaluate_model, round6, MetricsReport, ReportMeta};
use crate::alignment::ClassVocabulary;
use crate::error::Result;
use crate::scenegen::SyntheticScene;
use crate::trainer::{prepare, TrainSetup};

/// One row of the optimisation ablation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Variant {
    pub name: String,
    pub two_stage: bool,
    pub novel_only_distill: bool,
    pub feature_distill: bool,
    pub vpm: bool,
}

impl Variant {
    pub fn new(name: &str, two_stage: bool, novel_only_distill: bool, feature_distill: bool, vpm: bool) -> Self {
        Self {
            name: name.to_string(),
            two_stage,
            novel_only_distill,
            feature_distill,
            vpm,
        }
    }

    /// The setup with this variant's switches. A one-stage variant spends the
    /// whole step budget in joint training.
    pub fn apply(&self, setup: &TrainSetup) -> TrainSetup {
        let mut s = setup.clone();
        if !self.two_stage {
            s.stage.stage2_steps += s.stage.stage1_steps;
            s.stage.stage1_steps = 0;
        }
        s.transfer.novel_only_distill = self.novel_only_distill;
        s.transfer.feature_distill = self.feature_distill;
        s.transfer.use_vpm = self.vpm;
        s
    }
}

/// One-stage {logits, full} and two-stage {logits, +novel-only, +feature, full}.
pub fn optimisation_variants() -> Vec<Variant> {
    vec![
        Variant::new("one-stage/logits", false, false, false, false),
        Variant::new("one-stage/full", false, true, true, true),
        Variant::new("two-stage/logits", true, false, false, false),
        Variant::new("two-stage/+novel-distill", true, true, false, false),
        Variant::new("two-stage/+feature-distill", true, true, true, false),
        Variant::new("two-stage/full", true, true, true, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    #[serde(serialize_with = "round6")]
    pub miou_base_mean: f64,
    #[serde(serialize_with = "round6")]
    pub miou_base_std: f64,
    #[serde(serialize_with = "round6")]
    pub miou_novel_mean: f64,
    #[serde(serialize_with = "round6")]
    pub miou_novel_std: f64,
    pub reports: Vec<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes") + "\n"
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every variant once per seed and evaluates on `eval`.
pub fn run_ablation(
    train: &[SyntheticScene],
    eval: &[SyntheticScene],
    setup: &TrainSetup,
    variants: &[Variant],
    seeds: &[u64],
    vocab: &ClassVocabulary,
    meta: &ReportMeta,
    workers: usize,
) -> Result<AblationTable> {
    let data = prepare(train, setup.extent, vocab)?;
    let mut rows = Vec::new();
    for v in variants {
        let s = v.apply(setup);
        let mut reports = Vec::new();
        for &seed in seeds {
            let (model, _) = s.train(&data, vocab, seed)?;
            let report = evaluate_model(&model, eval, s.extent, vocab, workers)?.with_meta(ReportMeta {
                run_id: format!("{}/{}", meta.run_id, v.name),
                seed,
                config_hash: meta.config_hash.clone(),
            });
            log::info!(
                "{} seed {seed}: base {:.4} novel {:.4}",
                v.name,
                report.miou_base,
                report.miou_novel
            );
            reports.push(report);
        }
        let base: Vec<f64> = reports.iter().map(|r| r.miou_base).collect();
        let novel: Vec<f64> = reports.iter().map(|r| r.miou_novel).collect();
        let (miou_base_mean, miou_base_std) = mean_std(&base);
        let (miou_novel_mean, miou_novel_std) = mean_std(&novel);
        rows.push(AblationRow {
            variant: v.clone(),
            miou_base_mean,
            miou_base_std,
            miou_novel_mean,
            miou_novel_std,
            reports,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
