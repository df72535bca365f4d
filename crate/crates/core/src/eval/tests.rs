use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scenegen::tests::{small_spec, vocab};
use crate::scenegen::{generate_scene, NoiseModel, SceneSpec};
use crate::trainer::{LossWeights, ModelConfig, StageConfig, TrainSetup, TransferOptions, VpmOptions};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn harmonic_iou_reproduces_published_pairs() {
    assert!(close(harmonic_iou(76.9, 66.5), 71.3, 0.05));
    assert!(close(harmonic_iou(75.9, 62.2), 68.4, 0.1));
    assert_eq!(harmonic_iou(0.0, 0.0), 0.0);
    assert_eq!(harmonic_iou(0.4, 0.0), 0.0);
}

proptest! {
    #[test]
    fn harmonic_iou_is_bounded_by_other_means(a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
        let h = harmonic_iou(a, b);
        prop_assert!(h <= (a + b) / 2.0 + 1e-12);
        prop_assert!(h <= (a * b).sqrt() + 1e-12);
        prop_assert!(close(harmonic_iou(a, a), a, 1e-15));
    }
}

#[test]
fn perfect_prediction_scores_one() {
    let v = vocab();
    let gt = vec![0, 1, 2, 3, 4, 4, 3, 0, 0];
    let r = compute_metrics(&gt, &gt, &v).unwrap();
    assert!(r.classes.iter().all(|c| c.iou == 1.0 && c.present));
    assert_eq!((r.miou_base, r.miou_novel, r.hiou), (1.0, 1.0, 1.0));
}

#[test]
fn iou_by_hand() {
    let v = vocab();
    let ig = v.ignore();
    // class 0: TP 2, FN 1 (predicted 1), FP 1 (gt 3); class 1: TP 1, FP 1; class 3: TP 1, FN 1 (unassigned)
    let gt = vec![0, 0, 0, 1, 3, 3, 3, ig, ig];
    let pred = vec![0, 0, 1, 1, 0, 3, ig, 2, ig];
    let r = compute_metrics(&pred, &gt, &v).unwrap();
    let iou: Vec<f64> = r.classes.iter().map(|c| c.iou).collect();
    assert!(close(iou[0], 2.0 / 4.0, 1e-15));
    assert!(close(iou[1], 1.0 / 2.0, 1e-15));
    assert_eq!(iou[2], 0.0);
    assert!(close(iou[3], 1.0 / 3.0, 1e-15));
    assert_eq!(iou[4], 0.0);
    // class 2 and class 4 never occur in the ground truth
    assert!(!r.classes[2].present && !r.classes[4].present);
    assert!(close(r.miou_base, 0.5, 1e-15));
    assert!(close(r.miou_novel, 1.0 / 3.0, 1e-15));
    assert_eq!(r.points, 7);
}

#[test]
fn length_mismatch_is_a_contract_error() {
    let err = compute_metrics(&[0, 1], &[0], &vocab()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn out_of_range_ids_are_rejected() {
    let v = vocab();
    assert!(compute_metrics(&[7], &[0], &v).is_err());
    assert!(compute_metrics(&[0], &[9], &v).is_err());
}

#[test]
fn metrics_ignore_point_order_and_counts_add_up() {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let n = rng.gen_range(1..300);
        let gt: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=v.len())).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=v.len())).collect();
        let cm = confusion(&pred, &gt, &v).unwrap();
        let kept = gt.iter().filter(|&&g| g != v.ignore()).count() as u64;
        assert_eq!(cm.total(), kept);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let gt2: Vec<usize> = order.iter().map(|&i| gt[i]).collect();
        let pred2: Vec<usize> = order.iter().map(|&i| pred[i]).collect();
        assert_eq!(
            compute_metrics(&pred, &gt, &v).unwrap(),
            compute_metrics(&pred2, &gt2, &v).unwrap()
        );
    }
}

/// Extractor and head whose single-point projection is exactly `target`.
fn steered(target: &[f64], input: &[f64]) -> (ParamStore, PointExtractor, ProjectionHead) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let ext = PointExtractor::new(&mut store, input.len(), 8, 6, &mut rng);
    let head = ProjectionHead::new(&mut store, "head", 6, target.len(), &mut rng);
    let mut g = Graph::new();
    let f = ext.forward(&mut g, &store, input).unwrap();
    let f = g.value(f).to_vec();
    let norm2: f64 = f.iter().map(|x| x * x).sum();
    assert!(norm2 > 0.0);
    // rank-one weight mapping f onto target
    let w = store.get_mut(head.weight).data_mut();
    for (i, fi) in f.iter().enumerate() {
        for (j, t) in target.iter().enumerate() {
            w[i * target.len() + j] = fi * t / norm2;
        }
    }
    (store, ext, head)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn colinear_feature_picks_its_class() {
    let rows = vec![
        unit(vec![1.0, 0.0, 0.0]),
        unit(vec![0.2, 1.0, 0.1]),
        unit(vec![0.0, 0.0, 1.0]),
    ];
    let emb = TextEmbeddings::from_rows(rows.clone()).unwrap();
    let target: Vec<f64> = rows[1].iter().map(|x| 3.5 * x).collect();
    let input = [0.3, -0.2, 0.9, 0.5];
    let (store, ext, head) = steered(&target, &input);
    assert_eq!(infer_point_labels(&store, &ext, &head, &emb, &input).unwrap(), vec![1]);
}

#[test]
fn exact_tie_goes_to_lowest_class() {
    let shared = unit(vec![0.6, 0.8, 0.0]);
    let rows = vec![shared.clone(), unit(vec![0.0, 0.0, 1.0]), shared.clone()];
    let emb = TextEmbeddings::from_rows(rows).unwrap();
    let input = [0.1, 0.4, -0.7, 0.2];
    let (store, ext, head) = steered(&shared, &input);
    assert_eq!(infer_point_labels(&store, &ext, &head, &emb, &input).unwrap(), vec![0]);
}

#[test]
fn batch_inference_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let v = vocab();
    let model = crate::trainer::Model::new(&ModelConfig::default(), &v, 4).unwrap();
    let inputs: Vec<f64> = (0..20 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let batch = infer_point_labels(&model.store, &model.point, &model.point_head, &model.embeddings, &inputs).unwrap();
    let (d, k) = (model.config.embed_dim, v.len());
    for (p, &label) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let f = model.point.forward(&mut g, &model.store, &inputs[p * 4..(p + 1) * 4]).unwrap();
        let f = g.value(f).to_vec();
        let w = model.store.get(model.point_head.weight).data();
        let proj: Vec<f64> = (0..d).map(|j| f.iter().enumerate().map(|(i, x)| x * w[i * d + j]).sum()).collect();
        let norm = proj.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..k {
            let cos: f64 = proj.iter().zip(model.embeddings.row(c)).map(|(a, b)| a * b).sum::<f64>() / norm;
            if cos > best.1 {
                best = (c, cos);
            }
        }
        assert_eq!(label, best.0, "point {p}");
    }
}

#[test]
fn baseline_without_noise_is_limited_only_by_coverage() {
    let v = vocab();
    let scenes: Vec<SyntheticScene> = (0..4)
        .map(|s| generate_scene(&small_spec(), &NoiseModel::none(), &v, 40 + s).unwrap())
        .collect();
    let report = run_projection_baseline(&scenes, &v, 2).unwrap();
    // exhaustive oracle: a point scores a hit iff it is paired and the first
    // camera seeing it labels it with its GT class
    let mut cm = ConfusionMatrix::new(v.len());
    for s in &scenes {
        let pairing = project_points(&s.cloud, &s.calibrations);
        let mut first: Vec<Option<ClassId>> = vec![None; s.num_points()];
        for e in &pairing.entries {
            if first[e.point].is_none() {
                let (col, row) = e.pixel();
                let l = s.pseudo_labels[e.camera].get(col, row);
                if l != v.ignore() {
                    first[e.point] = Some(l);
                }
            }
        }
        for (p, &g) in s.gt().iter().enumerate() {
            cm.add(g, first[p].unwrap_or(v.ignore())).unwrap();
        }
    }
    assert_eq!(report, report_from_confusion(&cm, &v));
    let unpaired: u64 = (0..v.len()).map(|c| cm.unassigned(c)).sum();
    assert!(unpaired > 0, "toy scenes should leave some points unseen");
}

#[test]
fn baseline_with_every_label_dropped_scores_zero() {
    let v = vocab();
    let noise = NoiseModel {
        p_drop: 1.0,
        ..NoiseModel::default()
    };
    let scenes: Vec<SyntheticScene> = (0..2)
        .map(|s| generate_scene(&small_spec(), &noise, &v, 60 + s).unwrap())
        .collect();
    let r = run_projection_baseline(&scenes, &v, 1).unwrap();
    assert_eq!((r.miou_base, r.miou_novel, r.hiou), (0.0, 0.0, 0.0));
}

#[test]
fn worker_count_does_not_change_results() {
    let v = vocab();
    let scenes: Vec<SyntheticScene> = (0..5)
        .map(|s| generate_scene(&small_spec(), &NoiseModel::default(), &v, 70 + s).unwrap())
        .collect();
    let one = run_projection_baseline(&scenes, &v, 1).unwrap();
    assert_eq!(one, run_projection_baseline(&scenes, &v, 3).unwrap());
    let model = crate::trainer::Model::new(&ModelConfig::default(), &v, 0).unwrap();
    let extent = SceneSpec::default().extent;
    assert_eq!(
        evaluate_model(&model, &scenes, extent, &v, 1).unwrap(),
        evaluate_model(&model, &scenes, extent, &v, 4).unwrap()
    );
}

#[test]
fn baseline_and_model_share_the_metrics_path() {
    let v = vocab();
    let scenes: Vec<SyntheticScene> = (0..3)
        .map(|s| generate_scene(&small_spec(), &NoiseModel::default(), &v, 80 + s).unwrap())
        .collect();
    let model = crate::trainer::Model::new(&ModelConfig::default(), &v, 1).unwrap();
    let extent = SceneSpec::default().extent;
    let (mut pred, mut base_pred, mut gt) = (Vec::new(), Vec::new(), Vec::new());
    for s in &scenes {
        pred.extend(predict_scene(&model, s, extent).unwrap());
        base_pred.extend(projection_labels(s, &v).unwrap());
        gt.extend_from_slice(s.gt());
    }
    assert_eq!(
        evaluate_model(&model, &scenes, extent, &v, 1).unwrap(),
        compute_metrics(&pred, &gt, &v).unwrap()
    );
    assert_eq!(
        run_projection_baseline(&scenes, &v, 1).unwrap(),
        compute_metrics(&base_pred, &gt, &v).unwrap()
    );
}

#[test]
fn report_json_is_rounded_and_ordered() {
    let v = vocab();
    let r = compute_metrics(&[0, 1, 3, 3], &[0, 1, 3, 4], &v)
        .unwrap()
        .with_meta(ReportMeta {
            run_id: "r".into(),
            seed: 3,
            config_hash: "abc".into(),
        });
    let json = r.to_json();
    let keys = ["\"run_id\"", "\"seed\"", "\"config_hash\"", "\"points\"", "\"classes\"", "\"miou_base\"", "\"miou_novel\"", "\"hiou\""];
    let pos: Vec<usize> = keys.iter().map(|k| json.find(k).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
    let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
    // novel: class 3 IoU 1/2, class 4 IoU 0
    assert_eq!(parsed["miou_novel"].as_f64().unwrap(), 0.25);
    assert_eq!(parsed["hiou"].as_f64().unwrap(), 0.4);
    assert_eq!(parsed["classes"][3]["iou"].as_f64().unwrap(), 0.5);
}

#[test]
fn ablation_variants_follow_the_optimisation_table() {
    let variants = optimisation_variants();
    assert_eq!(variants.len(), 6);
    assert_eq!(variants.iter().filter(|v| v.two_stage).count(), 4);
    let full = variants.last().unwrap();
    assert!(full.two_stage && full.novel_only_distill && full.feature_distill && full.vpm);
    let setup = TrainSetup {
        model: ModelConfig::default(),
        stage: StageConfig {
            stage1_steps: 7,
            stage2_steps: 7,
            ..StageConfig::default()
        },
        weights: LossWeights::default(),
        transfer: TransferOptions::default(),
        extent: 5.0,
    };
    let one = variants[0].apply(&setup);
    assert_eq!((one.stage.stage1_steps, one.stage.stage2_steps), (0, 14));
    assert!(!one.transfer.use_vpm && !one.transfer.feature_distill);
}

#[test]
fn identical_variants_give_identical_rows() {
    let v = vocab();
    let train: Vec<SyntheticScene> = (0..3)
        .map(|s| generate_scene(&small_spec(), &NoiseModel::default(), &v, 90 + s).unwrap())
        .collect();
    let eval: Vec<SyntheticScene> = (0..2)
        .map(|s| generate_scene(&small_spec(), &NoiseModel::default(), &v, 95 + s).unwrap())
        .collect();
    let setup = TrainSetup {
        model: ModelConfig::default(),
        stage: StageConfig {
            stage1_steps: 4,
            stage2_steps: 4,
            pixels_per_step: 64,
            points_per_step: 64,
            ..StageConfig::default()
        },
        weights: LossWeights::default(),
        transfer: TransferOptions {
            vpm: VpmOptions { r_max: 32 },
            ..TransferOptions::default()
        },
        extent: SceneSpec::default().extent,
    };
    let full = optimisation_variants().pop().unwrap();
    let variants = vec![full.clone(), full];
    let meta = ReportMeta {
        run_id: "t".into(),
        ..ReportMeta::default()
    };
    let table = run_ablation(&train, &eval, &setup, &variants, &[1, 2], &v, &meta, 1).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[0], table.rows[1]);
    assert_eq!(table.rows[0].reports.len(), 2);
    assert_eq!(table.rows[0].reports[1].meta.seed, 2);
}

#[test]
fn mean_and_sample_deviation() {
    assert_eq!(ablation::mean_std(&[]), (0.0, 0.0));
    assert_eq!(ablation::mean_std(&[0.5]), (0.5, 0.0));
    let (m, s) = ablation::mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!(close(s, (5.0f64 / 3.0).sqrt(), 1e-15));
}
