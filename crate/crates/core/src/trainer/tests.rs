use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::eval::evaluate_model;
use crate::scenegen::tests::{small_spec, vocab};
use crate::scenegen::{generate_scene, NoiseModel, SceneSpec};

fn scenes(n: usize, first_seed: u64) -> Vec<SyntheticScene> {
    (0..n as u64)
        .map(|i| generate_scene(&small_spec(), &NoiseModel::default(), &vocab(), first_seed + i).unwrap())
        .collect()
}

fn quick_stage(stage1: usize, stage2: usize, seed: u64) -> StageConfig {
    StageConfig {
        stage1_steps: stage1,
        stage2_steps: stage2,
        pixels_per_step: 128,
        points_per_step: 128,
        seed,
        ..StageConfig::default()
    }
}

fn quick_transfer() -> TransferOptions {
    TransferOptions {
        vpm: VpmOptions { r_max: 64 },
        ..TransferOptions::default()
    }
}

fn extent() -> f64 {
    SceneSpec::default().extent
}

fn terms(g: &mut Graph, values: [f64; 5]) -> LossComponents {
    // the stored value is what total_loss inspects; the node only needs a shape
    let t = values.map(|v| LossTerm {
        var: g.constant(1, 1, vec![if v.is_nan() { 0.0 } else { v }]).unwrap(),
        value: v,
        empty: false,
    });
    LossComponents {
        image: t[0],
        point: t[1],
        distill_logit: t[2],
        distill_feature: t[3],
        vpm: t[4],
    }
}

fn weighted(values: [f64; 5], w: &LossWeights) -> f64 {
    let mut g = Graph::new();
    let c = terms(&mut g, values);
    let total = total_loss(&mut g, &c, w, 0).unwrap();
    g.scalar(total)
}

#[test]
fn image_weight_alone_returns_image_loss() {
    let w = LossWeights {
        beta: 1.0,
        delta: 0.0,
        gamma: 0.0,
    };
    let values = [0.731, 2.5, 1.25, 0.4, 0.69];
    assert_eq!(weighted(values, &w), 0.731);
    assert_eq!(total_loss_value(values, &w), 0.731);
}

#[test]
fn unit_weights_count_distillation_once() {
    let w = LossWeights {
        beta: 1.0,
        delta: 1.0,
        gamma: 1.0,
    };
    // image, point, distillation (logit + feature) and matching each equal 1
    assert_eq!(weighted([1.0, 1.0, 0.5, 0.5, 1.0], &w), 4.0);
    assert_eq!(weighted([1.0; 5], &w), 5.0);
}

#[test]
fn total_loss_matches_scalar_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let values: [f64; 5] = std::array::from_fn(|_| rng.gen_range(0.0..5.0));
        let w = LossWeights {
            beta: rng.gen_range(0.0..3.0),
            delta: rng.gen_range(0.0..3.0),
            gamma: rng.gen_range(0.0..3.0),
        };
        let [i, p, dl, df, v] = values;
        let oracle = w.beta * i + w.delta * p + w.gamma * (dl + df) + w.gamma * v;
        assert!((weighted(values, &w) - oracle).abs() <= 1e-12 * oracle.max(1.0));
        assert!((total_loss_value(values, &w) - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }
}

#[test]
fn doubling_gamma_doubles_transfer_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let values: [f64; 5] = std::array::from_fn(|_| rng.gen_range(0.0..5.0));
        let gamma = rng.gen_range(0.0..2.0);
        let w = |g| LossWeights {
            beta: 0.0,
            delta: 0.0,
            gamma: g,
        };
        assert_eq!(weighted(values, &w(2.0 * gamma)), 2.0 * weighted(values, &w(gamma)));
    }
}

#[test]
fn nan_component_is_named() {
    for (i, name) in COMPONENTS.iter().enumerate() {
        let mut values = [0.5; 5];
        values[i] = f64::NAN;
        let mut g = Graph::new();
        let c = terms(&mut g, values);
        match total_loss(&mut g, &c, &LossWeights::default(), 17) {
            Err(Error::Training { step, component, .. }) => {
                assert_eq!(step, 17);
                assert_eq!(component, *name);
            }
            other => panic!("expected training error, got {other:?}"),
        }
    }
}

#[test]
fn stage_one_freezes_point_side_and_clips() {
    let v = vocab();
    let data_scenes = scenes(4, 100);
    let data = prepare(&data_scenes, extent(), &v).unwrap();
    let cfg = quick_stage(25, 0, 3);
    let mut model = Model::new(&ModelConfig::default(), &v, 3).unwrap();
    let point_ids = model.point_params();
    let image_ids = model.image_params();
    let point_before = model.store.checksum(&point_ids);
    let image_before = model.store.checksum(&image_ids);
    let mut state = TrainState::new(&model, &cfg);
    train_stage1(&mut model, &data, &mut state, &cfg, &v).unwrap();
    assert_eq!(state.log.len(), 25);
    for r in &state.log {
        assert_eq!(r.stage, Stage::ImageOnly);
        assert_eq!(r.point_checksum, point_before);
        assert!(r.image_grad_norm_applied <= cfg.clip_norm + 1e-12);
        assert_eq!(r.components.len(), 1);
        assert_eq!(r.components[0].0, "image");
    }
    assert!(state.log.iter().any(|r| r.image_grad_norm > cfg.clip_norm));
    assert_eq!(model.store.checksum(&point_ids), point_before);
    assert_ne!(model.store.checksum(&image_ids), image_before);
}

#[test]
fn stage_one_reduces_image_loss() {
    let v = vocab();
    let data_scenes = scenes(10, 200);
    let data = prepare(&data_scenes, extent(), &v).unwrap();
    let window = 15;
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..3 {
        let cfg = quick_stage(150, 0, seed);
        let (_, state) = run_two_stage(
            &data,
            &ModelConfig::default(),
            &cfg,
            &LossWeights::default(),
            &quick_transfer(),
            &v,
        )
        .unwrap();
        let image: Vec<f64> = state.log.iter().map(|r| r.total).collect();
        first += image[..window].iter().sum::<f64>();
        last += image[image.len() - window..].iter().sum::<f64>();
    }
    assert!(last < first, "late image loss {last} vs early {first}");
}

#[test]
fn zero_point_and_transfer_weights_leave_point_grads_zero() {
    let v = vocab();
    let data_scenes = scenes(2, 300);
    let data = prepare(&data_scenes, extent(), &v).unwrap();
    let cfg = quick_stage(0, 1, 1);
    let w = LossWeights {
        beta: 1.0,
        delta: 0.0,
        gamma: 0.0,
    };
    let mut model = Model::new(&ModelConfig::default(), &v, 1).unwrap();
    let mut state = TrainState::new(&model, &cfg);
    train_stage2(&mut model, &data, &mut state, &cfg, &w, &quick_transfer(), &v).unwrap();
    for id in model.point_params() {
        let grad = model.store.get(id).grad().unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }
    assert_eq!(state.log[0].point_grad_norm, 0.0);
    assert!(state.log[0].image_grad_norm > 0.0);
}

#[test]
fn joint_steps_log_five_components_without_clipping() {
    let v = vocab();
    let data_scenes = scenes(3, 400);
    let data = prepare(&data_scenes, extent(), &v).unwrap();
    let cfg = StageConfig {
        clip_norm: 1e-6,
        ..quick_stage(3, 6, 2)
    };
    let (_, state) = run_two_stage(
        &data,
        &ModelConfig::default(),
        &cfg,
        &LossWeights::default(),
        &quick_transfer(),
        &v,
    )
    .unwrap();
    assert_eq!(state.log.len(), 9);
    for (i, r) in state.log.iter().enumerate() {
        assert_eq!(r.step, i);
        if i < 3 {
            assert_eq!(r.stage, Stage::ImageOnly);
            continue;
        }
        assert_eq!(r.stage, Stage::Joint);
        let names: Vec<&str> = r.components.iter().map(|c| c.0).collect();
        assert_eq!(names, COMPONENTS);
        assert_eq!(r.image_grad_norm, r.image_grad_norm_applied);
        assert!(r.image_grad_norm > cfg.clip_norm);
        let values: [f64; 5] = std::array::from_fn(|k| r.components[k].1);
        let expected = total_loss_value(values, &LossWeights::default());
        assert!((r.total - expected).abs() <= 1e-12 * expected.max(1.0));
    }
    assert_eq!(state.stage, Stage::Joint);
}

#[test]
fn stage_one_refused_after_transition() {
    let v = vocab();
    let data_scenes = scenes(1, 500);
    let data = prepare(&data_scenes, extent(), &v).unwrap();
    let cfg = quick_stage(0, 1, 0);
    let mut model = Model::new(&ModelConfig::default(), &v, 0).unwrap();
    let mut state = TrainState::new(&model, &cfg);
    train_stage2(
        &mut model,
        &data,
        &mut state,
        &cfg,
        &LossWeights::default(),
        &quick_transfer(),
        &v,
    )
    .unwrap();
    let err = train_stage1(&mut model, &data, &mut state, &cfg, &v).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn same_seed_is_bit_identical() {
    let v = vocab();
    let data_scenes = scenes(3, 600);
    let data = prepare(&data_scenes, extent(), &v).unwrap();
    let run = |seed| {
        run_two_stage(
            &data,
            &ModelConfig::default(),
            &quick_stage(5, 5, seed),
            &LossWeights::default(),
            &quick_transfer(),
            &v,
        )
        .unwrap()
    };
    let (a, la) = run(9);
    let (b, lb) = run(9);
    let ids = a.all_params();
    for &id in &ids {
        let (x, y) = (a.store.get(id).data(), b.store.get(id).data());
        assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    assert_eq!(la.log, lb.log);
    let (c, _) = run(10);
    assert_ne!(a.store.checksum(&ids), c.store.checksum(&ids));
}

#[test]
fn runaway_loss_is_a_training_error() {
    let v = vocab();
    let data_scenes = scenes(1, 700);
    let data = prepare(&data_scenes, extent(), &v).unwrap();
    let model_cfg = ModelConfig {
        logit_scale: 1e9,
        ..ModelConfig::default()
    };
    let err = run_two_stage(
        &data,
        &model_cfg,
        &quick_stage(2, 0, 0),
        &LossWeights::default(),
        &quick_transfer(),
        &v,
    )
    .unwrap_err();
    match err {
        Error::Training { step, component, .. } => {
            assert_eq!(step, 0);
            assert_eq!(component, "image");
        }
        other => panic!("expected training error, got {other:?}"),
    }
}

#[test]
fn empty_training_set_is_rejected() {
    let v = vocab();
    let err = run_two_stage(
        &[],
        &ModelConfig::default(),
        &quick_stage(1, 1, 0),
        &LossWeights::default(),
        &quick_transfer(),
        &v,
    )
    .unwrap_err();
    assert!(err.is_config());
}

#[test]
fn joint_training_lifts_novel_miou() {
    let v = vocab();
    let data_scenes = scenes(12, 800);
    let data = prepare(&data_scenes, extent(), &v).unwrap();
    for seed in 0..3 {
        let start = Model::new(&ModelConfig::default(), &v, seed).unwrap();
        let before = evaluate_model(&start, &data_scenes, extent(), &v, 1).unwrap();
        let (trained, _) = run_two_stage(
            &data,
            &ModelConfig::default(),
            &quick_stage(100, 400, seed),
            &LossWeights::default(),
            &quick_transfer(),
            &v,
        )
        .unwrap();
        let after = evaluate_model(&trained, &data_scenes, extent(), &v, 1).unwrap();
        assert!(
            after.miou_novel > before.miou_novel,
            "seed {seed}: novel mIoU {} -> {}",
            before.miou_novel,
            after.miou_novel
        );
    }
}
