use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use crossmodal_bench::{reference_scene, values, vocabulary};
use crossmodal_core::engine::{Graph, ParamStore};
use crossmodal_core::eval::predict_scene;
use crossmodal_core::geometry::{project_points, transfer_labels};
use crossmodal_core::scenegen::{render_view, SceneSpec};
use crossmodal_core::trainer::{prepare, Model, ModelConfig, StageConfig, TrainSetup};
use crossmodal_core::transfer::{vpm_forward, VpmParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let (a, b) = (values(n * n, 1), values(n * n, 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.constant(n, n, a.clone()).unwrap();
                let y = g.constant(n, n, b.clone()).unwrap();
                black_box(g.matmul(x, y).unwrap());
            })
        });
    }
    group.finish();
}

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("vpm_forward_backward");
    group.sample_size(10);
    for r in [256usize, 1024] {
        let mut store = ParamStore::new();
        let params = VpmParams::new(&mut store, 16, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (img, pts) = (values(r * 16, 3), values(r * 16, 4));
        group.bench_with_input(BenchmarkId::from_parameter(r), &r, |bench, &r| {
            bench.iter(|| {
                let mut g = Graph::new();
                let x = g.constant(r, 16, img.clone()).unwrap();
                let y = g.constant(r, 16, pts.clone()).unwrap();
                let logits = vpm_forward(&mut g, &store, x, y, &params).unwrap();
                let loss = g.sum(logits);
                g.backward(loss, &mut store).unwrap();
            })
        });
    }
    group.finish();
}

fn geometry(c: &mut Criterion) {
    let scene = reference_scene(0);
    let vocab = vocabulary();
    c.bench_function("project_points", |b| {
        b.iter(|| black_box(project_points(&scene.cloud, &scene.calibrations)))
    });
    let pairing = project_points(&scene.cloud, &scene.calibrations);
    c.bench_function("transfer_labels", |b| {
        b.iter(|| black_box(transfer_labels(&pairing, &scene.pseudo_labels, &vocab).unwrap()))
    });
    c.bench_function("render_view", |b| {
        b.iter(|| black_box(render_view(&scene.objects, &scene.calibrations[0], vocab.ignore())))
    });
}

fn model(c: &mut Criterion) {
    let scene = reference_scene(1);
    let vocab = vocabulary();
    let model = Model::new(&ModelConfig::default(), &vocab, 0).unwrap();
    let extent = SceneSpec::default().extent;
    c.bench_function("predict_scene", |b| {
        b.iter(|| black_box(predict_scene(&model, &scene, extent).unwrap()))
    });
    let scenes = vec![scene.clone()];
    let data = prepare(&scenes, extent, &vocab).unwrap();
    let mut group = c.benchmark_group("train_steps");
    group.sample_size(10);
    for (name, s1, s2) in [("image_only_x10", 10, 0), ("joint_x10", 0, 10)] {
        let setup = TrainSetup {
            model: ModelConfig::default(),
            stage: StageConfig {
                stage1_steps: s1,
                stage2_steps: s2,
                ..StageConfig::default()
            },
            weights: Default::default(),
            transfer: Default::default(),
            extent,
        };
        group.bench_function(name, |b| b.iter(|| black_box(setup.train(&data, &vocab, 0).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, matmul, attention, geometry, model);
criterion_main!(benches);
