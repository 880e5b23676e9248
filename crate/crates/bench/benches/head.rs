use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use arcdet_core::cascade::{image_size, test_proposals, DetectParams};
use arcdet_core::engine::{forward_roi, SceneIntegral};
use arcdet_core::geometry::{nms, CenterBox, ScoredBox};
use arcdet_core::head::score_component;
use arcdet_core::optim::OptimState;
use arcdet_core::pooling::pool_roi;
use arcdet_core::proposals::ProposalParams;
use arcdet_core::psmap::{branch_set, project, ARConfig};
use arcdet_core::rng::stream;
use arcdet_core::scene::{generate_scene, DatasetSpec};
use arcdet_core::train::{train_step, zero_grads, Schedule, TrainContext};
use arcdet_core::CascadeModel;

fn setup(set: char) -> (ARConfig, DatasetSpec, CascadeModel) {
    let spec = DatasetSpec::default();
    let cfg = ARConfig {
        tilings: branch_set(set).unwrap(),
        ..ARConfig::default()
    };
    let model = CascadeModel::init(&cfg, spec.channels(), 2, 1).unwrap();
    (cfg, spec, model)
}

// Explicit maps then pooling against the fused integral-image path, on the
// proposals of one scene.
fn pooling(c: &mut Criterion) {
    let mut group = c.benchmark_group("pool_and_score");
    for set in ['a', 'c'] {
        let (cfg, spec, model) = setup(set);
        let scene = generate_scene(&spec, 3).unwrap();
        let image = image_size(&scene.features, spec.stride);
        let rois = test_proposals(&scene.gts, image, 0, 0, &ProposalParams::default())
            .refined()
            .unwrap();
        let features = &scene.features;
        group.bench_with_input(BenchmarkId::new("explicit", set), &rois, |b, rois| {
            b.iter(|| {
                let maps = project(features, &model.proj).unwrap();
                for r in rois {
                    for i in 0..cfg.components() {
                        let f = pool_roi(&maps, &cfg, r, i).unwrap();
                        black_box(score_component(&f, &model.stages[0], &cfg).unwrap());
                    }
                }
            })
        });
        group.bench_with_input(BenchmarkId::new("fused", set), &rois, |b, rois| {
            b.iter(|| {
                let integral = SceneIntegral::new(features);
                for r in rois {
                    black_box(forward_roi(&cfg, &model.proj, &model.stages[0], &integral, r).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn suppression(c: &mut Criterion) {
    let mut group = c.benchmark_group("nms");
    for n in [50, 200, 1000] {
        let mut rng = stream(4, "bench-nms", n as u64);
        let boxes: Vec<ScoredBox> = (0..n)
            .map(|_| ScoredBox {
                bbox: CenterBox {
                    x: rng.gen_range(0.0..200.0),
                    y: rng.gen_range(0.0..200.0),
                    wd: rng.gen_range(10.0..60.0),
                    ht: rng.gen_range(10.0..60.0),
                },
                label: 1,
                score: rng.gen(),
            })
            .collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &boxes, |b, boxes| {
            b.iter(|| black_box(nms(boxes, 0.5)))
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for set in ['a', 'c'] {
        let (_, spec, model) = setup(set);
        let scene = generate_scene(&spec, 5).unwrap();
        let image = image_size(&scene.features, spec.stride);
        let rois = test_proposals(&scene.gts, image, 0, 1, &ProposalParams::default())
            .refined()
            .unwrap();
        let ctx = TrainContext {
            schedule: Schedule::default(),
            proposals: ProposalParams::default(),
            detect: DetectParams::default(),
            seed: 0,
        };
        group.bench_function(BenchmarkId::from_parameter(set), |b| {
            let mut m = model.clone();
            let mut optim = OptimState::new(&zero_grads(&m, 0), 0.001, 0.9, 5e-4);
            b.iter(|| black_box(train_step(&ctx, &mut m, 0, &mut optim, &scene, &rois).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, pooling, suppression, training);
criterion_main!(benches);
