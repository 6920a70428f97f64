use criterion::{black_box, criterion_group, criterion_main, Criterion};

use fg3d_bench::{batch, desk_arch, random_cloud};
use fg3d_core::detect::{detect_trees, DetectConfig};
use fg3d_core::diffusion::{make_schedule, sample, DenoiserWeights};
use fg3d_core::metrics::{chamfer, emd_exact};
use fg3d_core::scansim::{simulate_als, AlsSensor};
use fg3d_core::synthforest::{generate_forest, ForestConfig};
use fg3d_core::ConvexHull3;

fn metrics(c: &mut Criterion) {
    let a = random_cloud(2048, 1);
    let b = random_cloud(2048, 2);
    c.bench_function("chamfer 2048", |bch| bch.iter(|| chamfer(black_box(&a), black_box(&b)).unwrap()));
    let a = random_cloud(256, 3);
    let b = random_cloud(256, 4);
    c.bench_function("emd 256", |bch| bch.iter(|| emd_exact(black_box(&a), black_box(&b)).unwrap()));
    let h = random_cloud(5000, 5);
    c.bench_function("hull 5000", |bch| bch.iter(|| ConvexHull3::from_points(black_box(h.points())).unwrap()));
}

fn denoiser(c: &mut Criterion) {
    let w = DenoiserWeights::<f32>::init(&desk_arch(), 0);
    let mut g = w.zeros_like();
    let ex = batch(256, 512, 16, 7);
    c.bench_function("loss_and_grad batch 16", |bch| bch.iter(|| w.loss_and_grad(black_box(&ex), &mut g)));
    let sched = make_schedule(100, 1e-4, 0.2).unwrap();
    let cond = random_cloud(512, 9);
    c.bench_function("sample 256 points T=100", |bch| bch.iter(|| sample(&w, Some(&cond), 256, 512, &sched, 1)));
}

fn scene(c: &mut Criterion) {
    let scene = generate_forest(&ForestConfig::default(), 0).unwrap();
    let als = simulate_als(&scene, &AlsSensor::default(), 1);
    let mut g = c.benchmark_group("plot");
    g.sample_size(10);
    g.bench_function("simulate_als", |bch| bch.iter(|| simulate_als(&scene, &AlsSensor::default(), 1)));
    g.bench_function("detect_trees", |bch| bch.iter(|| detect_trees(black_box(&als), &DetectConfig::default())));
    g.finish();
}

criterion_group!(benches, metrics, denoiser, scene);
criterion_main!(benches);
