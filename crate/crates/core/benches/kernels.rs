//! Rayon pool against a single-thread pool on the hot kernels. Build with
//! `--no-default-features` to drop rayon from the library entirely.

use std::hint::black_box;

use angiovae::conv::conv2d;
use angiovae::gradcheck::random_in;
use angiovae::inference::{reconstruct_volume, ssim_volume};
use angiovae::model::{Vae, VaeArchitecture};
use angiovae::objectives::SsimConfig;
use angiovae::phantom::{generate, PhantomSpec};
use angiovae::preprocess::normalize;
use angiovae::volume::SliceAxis;
use angiovae::{ConvSpec, Shape4};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPool;

fn pools() -> Vec<(&'static str, ThreadPool)> {
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    vec![("rayon", all), ("single", one)]
}

fn kernels(c: &mut Criterion) {
    let spec = ConvSpec::square(32, 64, 4, 2, 1);
    let x = random_in(Shape4::new(16, 32, 16, 16), 1, -1.0, 1.0).cast::<f32>();
    let w = random_in(Shape4::new(64, 32, 4, 4), 2, -0.1, 0.1).cast::<f32>();
    let bias = vec![0.0f32; 64];

    let vol = generate(&PhantomSpec::default()).unwrap().volume;
    let (norm, _) = normalize(&vol).unwrap();
    let arch = VaeArchitecture::default();
    let vae = Vae::new(arch.clone(), arch.init::<f32>(0)).unwrap();
    let recon = reconstruct_volume(&vae, &norm, SliceAxis::Z).unwrap();
    let ssim = SsimConfig::default();

    let mut g = c.benchmark_group("kernels");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("conv2d_16x32x16x16", name), |b| {
            pool.install(|| b.iter(|| black_box(conv2d(&x, &w, &bias, &spec).unwrap())))
        });
        g.bench_function(BenchmarkId::new("reconstruct_64cube", name), |b| {
            pool.install(|| {
                b.iter(|| black_box(reconstruct_volume(&vae, &norm, SliceAxis::Z).unwrap()))
            })
        });
        g.bench_function(BenchmarkId::new("ssim_volume_64cube", name), |b| {
            pool.install(|| {
                b.iter(|| black_box(ssim_volume(&norm, &recon, &ssim, SliceAxis::Z).unwrap()))
            })
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
