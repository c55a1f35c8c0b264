//! Parallel speedup check: the same workloads on a one-worker pool and on a
//! pool sized to the machine. Results are bitwise identical either way (the
//! kernels reduce in index order); this measures only the fork overhead and
//! the win. Built without the `parallel` feature the pool is ignored and the
//! two columns coincide, which is the sequential fallback's baseline.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flare_core::mixer::flare_mix_fused;
use flare_core::model::{init_params, model_forward, ModelConfig};
use flare_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use std::time::Duration;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let len: usize = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let hw = std::thread::available_parallelism().map_or(1, |p| p.get());
    let mut out = vec![(
        "1_thread".to_string(),
        rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap(),
    )];
    if hw > 1 {
        out.push((
            format!("{}_threads", hw),
            rayon::ThreadPoolBuilder::new().num_threads(hw).build().unwrap(),
        ));
    }
    out
}

fn mixer_under_pools(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, n, m, d) = (4, 16384, 64, 16);
    let q = rand_tensor(&[h, m, d], &mut rng);
    let k = rand_tensor(&[h, n, d], &mut rng);
    let v = rand_tensor(&[h, n, d], &mut rng);
    let mut group = c.benchmark_group("pool_mixer_n16384");
    for (label, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(&label), &label, |b, _| {
            b.iter(|| pool.install(|| black_box(flare_mix_fused(&q, &k, &v).unwrap())))
        });
    }
    group.finish();
}

fn forward_under_pools(c: &mut Criterion) {
    let cfg = ModelConfig {
        blocks: 2,
        channels: 32,
        heads: 4,
        latents: 32,
        d_in: 3,
        d_out: 1,
        ..ModelConfig::default()
    };
    let params = init_params::<f32>(&cfg, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&[8192, 3], &mut rng);
    let mut group = c.benchmark_group("pool_forward_n8192");
    for (label, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(&label), &label, |b, _| {
            b.iter(|| pool.install(|| black_box(model_forward(&x, &cfg, &params).unwrap())))
        });
    }
    group.finish();
}

fn config() -> Criterion {
    Criterion::default()
        .sample_size(10)
        .warm_up_time(Duration::from_millis(300))
        .measurement_time(Duration::from_secs(2))
}

criterion_group! {
    name = benches;
    config = config();
    targets = mixer_under_pools, forward_under_pools
}
criterion_main!(benches);
