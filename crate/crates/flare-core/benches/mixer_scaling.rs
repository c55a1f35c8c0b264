//! Scaling behaviour of the mixer and the spectral path.
//!
//! Four sweeps: token count at fixed latent count (should read linear),
//! latent-mix vs quadratic attention head to head, latent count at fixed
//! token count (cost proportional to M), and the low-rank eigendecomposition
//! against its dense-Gram oracle as N grows.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use flare_core::mixer::{flare_mix_fused, vanilla_attention};
use flare_core::spectral::{dense_spectrum_oracle, flare_spectrum};
use flare_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use std::time::Duration;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let len: usize = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn token_sweep(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, m, d) = (4, 64, 16);
    let mut group = c.benchmark_group("tokens_fixed_latents");
    for &n in &[1024usize, 2048, 4096, 8192] {
        let q = rand_tensor(&[h, m, d], &mut rng);
        let k = rand_tensor(&[h, n, d], &mut rng);
        let v = rand_tensor(&[h, n, d], &mut rng);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("fused", n), &n, |b, _| {
            b.iter(|| black_box(flare_mix_fused(&q, &k, &v).unwrap()))
        });
    }
    group.finish();
}

fn latent_vs_quadratic(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, m, d) = (4, 64, 16);
    let mut group = c.benchmark_group("latent_vs_quadratic");
    for &n in &[256usize, 512, 1024, 2048] {
        let q = rand_tensor(&[h, m, d], &mut rng);
        let qq = rand_tensor(&[h, n, d], &mut rng);
        let k = rand_tensor(&[h, n, d], &mut rng);
        let v = rand_tensor(&[h, n, d], &mut rng);
        group.bench_with_input(BenchmarkId::new("latent", n), &n, |b, _| {
            b.iter(|| black_box(flare_mix_fused(&q, &k, &v).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("quadratic", n), &n, |b, _| {
            b.iter(|| black_box(vanilla_attention(&qq, &k, &v, (d as f32).sqrt()).unwrap()))
        });
    }
    group.finish();
}

fn latent_count_sweep(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, n, d) = (4, 2048, 16);
    let mut group = c.benchmark_group("latents_fixed_tokens");
    for &m in &[16usize, 32, 64, 128] {
        let q = rand_tensor(&[h, m, d], &mut rng);
        let k = rand_tensor(&[h, n, d], &mut rng);
        let v = rand_tensor(&[h, n, d], &mut rng);
        group.throughput(Throughput::Elements(m as u64));
        group.bench_with_input(BenchmarkId::new("fused", m), &m, |b, _| {
            b.iter(|| black_box(flare_mix_fused(&q, &k, &v).unwrap()))
        });
    }
    group.finish();
}

// The dense path factorizes an N×N matrix (about ten seconds per call at
// N=512 already), so this sweep stops where the oracle is still affordable;
// the low-rank path's cost is dominated by M and barely moves across it.
fn spectrum_paths(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (m, d) = (32, 16);
    let mut group = c.benchmark_group("spectrum");
    for &n in &[128usize, 256, 512] {
        let q = rand_tensor(&[m, d], &mut rng).cast::<f64>();
        let k = rand_tensor(&[n, d], &mut rng).cast::<f64>();
        group.bench_with_input(BenchmarkId::new("low_rank", n), &n, |b, _| {
            b.iter(|| black_box(flare_spectrum(&q, &k).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("dense_gram", n), &n, |b, _| {
            b.iter(|| black_box(dense_spectrum_oracle(&q, &k).unwrap()))
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
    targets = token_sweep, latent_vs_quadratic, latent_count_sweep, spectrum_paths
}
criterion_main!(benches);
