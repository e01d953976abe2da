//! Benchmarks for the data-parallel kernels, comparing thread counts.
//!
//! With the default `parallel` feature each group runs once per thread
//! count (1 = sequential execution of the same code path). Building the
//! bench with `--no-default-features` measures the rayon-free fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use convdec::decode::decode_all;
use convdec::eval::reconstruction_error;
use convdec::network::{LayerSpec, Network};
use convdec::tensor::{correlate_valid, FilterBank, Interp, Tensor3};

fn rand_tensor(rng: &mut ChaCha20Rng, h: usize, w: usize, c: usize) -> Tensor3 {
    Tensor3::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn rand_bank(rng: &mut ChaCha20Rng, n: usize, h: usize, w: usize, c: usize) -> FilterBank {
    FilterBank::unbiased((0..n).map(|_| rand_tensor(rng, h, w, c)).collect()).unwrap()
}

fn lenet_like(rng: &mut ChaCha20Rng) -> Network {
    Network::new(
        (28, 28, 1),
        vec![
            LayerSpec::Conv(rand_bank(rng, 20, 5, 5, 1)),
            LayerSpec::MaxPool,
            LayerSpec::Conv(rand_bank(rng, 50, 5, 5, 20)),
            LayerSpec::MaxPool,
            LayerSpec::Conv(rand_bank(rng, 500, 4, 4, 50)),
            LayerSpec::Relu,
            LayerSpec::Conv(rand_bank(rng, 10, 1, 1, 500)),
            LayerSpec::SoftMax,
        ],
    )
    .unwrap()
}

/// Runs `f` under a rayon pool of `n` threads (or directly without the
/// parallel feature, where `n` is informational only).
fn with_threads<R>(n: usize, f: impl FnOnce() -> R + Send) -> R
where
    R: Send,
{
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        f()
    }
}

fn bench_ids() -> Vec<(usize, String)> {
    #[cfg(feature = "parallel")]
    {
        let cores = std::thread::available_parallelism().map_or(2, |n| n.get());
        let mut counts = vec![1];
        if cores > 1 {
            counts.push(cores);
        }
        counts
            .into_iter()
            .map(|n| (n, format!("{n}-threads")))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        vec![(1, "sequential".to_string())]
    }
}

fn bench_correlate(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let input = rand_tensor(&mut rng, 12, 12, 20);
    let bank = rand_bank(&mut rng, 50, 5, 5, 20);
    let mut group = c.benchmark_group("correlate_valid_12x12x20_50f");
    for (n, id) in bench_ids() {
        group.bench_function(BenchmarkId::from_parameter(id), |b| {
            with_threads(n, || {
                b.iter(|| correlate_valid(&input, &bank, 1, true).unwrap())
            })
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let net = lenet_like(&mut rng);
    let image = rand_tensor(&mut rng, 28, 28, 1);
    let mut group = c.benchmark_group("lenet_forward");
    for (n, id) in bench_ids() {
        group.bench_function(BenchmarkId::from_parameter(id), |b| {
            with_threads(n, || b.iter(|| net.output(&image).unwrap()))
        });
    }
    group.finish();
}

fn bench_decode_layer3(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let net = lenet_like(&mut rng);
    let mut group = c.benchmark_group("decode_all_layer3");
    group.sample_size(20);
    for (n, id) in bench_ids() {
        group.bench_function(BenchmarkId::from_parameter(id), |b| {
            with_threads(n, || b.iter(|| decode_all(&net, 3, Interp::Bicubic).unwrap()))
        });
    }
    group.finish();
}

fn bench_reconstruction_error(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let net = lenet_like(&mut rng);
    let images: Vec<Tensor3> = (0..16).map(|_| rand_tensor(&mut rng, 28, 28, 1)).collect();
    let mut group = c.benchmark_group("reconstruction_error_L3_16img");
    group.sample_size(10);
    for (n, id) in bench_ids() {
        group.bench_function(BenchmarkId::from_parameter(id), |b| {
            with_threads(n, || {
                b.iter(|| reconstruction_error(&net, &images, 3, Interp::Nearest).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(
    kernels,
    bench_correlate,
    bench_forward,
    bench_decode_layer3,
    bench_reconstruction_error
);
criterion_main!(kernels);
