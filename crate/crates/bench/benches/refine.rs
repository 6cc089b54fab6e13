use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ffuse_bench::stream_pair;
use ffuse_core::refine::refine_loss_backward_arrays;
use ffuse_core::{cross_correlation, fuse_linear_projection, AffineProjection};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn correlation(c: &mut Criterion) {
    let mut group = c.benchmark_group("cross_correlation");
    for frames in [1_000, 10_000] {
        let (u, v) = stream_pair(frames, 32);
        group.bench_with_input(BenchmarkId::from_parameter(frames), &frames, |b, _| {
            b.iter(|| cross_correlation(black_box(&u), black_box(&v)).unwrap())
        });
    }
    group.finish();
}

fn refine_backward(c: &mut Criterion) {
    let (u, v) = stream_pair(10_000, 16);
    c.bench_function("refine_loss_backward/10000x16", |b| {
        b.iter(|| {
            refine_loss_backward_arrays(black_box(u.view()), black_box(v.view()), 0.2).unwrap()
        })
    });
}

fn linear_projection(c: &mut Criterion) {
    let (u, v) = stream_pair(10_000, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pu = AffineProjection::init(32, 100, &mut rng);
    let pv = AffineProjection::init(32, 100, &mut rng);
    c.bench_function("fuse_linear_projection/10000x32->100", |b| {
        b.iter(|| fuse_linear_projection(&pu, &pv, black_box(&u), black_box(&v)).unwrap())
    });
}

criterion_group!(benches, correlation, refine_backward, linear_projection);
criterion_main!(benches);
