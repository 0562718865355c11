use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use dwad_core::dgp::{self, DgpSpec};
use dwad_core::dwad::{estimate_with, theta_hat};
use dwad_core::par::Execution;
use dwad_core::rng::{RandomStream, StreamRole};
use dwad_core::Kernel;
use std::hint::black_box;

fn pairwise(c: &mut Criterion) {
    let g = DgpSpec::linear(2, 1.0).unwrap();
    let k = Kernel::gaussian(2).unwrap();
    let mut group = c.benchmark_group("estimate");
    group.sample_size(10);
    for n in [500usize, 2000] {
        let s = dgp::sample(&g, n, RandomStream::new(1, 0, StreamRole::Data)).unwrap();
        let h = (n as f64).powf(-0.3);
        group.throughput(Throughput::Elements((n * (n - 1) / 2) as u64));
        // Without the `parallel` feature both variants run the sequential path.
        group.bench_with_input(BenchmarkId::new("parallel", n), &s, |b, s| {
            b.iter(|| estimate_with(black_box(s), &k, h, Execution::Parallel).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &s, |b, s| {
            b.iter(|| estimate_with(black_box(s), &k, h, Execution::Sequential).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("theta_only", n), &s, |b, s| {
            b.iter(|| theta_hat(black_box(s), &k, h).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, pairwise);
criterion_main!(benches);
