use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use odegrad::estimator::{lm_fit, select_m};
use odegrad_bench::Workload;
use std::hint::black_box;

fn objective(c: &mut Criterion) {
    let mut group = c.benchmark_group("objective");
    for m in [4, 7] {
        let w = Workload::new(100, m);
        group.bench_with_input(BenchmarkId::new("loss", m), &w, |b, w| b.iter(|| w.problem.loss(black_box(&w.start))));
        group.bench_with_input(BenchmarkId::new("residuals_and_sensitivity", m), &w, |b, w| {
            b.iter(|| w.problem.residuals_and_sensitivity(black_box(&w.start)))
        });
    }
    group.finish();
}

fn fitting(c: &mut Criterion) {
    let mut group = c.benchmark_group("fitting");
    group.sample_size(10);
    let w = Workload::new(100, 5);
    group.bench_function("lm_fit/M5", |b| b.iter(|| lm_fit(&w.problem, black_box(&w.start), &w.config.lm)));
    group.bench_function("select_m/4..7", |b| b.iter(|| select_m(black_box(&w.data), &w.config)));
    group.finish();
}

criterion_group!(benches, objective, fitting);
criterion_main!(benches);
