use agecal_bench::{random_inputs, study_rows, typical_hyperparameters};
use agecal_core::dataset::StressProfile;
use agecal_core::forecast::forecast_curve;
use agecal_core::gp::{fit, log_marginal_likelihood, predict, FitConfig, GpModel};
use agecal_core::kernel::gram_matrix;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::collections::BTreeMap;
use std::hint::black_box;

fn bench_gram(c: &mut Criterion) {
    let h = typical_hyperparameters();
    let mut group = c.benchmark_group("gram_matrix");
    for n in [30, 100, 300] {
        let x = random_inputs(n, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| {
            b.iter(|| gram_matrix(black_box(x), &h, true).unwrap())
        });
    }
    group.finish();
}

fn bench_lml(c: &mut Criterion) {
    let h = typical_hyperparameters();
    let mut group = c.benchmark_group("log_marginal_likelihood");
    for n in [30, 100, 300] {
        let x = random_inputs(n, 2);
        let y: Vec<f64> = x.iter().map(|v| -0.01 * v.dt).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &(x, y), |b, (x, y)| {
            b.iter(|| log_marginal_likelihood(black_box(x), black_box(y), &h).unwrap())
        });
    }
    group.finish();

    let rows = study_rows();
    let x: Vec<_> = rows.iter().map(agecal_core::gp::row_input).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.dq).collect();
    c.bench_function("log_marginal_likelihood/study_rows", |b| {
        b.iter(|| log_marginal_likelihood(black_box(&x), black_box(&y), &h).unwrap())
    });
}

fn bench_fit(c: &mut Criterion) {
    let rows = study_rows();
    let cfg = FitConfig {
        restarts: 2,
        ..FitConfig::default()
    };
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    group.bench_function("study_rows", |b| {
        b.iter(|| fit(black_box(&rows), &cfg, &BTreeMap::new()).unwrap())
    });
    group.finish();
}

fn bench_forecast(c: &mut Criterion) {
    let model = GpModel::new(study_rows(), typical_hyperparameters()).unwrap();
    let profile = StressProfile::constant("B", 1000.0, 40.0, 65.0).unwrap();
    c.bench_function("forecast/1000_days", |b| {
        b.iter(|| forecast_curve(&model, black_box(&profile), 990.0, 30.0).unwrap())
    });
    let xs = random_inputs(200, 3);
    c.bench_function("predict/200_points", |b| {
        b.iter(|| predict(&model, black_box(&xs), false).unwrap())
    });
}

criterion_group!(benches, bench_gram, bench_lml, bench_fit, bench_forecast);
criterion_main!(benches);
