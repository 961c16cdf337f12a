//! Data-parallel kernels on one thread versus the full pool. Without the
//! `parallel` feature only the sequential build is measured.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use boostnet::budget::{calibrate_policy, HoldoutConfidences};
use boostnet::data::digit_grid;
use boostnet::eval::{budgeted_batch_eval, cost_profile_estimate, LogitTable};
use boostnet::model::{build_model, BackwardOptions, ImageShape, ModelConfig, ModelState};
use boostnet::trainer::{finite_diff_gradient_check, GradCheckOptions};

#[cfg(feature = "parallel")]
fn thread_settings() -> Vec<(String, Option<rayon::ThreadPool>)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![
        ("threads=1".to_string(), Some(one)),
        (format!("pool={}", rayon::current_num_threads()), None),
    ]
}

#[cfg(feature = "parallel")]
fn run_on<T: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> T + Send) -> T {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn thread_settings() -> Vec<(String, Option<()>)> {
    vec![("sequential".to_string(), None)]
}

#[cfg(not(feature = "parallel"))]
fn run_on<T>(_: &Option<()>, f: impl FnOnce() -> T) -> T {
    f()
}

fn mlp() -> ModelState {
    build_model(&ModelConfig::mlp(64, &[64, 64, 64, 64], 10).unwrap(), 0).unwrap()
}

fn cnn() -> ModelState {
    let shape = ImageShape {
        channels: 1,
        height: 8,
        width: 8,
    };
    build_model(&ModelConfig::cnn(shape, &[8, 16, 16], 3, &[1, 2, 1], 10).unwrap(), 0).unwrap()
}

fn forward_backward(c: &mut Criterion) {
    let data = digit_grid(256, 0.3, 0);
    let mut group = c.benchmark_group("forward_backward");
    for (name, model) in [("mlp", mlp()), ("cnn", cnn())] {
        for (label, pool) in thread_settings() {
            group.bench_function(BenchmarkId::new(format!("{name}/forward"), &label), |b| {
                b.iter(|| run_on(&pool, || model.forward_all_exits(&data.features).unwrap()))
            });
            group.bench_function(BenchmarkId::new(format!("{name}/backward"), &label), |b| {
                b.iter(|| {
                    run_on(&pool, || {
                        model
                            .backward(&data.features, &data.labels, &BackwardOptions::default())
                            .unwrap()
                    })
                })
            });
        }
    }
    group.finish();
}

fn gradcheck(c: &mut Criterion) {
    let data = digit_grid(8, 0.3, 0);
    let model = build_model(&ModelConfig::mlp(64, &[12, 12, 12], 10).unwrap(), 0).unwrap();
    let mut group = c.benchmark_group("gradcheck");
    group.sample_size(10);
    for (label, pool) in thread_settings() {
        group.bench_function(BenchmarkId::from_parameter(&label), |b| {
            b.iter(|| {
                run_on(&pool, || {
                    finite_diff_gradient_check(&model, &data.features, &data.labels, &GradCheckOptions::default())
                        .unwrap()
                })
            })
        });
    }
    group.finish();
}

fn budgeted_eval(c: &mut Criterion) {
    let model = mlp();
    let data = digit_grid(4000, 0.3, 1);
    let table = LogitTable::from_model(&model, &data.features, &data.labels, &data.ids).unwrap();
    let costs = cost_profile_estimate(&model).unwrap();
    let holdout = HoldoutConfidences::from_table(&table).unwrap();
    let policy = calibrate_policy(costs.total() * 0.5, &costs, &holdout).unwrap();
    let mut group = c.benchmark_group("budgeted_eval");
    for (label, pool) in thread_settings() {
        group.bench_function(BenchmarkId::from_parameter(&label), |b| {
            b.iter(|| run_on(&pool, || budgeted_batch_eval(&table, &policy, &costs).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward, gradcheck, budgeted_eval);
criterion_main!(benches);
