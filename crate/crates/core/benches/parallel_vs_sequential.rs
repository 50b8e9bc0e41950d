use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pll::network::init_params;
use pll::synthetic::{generate_synthetic, SyntheticSpec};
use pll::trainers::{predict_all, train_baseline, train_mean_teacher, Method, TrainConfig};
use pll::{split_train_val, Execution};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn data() -> (pll::Dataset, pll::Dataset) {
    let mut spec = SyntheticSpec::new(1000, 5, 0.3, 1);
    spec.embed_dim = 32;
    spec.frames_per_clip = 10;
    let (d, _) = generate_synthetic(&spec).unwrap();
    split_train_val(&d, 0.15, 1).unwrap()
}

fn config(method: Method, execution: Execution) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 1,
        layers: 2,
        hidden: 64,
        patience: None,
        execution,
        ..TrainConfig::default()
    }
}

fn bench_predict(c: &mut Criterion) {
    let (train, _) = data();
    let params = init_params(32, 5, 3, 128, 0).unwrap();
    let mut group = c.benchmark_group("predict_all");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| predict_all(&params, &train, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_epoch(c: &mut Criterion) {
    let (train, val) = data();
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new("B1", name), &exec, |b, &exec| {
            b.iter(|| train_baseline(&config(Method::B1, exec), &train, &val).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("MT", name), &exec, |b, &exec| {
            b.iter(|| train_mean_teacher(&config(Method::MT, exec), &train, &val).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_predict, bench_epoch);
criterion_main!(benches);
