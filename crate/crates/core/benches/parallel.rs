//! Sequential against parallel execution on the main batch loops.

use std::hint::black_box;

use contamscope::backend::{BackendConfig, Client};
use contamscope::detectors::{score_traces, DetectorConfig};
use contamscope::eval::dip::dip_test;
use contamscope::toy::{ToyModel, ToyWorldConfig};
use contamscope::trace::ItemTrace;
use contamscope::Execution;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn toy_client(
    world: &ToyWorldConfig,
    samples: usize,
) -> (Client, Vec<contamscope::trace::ItemRecord>) {
    let w = world.build().expect("toy world");
    let model = ToyModel::new(w.spec).expect("toy model");
    let mut cfg = BackendConfig::new("");
    cfg.num_samples = samples;
    cfg.seed_base = Some(0);
    (Client::toy(model, cfg).expect("toy client"), w.items)
}

fn world() -> ToyWorldConfig {
    ToyWorldConfig {
        n_contaminated: 40,
        n_clean: 40,
        ..Default::default()
    }
}

fn collection(c: &mut Criterion) {
    let (client, items) = toy_client(&world(), 20);
    let mut group = c.benchmark_group("toy_collection");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(client.collect_all(&items, exec).expect("collect")))
        });
    }
    group.finish();
}

fn scoring(c: &mut Criterion) {
    let (client, items) = toy_client(&world(), 50);
    let traces: Vec<ItemTrace> = client
        .collect_all(&items, Execution::Parallel)
        .expect("collect")
        .traces();
    let cfg = DetectorConfig::default();
    let mut group = c.benchmark_group("score_traces");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(score_traces(&traces, &cfg, exec)))
        });
    }
    group.finish();
}

fn dip(c: &mut Criterion) {
    let values: Vec<f64> = (0..2000)
        .map(|i| ((i * 7919) % 2000) as f64 / 2000.0 + (i % 2) as f64)
        .collect();
    let mut group = c.benchmark_group("dip_test");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(dip_test(&values, 200, 0, exec)))
        });
    }
    group.finish();
}

criterion_group!(benches, collection, scoring, dip);
criterion_main!(benches);
