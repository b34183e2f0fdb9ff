//! Serial versus rayon execution of the two batch-shaped workloads: one
//! training step's gradients and a corpus evaluation. Without the `parallel`
//! feature both variants run serially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowface::backbone::Model;
use flowface::flow::SamplerConfig;
use flowface::harness::eval::{evaluate, EvalMode};
use flowface::harness::synth::make_dataset;
use flowface::harness::train::{batch_gradients, draw_sample, TrainConfig};
use flowface::parallel::Execution;

const MODES: [(&str, Execution); 2] = [("serial", Execution::Serial), ("parallel", Execution::Parallel)];

fn gradients(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let mut model = Model::new(cfg.model.clone()).unwrap();
    model.randomize_adapters(1, 0.05).unwrap();
    let batch: Vec<_> = (0..cfg.batch_size).map(|i| draw_sample(&cfg, 0, i).unwrap()).collect();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradients(&model, &batch, &cfg.loss, exec).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let mut model = Model::new(TrainConfig::default().model).unwrap();
    model.randomize_adapters(2, 0.05).unwrap();
    let corpus = make_dataset(8, 2, 5, None).unwrap();
    let sampler = SamplerConfig {
        steps: 4,
        ..SamplerConfig::default()
    };
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&model, &corpus, EvalMode::WithRef, &sampler, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gradients, evaluation);
criterion_main!(benches);
