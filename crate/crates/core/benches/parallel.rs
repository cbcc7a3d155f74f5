//! Sequential against rayon-parallel execution for the data-parallel paths.
//! Build with `--no-default-features` to measure the pure sequential build.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use furcanet::corpus::{generate_examples, CorpusConfig, MixtureExample, Split};
use furcanet::evaluate::{evaluate, EvalOptions, Separator};
use furcanet::model::{FurcaNetModel, ModelConfig};
use furcanet::par::Execution;
use furcanet::spectral::stft_with;
use furcanet::training::batch_gradient;

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn label(exec: Execution) -> &'static str {
    match exec {
        Execution::Sequential => "sequential",
        Execution::Parallel => "parallel",
    }
}

fn examples(n: usize) -> Vec<MixtureExample> {
    let cfg = CorpusConfig {
        num_examples: n,
        ..CorpusConfig::desk(Split::Train, 0)
    };
    generate_examples(&cfg, Execution::Sequential).unwrap()
}

fn bench_batch_gradient(c: &mut Criterion) {
    let model = FurcaNetModel::build(ModelConfig::default()).unwrap();
    let set = examples(8);
    let batch: Vec<&MixtureExample> = set.iter().collect();
    let mut group = c.benchmark_group("batch_gradient_8");
    group.sample_size(10);
    for exec in MODES {
        group.bench_function(BenchmarkId::from_parameter(label(exec)), |b| {
            b.iter(|| batch_gradient(&model, black_box(&batch), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_corpus(c: &mut Criterion) {
    let cfg = CorpusConfig {
        num_examples: 16,
        ..CorpusConfig::desk(Split::Train, 0)
    };
    let mut group = c.benchmark_group("generate_examples_16");
    group.sample_size(10);
    for exec in MODES {
        group.bench_function(BenchmarkId::from_parameter(label(exec)), |b| {
            b.iter(|| generate_examples(black_box(&cfg), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_stft(c: &mut Criterion) {
    let w = examples(1).remove(0).mixture;
    let mut group = c.benchmark_group("stft_1s");
    for exec in MODES {
        group.bench_function(BenchmarkId::from_parameter(label(exec)), |b| {
            b.iter(|| stft_with(black_box(&w), 256, 128, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let model = FurcaNetModel::build(ModelConfig::default()).unwrap();
    let set = examples(8);
    let mut group = c.benchmark_group("evaluate_8");
    group.sample_size(10);
    for exec in MODES {
        let opts = EvalOptions {
            execution: exec,
            ..EvalOptions::default()
        };
        group.bench_function(BenchmarkId::from_parameter(label(exec)), |b| {
            b.iter(|| evaluate(Separator::Model(&model), black_box(&set), &opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_batch_gradient,
    bench_corpus,
    bench_stft,
    bench_evaluate
);
criterion_main!(benches);
