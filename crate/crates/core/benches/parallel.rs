//! Rayon map against the in-order map on the two per-sample workloads:
//! the compacted eval forward and the input-gradient pass.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;

use mia_former::config::MiaConfig;
use mia_former::controller::DimensionSet;
use mia_former::data::synth_generate;
use mia_former::model::{model_forward, Policy};
use mia_former::parallel::{map, map_sequential};
use mia_former::params::init_model;
use mia_former::robust::input_gradient;

const CHUNK: usize = 16;

fn chunks(n: usize) -> Vec<(Array2<f32>, Vec<usize>, Vec<u64>)> {
    let data = synth_generate(10, n, 3, 3, 32).unwrap();
    (0..n)
        .step_by(CHUNK)
        .map(|s| {
            let rows: Vec<usize> = (s..(s + CHUNK).min(n)).collect();
            data.batch(&rows)
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let cfg = MiaConfig::tiny_vit().validate().unwrap();
    let store = init_model::<f32>(&cfg, 0);
    let work = chunks(128);

    let mut g = c.benchmark_group("eval_forward");
    g.sample_size(10);
    let fwd = |_: usize, w: &(Array2<f32>, Vec<usize>, Vec<u64>)| {
        model_forward(&cfg, &store, &w.0, &w.2, None, Policy::eval(&store, DimensionSet::ALL))
            .unwrap()
            .logits
    };
    g.bench_function(BenchmarkId::new("rayon", 128), |b| b.iter(|| map(&work, fwd)));
    g.bench_function(BenchmarkId::new("sequential", 128), |b| b.iter(|| map_sequential(&work, fwd)));
    g.finish();

    let mut g = c.benchmark_group("input_gradient");
    g.sample_size(10);
    let grad = |_: usize, w: &(Array2<f32>, Vec<usize>, Vec<u64>)| {
        input_gradient(&cfg, &store, &w.0, &w.1, DimensionSet::ALL).unwrap().1
    };
    g.bench_function(BenchmarkId::new("rayon", 128), |b| b.iter(|| map(&work, grad)));
    g.bench_function(BenchmarkId::new("sequential", 128), |b| b.iter(|| map_sequential(&work, grad)));
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
