//! Propagation, compensation and precomputation throughput.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use topcomp_core::compensation::{basic_embeddings, build_compensation_fast, precompute_all, uniform_dims, FastConfig};
use topcomp_core::dataset::gen_sbm;
use topcomp_core::linalg::{range_finder, spmm};
use topcomp_core::model::{forward_batch, forward_full, Activation, BatchMode};
use topcomp_core::sampler::locality_partition;
use topcomp_core::{Arch, BatchContext, Dataset, GnnModel, PrecomputeConfig};

fn dataset(n: usize) -> Dataset {
    gen_sbm(n, 8, 40.0 / n as f64, 2.0 / n as f64, 16, 0.1, 1).expect("sbm")
}

fn bench_spmm(c: &mut Criterion) {
    let mut group = c.benchmark_group("spmm");
    for n in [1_000, 4_000] {
        let ds = dataset(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &ds, |b, ds| {
            b.iter(|| spmm(ds.graph.normalized(), black_box(&ds.features)).expect("spmm"))
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let ds = dataset(2_000);
    let dims = [16, 32, 8];
    let model = GnnModel::init(Arch::Gcn, &dims, Activation::Relu, 1).expect("model");
    let p = locality_partition(&ds.graph, 10, 1).expect("partition");
    let batch = &p.clusters[0];
    let ctx = BatchContext::new(&ds.graph, batch).expect("context");
    let hbar = basic_embeddings(&ds.graph, &ds.features, Arch::Gcn, &dims, 1, 1).expect("embeddings");
    let comp = build_compensation_fast(&hbar, &ctx, Arch::Gcn.propagation(), &FastConfig::new(16, 1)).expect("fit");
    let xb = ds.features.select_rows(batch);

    let mut group = c.benchmark_group("forward");
    group.bench_function("full_graph", |b| b.iter(|| forward_full(&model, &ds.graph, black_box(&ds.features)).expect("forward")));
    group.bench_function("batch_plain", |b| {
        b.iter(|| forward_batch(&model, &ctx, black_box(&xb), BatchMode::Plain).expect("forward"))
    });
    group.bench_function("batch_compensated", |b| {
        b.iter(|| forward_batch(&model, &ctx, black_box(&xb), BatchMode::Compensated(&comp)).expect("forward"))
    });
    group.finish();
}

fn bench_range_finder(c: &mut Criterion) {
    let ds = dataset(2_000);
    let hbar = basic_embeddings(&ds.graph, &ds.features, Arch::Gcn, &uniform_dims(16, 2), 4, 1).expect("embeddings");
    let h = hbar.matrix.select_rows(&(0..200).collect::<Vec<_>>());
    let mut group = c.benchmark_group("range_finder");
    for k in [8, 32] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, &k| b.iter(|| range_finder(black_box(&h), k, 1).expect("range")));
    }
    group.finish();
}

fn bench_precompute(c: &mut Criterion) {
    let ds = dataset(2_000);
    let p = locality_partition(&ds.graph, 10, 1).expect("partition");
    let cfg = PrecomputeConfig::new(vec![16, 16, 16], 1);
    let mut group = c.benchmark_group("precompute");
    group.sample_size(10);
    group.bench_function("10_batches", |b| {
        b.iter(|| precompute_all(&ds.graph, &ds.features, &p, Arch::Gcn, black_box(&cfg)).expect("precompute"))
    });
    group.finish();
}

criterion_group!(benches, bench_spmm, bench_forward, bench_range_finder, bench_precompute);
criterion_main!(benches);
