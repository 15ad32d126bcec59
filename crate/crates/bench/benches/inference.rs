use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use slicefield::cache::{build_cache_chunked, decode_points, decode_points_parallel, CacheStrategy};
use slicefield::model::forward;
use slicefield::train::{backward, BackwardOptions};
use slicefield_bench::model_fixture;
use std::hint::black_box;

fn build_and_decode(c: &mut Criterion) {
    let n = 16384;
    let (cfg, params, mesh) = model_fixture(n, 3);
    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    group.throughput(Throughput::Elements(n as u64));
    group.bench_function("forward_monolithic", |b| b.iter(|| forward(&params, black_box(&mesh), &cfg).unwrap()));
    for chunk in [2048usize, 8192] {
        group.bench_with_input(BenchmarkId::new("build_cache", chunk), &chunk, |b, &k| {
            b.iter(|| build_cache_chunked(&params, &cfg, black_box(&mesh), k, CacheStrategy::Carry).unwrap())
        });
    }
    let cache = build_cache_chunked(&params, &cfg, &mesh, 4096, CacheStrategy::Carry).unwrap();
    group.bench_function("decode", |b| b.iter(|| decode_points(&cache, &params, &cfg, black_box(&mesh)).unwrap()));
    group.bench_function("decode_parallel", |b| {
        b.iter(|| decode_points_parallel(&cache, &params, &cfg, black_box(&mesh), 256).unwrap())
    });
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let (cfg, params, mesh) = model_fixture(2048, 4);
    let mut group = c.benchmark_group("backward");
    group.sample_size(10);
    for checkpoint in [false, true] {
        let opts = BackwardOptions {
            attn: cfg.attn_options(),
            checkpoint,
        };
        group.bench_with_input(BenchmarkId::new("checkpoint", checkpoint), &opts, |b, &o| {
            b.iter_batched(|| mesh.clone(), |m| backward(&params, &m, &cfg, o).unwrap(), BatchSize::LargeInput)
        });
    }
    group.finish();
}

criterion_group!(benches, build_and_decode, training_step);
criterion_main!(benches);
