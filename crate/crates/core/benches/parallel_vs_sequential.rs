//! Sequential vs rayon-backed execution of the data-parallel loops. Without
//! the `parallel` feature both arms run sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use scanid::dataio::ImageRgb;
use scanid::net::build_network;
use scanid::relmap::reliability_map_for;
use scanid::synthscan::{make_fingerprint, procedural_content, render_scan, NoiseLevels};
use scanid::Exec;

fn execs() -> Vec<(&'static str, Exec)> {
    let n = std::thread::available_parallelism().map_or(1, |n| n.get()).max(2);
    vec![("sequential", Exec::sequential()), ("parallel", Exec::with_workers(n).unwrap())]
}

fn inference(c: &mut Criterion) {
    let net = build_network(8, 1).unwrap();
    let patches: Vec<ImageRgb> = (0..32).map(|i| procedural_content(64, 64, i)).collect();
    let refs: Vec<&ImageRgb> = patches.iter().collect();
    let mut group = c.benchmark_group("predict_32_patches");
    group.sample_size(10);
    for (name, exec) in execs() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, exec| {
            b.iter(|| black_box(net.predict(&refs, exec).unwrap()))
        });
    }
    group.finish();
}

fn reliability(c: &mut Criterion) {
    let net = build_network(8, 1).unwrap();
    let img = procedural_content(128, 128, 5);
    let mut group = c.benchmark_group("map_128px_stride_16");
    group.sample_size(10);
    for (name, exec) in execs() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, exec| {
            b.iter(|| black_box(reliability_map_for(&img, &net, 16, 0, exec).unwrap()))
        });
    }
    group.finish();
}

fn rendering(c: &mut Criterion) {
    let fp = make_fingerprint(0, 3, NoiseLevels::default()).unwrap();
    let pages: Vec<ImageRgb> = (0..16).map(|i| procedural_content(256, 256, i)).collect();
    let mut group = c.benchmark_group("render_16_scans");
    group.sample_size(10);
    for (name, exec) in execs() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, exec| {
            b.iter(|| black_box(exec.try_map(pages.len(), |i| render_scan(&pages[i], &fp, i as u64, false)).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, inference, reliability, rendering);
criterion_main!(benches);
