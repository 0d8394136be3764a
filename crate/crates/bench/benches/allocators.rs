use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mcra_bench::fixture;
use mcra_core::baselines::heuristic_allocate;
use mcra_core::ewmmse::{self, SolverOptions};
use std::hint::black_box;

const CELLS: [(usize, usize); 3] = [(10, 2), (20, 4), (30, 10)];

fn ewmmse_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("ewmmse");
    group.sample_size(20);
    for (d, m) in CELLS {
        let (data, _) = fixture(d, m, 4);
        let opts = SolverOptions::default();
        group.bench_with_input(BenchmarkId::from_parameter(format!("D{d}M{m}")), &data, |b, data| {
            b.iter(|| {
                for inst in &data.samples {
                    black_box(ewmmse::solve(inst, &data.config, &opts).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn gnn_inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("gnn");
    for (d, m) in CELLS {
        let (data, model) = fixture(d, m, 4);
        group.bench_with_input(BenchmarkId::from_parameter(format!("D{d}M{m}")), &data, |b, data| {
            b.iter(|| {
                for inst in &data.samples {
                    black_box(model.infer(inst).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn heuristic(c: &mut Criterion) {
    let (data, _) = fixture(30, 10, 4);
    c.bench_function("heuristic/D30M10", |b| {
        b.iter(|| {
            for inst in &data.samples {
                black_box(heuristic_allocate(inst, &data.config).unwrap());
            }
        })
    });
}

criterion_group!(benches, ewmmse_solve, gnn_inference, heuristic);
criterion_main!(benches);
