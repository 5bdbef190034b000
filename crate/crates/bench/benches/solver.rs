//! Benchmarks: the equilibrium solve across grid depths, the factor-system
//! backward pass in isolation, and the spike variance-rate machinery.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mveq_bench::{random_rate_market, solve_factors_for};
use mveq_core::lattice::GridMode;
use mveq_core::riccati::solve_equilibrium;
use mveq_core::verify::{spike_moment_tables, spike_variance_rate};

fn bench_equilibrium_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("equilibrium_solve");
    for n in [16usize, 64, 256] {
        let m = random_rate_market(n, GridMode::Recombining);
        group.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| {
            b.iter(|| solve_equilibrium(black_box(m)).expect("solve"));
        });
    }
    group.finish();
}

fn bench_factor_system(c: &mut Criterion) {
    let mut group = c.benchmark_group("factor_system");
    for n in [64usize, 256] {
        let m = random_rate_market(n, GridMode::Recombining);
        let sol = solve_equilibrium(&m).expect("solve");
        group.bench_with_input(BenchmarkId::from_parameter(n), &(m, sol), |b, (m, sol)| {
            b.iter(|| solve_factors_for(black_box(m), black_box(sol)));
        });
    }
    group.finish();
}

fn bench_spike_variance(c: &mut Criterion) {
    let mut group = c.benchmark_group("spike_variance");
    let m = random_rate_market(256, GridMode::Recombining);
    let tables = spike_moment_tables(&m).expect("tables");
    group.bench_function("tables_n256", |b| {
        b.iter(|| spike_moment_tables(black_box(&m)).expect("tables"));
    });
    for width in [1usize, 4, 8] {
        group.bench_with_input(BenchmarkId::new("rate_n256", width), &width, |b, &width| {
            b.iter(|| {
                spike_variance_rate(black_box(&m), black_box(&tables), (64, 20), width)
                    .expect("rate")
            });
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_equilibrium_solve,
    bench_factor_system,
    bench_spike_variance
);
criterion_main!(benches);
