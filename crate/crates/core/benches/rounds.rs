//! Round-loop and Monte-Carlo benchmarks.
//!
//! The per-worker inner loops fan out over rayon when the default `parallel`
//! feature is on and run sequentially otherwise. To compare the two
//! backends, save a baseline from the parallel build and rerun against it
//! from the sequential build:
//!
//! ```text
//! cargo bench -p ef21-core --bench rounds -- --save-baseline parallel
//! cargo bench -p ef21-core --bench rounds --no-default-features -- --baseline parallel
//! ```

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use ef21_core::compressors::Compressor;
use ef21_core::data::fixtures;
use ef21_core::methods::{run_ef21, run_ef21_plus, InitScheme};
use ef21_core::problems::{seeded_rng, GlobalProblem, ProblemKind};

fn logistic_problem() -> GlobalProblem {
    let ds = fixtures::mushrooms_like();
    GlobalProblem::from_dataset(&ds, ProblemKind::LogisticNonconvex { lambda: 0.1 }, 20).unwrap()
}

fn bench_rounds(c: &mut Criterion) {
    let gp = logistic_problem();
    let comp = Compressor::top_k(1, gp.dim()).unwrap();
    let gamma = 1.0 / gp.smoothness();
    let x0 = vec![0.0; gp.dim()];

    c.bench_function("ef21_top1_mushrooms_20rounds", |b| {
        b.iter(|| {
            let trace = run_ef21(&gp, &x0, gamma, &comp, 20, 7, InitScheme::CompressG0).unwrap();
            black_box(trace.records.len())
        })
    });

    c.bench_function("ef21_plus_top1_mushrooms_20rounds", |b| {
        b.iter(|| {
            let trace = run_ef21_plus(&gp, &x0, gamma, &comp, 20, 7, false).unwrap();
            black_box(trace.records.len())
        })
    });
}

fn bench_contraction(c: &mut Criterion) {
    use ef21_core::compressors::contraction_estimate;
    let comp = Compressor::rand_k_scaled(4, 112).unwrap();
    c.bench_function("contraction_estimate_randk_1000_trials", |b| {
        b.iter(|| {
            let mut rng = seeded_rng(3);
            black_box(contraction_estimate(&comp, 112, 1000, &mut rng))
        })
    });
}

criterion_group!(benches, bench_rounds, bench_contraction);
criterion_main!(benches);
