//! Per-step cost of each filter on the default synthetic loop, and of a
//! single pose-proposal solve.

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use std::hint::black_box;

use nanoslam::data_eval::{run_algorithm, ReplayOptions};
use nanoslam::proposal::{solve, BatchItem};
use nanoslam::{Algorithm, FilterConfig, Gaussian, MeasurementModel, Pose, ProposalKind, ProposalStrategy, RangeBearing};
use nanoslam_bench::loop_run;

fn full_runs(c: &mut Criterion) {
    let (world, run) = loop_run(1);
    let cfg = FilterConfig { vehicle: world.vehicle, ..FilterConfig::default() };
    let opts = ReplayOptions { record_timing: false, ..ReplayOptions::default() };
    let mut group = c.benchmark_group("loop_500_steps");
    group.sample_size(10);
    for algo in Algorithm::ALL {
        group.bench_with_input(BenchmarkId::from_parameter(algo.as_str()), &algo, |b, &algo| {
            b.iter(|| run_algorithm(algo, &cfg, &run.events, world.start, 1, &opts).unwrap())
        });
    }
    group.finish();
}

fn proposal_solves(c: &mut Criterion) {
    let truth = Pose::new(0.4, -0.3, 0.12);
    let prior = Gaussian::new(
        DVector::from_vec(vec![0.0, 0.0, 0.0]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.05])),
    )
    .unwrap();
    let batch: Vec<BatchItem> = [(12.0, 5.0), (3.0, 9.0), (-6.0, -2.0), (8.0, -7.0)]
        .iter()
        .map(|&(x, y)| {
            let m = Vector2::new(x, y);
            BatchItem {
                z: RangeBearing.predict(&truth, &m).unwrap() + Vector2::new(0.3, -0.01),
                landmark_mean: m,
                landmark_cov: Matrix2::identity(),
            }
        })
        .collect();
    let r = nanoslam::NoiseConfig::default().measurement_cov();
    let mut group = c.benchmark_group("proposal_solve");
    for kind in [ProposalKind::Unscented, ProposalKind::NaturalGradient] {
        let strategy = ProposalStrategy::new(kind);
        group.bench_function(format!("{kind:?}"), |b| {
            b.iter_batched(
                || prior.clone(),
                |p| solve(black_box(&strategy), &p, &batch, &r, &RangeBearing).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, full_runs, proposal_solves);
criterion_main!(benches);
