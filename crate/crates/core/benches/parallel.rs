//! Rayon vs sequential execution of the three embarrassingly parallel loops:
//! the coercivity T-scan, the reachability trials and many local solves.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use wellctl_core::exec::Exec;
use wellctl_core::obstruction::{coercivity_scan, reachability_experiment, FormVariant, ReachabilityOptions};
use wellctl_core::reference::*;
use wellctl_core::spectral::{BasisSpec, CouplingData, Dipole};

const MODES: [(&str, Exec); 2] = [("rayon", Exec::Auto), ("sequential", Exec::Sequential)];

fn scan(c: &mut Criterion) {
    let data = CouplingData::build(&Dipole::cubic(), BasisSpec::new(48), 3).unwrap();
    let grid: Vec<f64> = (1..=8).map(|i| 0.01 * i as f64).collect();
    let mut g = c.benchmark_group("coercivity_scan");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| coercivity_scan(&data, FormVariant::N3, &grid, 192, 48, e).unwrap())
        });
    }
    g.finish();
}

fn reachability(c: &mut Criterion) {
    let data = CouplingData::build(&Dipole::cubic(), BasisSpec::new(20), 2).unwrap();
    let opts = ReachabilityOptions { trials: 32, intervals: 512, ..Default::default() };
    let mut g = c.benchmark_group("reachability");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| reachability_experiment(&data, 0.1, FormVariant::N2, &opts, e).unwrap())
        });
    }
    g.finish();
}

fn local_solves(c: &mut Criterion) {
    let data = CouplingData::build(&Dipole::cubic(), BasisSpec::new(16), 2).unwrap();
    let rf = build_reference(&data, 1e-2, 0.3, 0.2, 1.0, Variant::N2Delay, &ReferenceOptions::default()).unwrap();
    let ctl = LocalController::new(&rf, &data, &LocalOptions::default()).unwrap();
    let targets: Vec<_> = (0..8).map(|s| random_admissible_target(&rf, 1e-4, s)).collect();
    let mut g = c.benchmark_group("local_solves");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| b.iter(|| ctl.solve_many(&targets, e)));
    }
    g.finish();
}

criterion_group!(benches, scan, reachability, local_solves);
criterion_main!(benches);
