mod common;

use common::*;
use nalgebra::DMatrix;
use wellctl_core::dynamics::*;
use wellctl_core::linear::*;
use wellctl_core::moments::MomentOptions;
use wellctl_core::numerics::C64;
use wellctl_core::spectral::*;
use wellctl_core::{ControlSignal, WellError};

fn cubic(k: usize, n: usize) -> CouplingData {
    CouplingData::build(&Dipole::cubic(), BasisSpec::new(k), n).unwrap()
}

fn free_linearization(data: &CouplingData, v: &ControlSignal, n: usize) -> DMatrix<C64> {
    let k = data.k_max;
    let zero_u = ControlSignal::constant_on(v.t0, v.duration(), vec![0.0; v.intervals()]);
    let free = propagate(&StateFrame::eigenstates(n, k), &zero_u, data, &PropagateOptions::default()).unwrap();
    let zero = StateFrame { t: v.t0, coeffs: DMatrix::zeros(n, k) };
    let lin = propagate_linearized(&free, v, &zero, data).unwrap();
    let last = lin.last();
    DMatrix::from_fn(n, k, |j, kk| last.overlap_free(j, kk + 1))
}

#[test]
fn zero_direction_gives_zero_endpoint() {
    let data = cubic(8, 3);
    let p = first_order_endpoint(&ControlSignal::zeros(0.5, 10), &data, 3, 8);
    assert!(p.iter().all(|z| z.norm() == 0.0));
    assert_eq!(check_obstruction_identity(&ControlSignal::zeros(0.5, 10), &data).unwrap(), (0.0, 0.0));
}

#[test]
fn closed_form_agrees_with_propagation() {
    let data = cubic(12, 3);
    let mut r = rng(31);
    let v = random_control(&mut r, 0.6, 600, 6, 1.0);
    let closed = first_order_endpoint(&v, &data, 3, 12);
    let numeric = free_linearization(&data, &v, 3);
    let err = (closed - &numeric).iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");
    let (a, b) = obstruction_residuals(&numeric, &data);
    assert!(a < 1e-10 && b < 1e-10);
}

#[test]
fn obstruction_identities_hold_for_random_directions() {
    let data = cubic(10, 2);
    let mut r = rng(32);
    for _ in 0..10 {
        let t = uniform(&mut r, 0.1, 2.0);
        let size = uniform(&mut r, 0.1, 3.0);
        let v = random_control(&mut r, t, 300, 8, size);
        let (a, b) = check_obstruction_identity(&v, &data).unwrap();
        assert!(a <= 1e-12 && b <= 1e-12, "{a} {b}");
    }
}

fn opts(k: usize) -> SynthOptions {
    SynthOptions { k_trunc: k, intervals: 1000, moments: MomentOptions::default() }
}

#[test]
fn synthesis_with_no_targets_is_zero() {
    let data = cubic(8, 3);
    let v = synth_linear_control(&LinearTargets::default(), &data, 3, 0.0, 0.5, None, &opts(8)).unwrap();
    assert!(v.values.iter().all(|x| *x == 0.0));
}

#[test]
fn synthesized_control_hits_random_targets() {
    let k = 8;
    let data = cubic(k, 3);
    let mut r = rng(33);
    let mut targets = LinearTargets::default();
    for j in 1..=3 {
        for kk in (j + 1)..=k {
            targets.entries.insert((j, kk), C64::new(uniform(&mut r, -1e-2, 1e-2), uniform(&mut r, -1e-2, 1e-2)));
        }
    }
    let combo = uniform(&mut r, -1e-2, 1e-2);
    targets.diag_combo = Some((DiagWeights::N3, combo));
    let v = synth_linear_control(&targets, &data, 3, 0.0, 0.5, None, &opts(k)).unwrap();
    let end = free_linearization(&data, &v, 3);
    for (&(j, kk), want) in &targets.entries {
        assert!((end[(j - 1, kk - 1)] - want).norm() < 1e-6, "({j},{kk})");
    }
    let got: f64 = DiagWeights::N3.weights().iter().enumerate().map(|(j, w)| w * end[(j, j)].im).sum();
    assert!((got - combo).abs() < 1e-6);
}

#[test]
fn induced_and_unreachable_entries_are_rejected() {
    let data = cubic(8, 2);
    let mut t = LinearTargets::default();
    t.entries.insert((2, 1), C64::new(1e-3, 0.0));
    assert!(matches!(synth_linear_control(&t, &data, 2, 0.0, 0.5, None, &opts(8)), Err(WellError::Input(_))));

    let sym = CouplingData::build(&Dipole::poly(&[0.0, 1.0, -1.0]), BasisSpec::new(8), 2).unwrap();
    let mut t = LinearTargets::default();
    t.entries.insert((1, 2), C64::new(1e-3, 0.0));
    assert!(matches!(synth_linear_control(&t, &sym, 2, 0.0, 0.5, None, &opts(8)), Err(WellError::Unreachable(_))));
}

#[test]
fn diagonal_ratios_are_fixed_by_the_couplings() {
    let data = cubic(10, 3);
    let mut r = rng(34);
    let v = random_control(&mut r, 0.8, 400, 5, 1.0);
    let p = first_order_endpoint(&v, &data, 3, 10);
    let ratio = |j: usize| p[(j, j)] / data.m(j + 1, j + 1);
    assert!((ratio(0) - ratio(1)).norm() < 1e-12 && (ratio(1) - ratio(2)).norm() < 1e-12);
    assert!(p[(0, 0)].re.abs() < 1e-14);
}
