mod common;

use common::*;
use nalgebra::DMatrix;
use wellctl_core::dynamics::*;
use wellctl_core::numerics::C64;
use wellctl_core::spectral::*;
use wellctl_core::ControlSignal;

const I: C64 = C64::new(0.0, 1.0);

fn cubic(k: usize, n: usize) -> CouplingData {
    CouplingData::build(&Dipole::cubic(), BasisSpec::new(k), n).unwrap()
}

fn max_diff(a: &StateFrame, b: &StateFrame) -> f64 {
    (&a.coeffs - &b.coeffs).iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Product of dense matrix exponentials, one per interval.
fn oracle_endpoint(psi0: &StateFrame, u: &ControlSignal, data: &CouplingData) -> DMatrix<C64> {
    let k = data.k_max;
    let mut x = psi0.coeffs.transpose();
    for &um in &u.values {
        let h = DMatrix::from_fn(k, k, |a, b| {
            let d = if a == b { data.lambdas[a] } else { 0.0 };
            C64::new(d - um * data.mu_mat[(a, b)], 0.0)
        });
        x = (h * (-I * u.dt)).exp() * x;
    }
    x.transpose()
}

#[test]
fn zero_control_gives_eigen_phases() {
    let data = cubic(10, 3);
    let t = 0.37;
    let tr = propagate(&StateFrame::eigenstates(3, 10), &ControlSignal::zeros(t, 50), &data, &PropagateOptions::default()).unwrap();
    let want = StateFrame::free_eigenstates(3, 10, t);
    assert!(max_diff(tr.last(), &want) < 1e-12);
    assert!((tr.last().t - t).abs() < 1e-15);
}

#[test]
fn exact_integrator_matches_matrix_exponential() {
    let data = cubic(12, 3);
    let mut r = rng(5);
    let u = random_control(&mut r, 0.4, 40, 4, 2.0);
    let psi0 = StateFrame::eigenstates(3, 12);
    let end = propagate_endpoint(&psi0, &u, &data).unwrap();
    let oracle = oracle_endpoint(&psi0, &u, &data);
    let err = (&end.coeffs - oracle).iter().map(|c| c.norm()).fold(0.0, f64::max);
    assert!(err < 1e-11, "{err}");
}

#[test]
fn midpoint_scheme_is_second_order() {
    let data = cubic(10, 2);
    let mut r = rng(6);
    let u = random_control(&mut r, 0.3, 30, 3, 3.0);
    let psi0 = StateFrame::eigenstates(2, 10);
    let exact = propagate_endpoint(&psi0, &u, &data).unwrap();
    let errs: Vec<f64> = [2usize, 4, 8]
        .iter()
        .map(|&s| {
            let opts = PropagateOptions { integrator: Integrator::Midpoint { substeps: s }, stride: usize::MAX, ..Default::default() };
            max_diff(propagate(&psi0, &u, &data, &opts).unwrap().last(), &exact)
        })
        .collect();
    let h: Vec<f64> = [2.0, 4.0, 8.0].iter().map(|s| 1.0 / s).collect();
    let slope = loglog_slope(&h, &errs);
    assert!((slope - 2.0).abs() < 0.2, "slope {slope}, errors {errs:?}");
}

#[test]
fn gram_and_norms_are_preserved() {
    let data = cubic(16, 3);
    let mut r = rng(7);
    let u = random_control(&mut r, 1.2, 600, 6, 1.0);
    let tr = propagate(&StateFrame::eigenstates(3, 16), &u, &data, &PropagateOptions::default()).unwrap();
    assert!(tr.meta.gram_drift < 1e-10 && tr.meta.norm_drift < 1e-10);
    let g = tr.last().gram();
    assert!((g - DMatrix::<C64>::identity(3, 3)).iter().all(|c| c.norm() < 1e-10));
}

#[test]
fn zero_source_reproduces_propagate() {
    let data = cubic(10, 2);
    let mut r = rng(8);
    let u = random_control(&mut r, 0.5, 100, 4, 1.0);
    let psi0 = StateFrame::eigenstates(2, 10);
    let a = propagate_with_source(&psi0, &u, &Source::zeros(100, 10, 2), &data).unwrap();
    let b = propagate_endpoint(&psi0, &u, &data).unwrap();
    assert!(max_diff(a.last(), &b) < 1e-10);
}

#[test]
fn scalar_source_in_the_first_mode() {
    let data = cubic(8, 1);
    let t = 0.8;
    let intervals = 40;
    let u = ControlSignal::zeros(t, intervals);
    let mut f = Source::zeros(intervals, 8, 1);
    let g = |s: f64| (3.0 * s).cos() + 0.5 * s;
    let mut integral = 0.0;
    for m in 0..intervals {
        let gm = g((m as f64 + 0.5) * u.dt);
        f.values[m][(0, 0)] = C64::new(gm, 0.0);
        integral += gm * u.dt;
    }
    let psi0 = StateFrame::eigenstates(1, 8);
    let end = propagate_with_source(&psi0, &u, &f, &data).unwrap();
    let got = end.last().overlap_free(0, 1);
    assert!((got - (C64::new(1.0, 0.0) + I * integral)).norm() < 1e-12);
}

#[test]
fn resonant_source_accumulates_linearly() {
    let data = cubic(8, 1);
    let t = 0.6;
    let u = ControlSignal::zeros(t, 12);
    let mut f = Source::zeros(12, 8, 1);
    for v in f.values.iter_mut() {
        v[(1, 0)] = C64::new(1.0, 0.0);
    }
    let psi0 = StateFrame { t: 0.0, coeffs: DMatrix::zeros(1, 8) };
    let end = propagate_with_source(&psi0, &u, &f, &data).unwrap();
    let want = StateFrame::free_eigenstates(2, 8, t).coeffs.row(1).map(|c| c * I * t);
    let err = (end.last().coeffs.row(0) - want).iter().map(|c| c.norm()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

fn reference(data: &CouplingData, u: &ControlSignal, n: usize) -> Trajectory {
    propagate(&StateFrame::eigenstates(n, data.k_max), u, data, &PropagateOptions::default()).unwrap()
}

#[test]
fn linearization_of_nothing_is_nothing() {
    let data = cubic(10, 2);
    let mut r = rng(9);
    let u = random_control(&mut r, 0.5, 200, 4, 0.5);
    let refr = reference(&data, &u, 2);
    let zero = StateFrame { t: 0.0, coeffs: DMatrix::zeros(2, 10) };
    let lin = propagate_linearized(&refr, &ControlSignal::zeros(0.5, 200), &zero, &data).unwrap();
    assert!(lin.frames.iter().all(|f| f.coeffs.iter().all(|c| c.norm() == 0.0)));
}

#[test]
fn linearization_preserves_the_tangent_gram() {
    let data = cubic(14, 3);
    let mut r = rng(10);
    let u = random_control(&mut r, 0.7, 350, 4, 0.8);
    let v = random_control(&mut r, 0.7, 350, 6, 1.0);
    let refr = reference(&data, &u, 3);
    let zero = StateFrame { t: 0.0, coeffs: DMatrix::zeros(3, 14) };
    let lin = propagate_linearized(&refr, &v, &zero, &data).unwrap();
    for (p, q) in lin.frames.iter().zip(&refr.frames).step_by(25) {
        // d/dε ⟨ψ^j, ψ^k⟩ = ⟨Ψ^j, ψ^k⟩ + ⟨ψ^j, Ψ^k⟩ = 0.
        let cross = &p.coeffs * q.coeffs.adjoint();
        let sym = &cross + cross.adjoint();
        assert!(sym.iter().all(|c| c.norm() < 1e-10));
    }
}

#[test]
fn linearization_matches_finite_differences() {
    let data = cubic(12, 2);
    let mut r = rng(11);
    let u = random_control(&mut r, 0.5, 250, 4, 0.7);
    let v = random_control(&mut r, 0.5, 250, 4, 1.0);
    let psi0 = StateFrame::eigenstates(2, 12);
    let refr = reference(&data, &u, 2);
    let zero = StateFrame { t: 0.0, coeffs: DMatrix::zeros(2, 12) };
    let lin = propagate_linearized(&refr, &v, &zero, &data).unwrap();
    let eps = [1e-3, 5e-4, 2.5e-4];
    let errs: Vec<f64> = eps
        .iter()
        .map(|&e| {
            let mut w = u.clone();
            w.add_scaled(&v, e);
            let end = propagate_endpoint(&psi0, &w, &data).unwrap();
            let fd = (&end.coeffs - &refr.last().coeffs) / C64::new(e, 0.0);
            (fd - &lin.last().coeffs).iter().map(|c| c.norm()).fold(0.0, f64::max)
        })
        .collect();
    let slope = loglog_slope(&eps, &errs);
    assert!((slope - 1.0).abs() < 0.1, "slope {slope}");
}

#[test]
fn auxiliary_system_without_drive_is_free() {
    let spec = BasisSpec::new(10);
    let aux = AuxMatrices::build(&Dipole::cubic(), spec);
    let s = ControlSignal::zeros(0.4, 20);
    let tr = propagate_auxiliary(&s, &aux, &StateFrame::eigenstates(3, 10), &PropagateOptions::default()).unwrap();
    assert!(max_diff(tr.last(), &StateFrame::free_eigenstates(3, 10, 0.4)) < 1e-12);
}

#[test]
fn multiplication_transform_is_unitary() {
    let spec = BasisSpec::new(16);
    let mu = Dipole::cubic();
    let mut r = rng(12);
    let data = cubic(16, 3);
    let u = random_control(&mut r, 0.3, 60, 3, 1.0);
    let frame = propagate_endpoint(&StateFrame::eigenstates(3, 16), &u, &data).unwrap();
    let same = aux_transform(&frame, 0.0, &mu, spec, Direction::Forward).unwrap();
    assert!(max_diff(&same, &frame) < 1e-14);
    let fwd = aux_transform(&frame, 0.7, &mu, spec, Direction::Forward).unwrap();
    let back = aux_transform(&fwd, 0.7, &mu, spec, Direction::Inverse).unwrap();
    assert!(max_diff(&back, &frame) < 1e-10);
    assert!((fwd.gram() - frame.gram()).iter().all(|c| c.norm() < 1e-12));
}

#[test]
fn csv_rows_cover_every_kept_frame() {
    let data = cubic(6, 2);
    let u = ControlSignal::zeros(0.1, 10);
    let opts = PropagateOptions { stride: 5, ..Default::default() };
    let tr = propagate(&StateFrame::eigenstates(2, 6), &u, &data, &opts).unwrap();
    assert_eq!(tr.frames.len(), 3);
    assert_eq!(tr.csv_rows().len(), 3 * 2 * 6);
}
