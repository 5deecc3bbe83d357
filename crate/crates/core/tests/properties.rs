use nalgebra::DMatrix;
use proptest::prelude::*;
use wellctl_core::dynamics::*;
use wellctl_core::exec::{self, Exec};
use wellctl_core::linear::check_obstruction_identity;
use wellctl_core::moments::*;
use wellctl_core::numerics::C64;
use wellctl_core::reference::{phase_delay_solve, Variant};
use wellctl_core::spectral::*;
use wellctl_core::ControlSignal;

fn signal(t: f64, values: Vec<f64>) -> ControlSignal {
    ControlSignal::piecewise_constant(t, values)
}

fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn gram_matrix_is_conserved(
        t in 0.05f64..1.5,
        values in prop::collection::vec(-5.0f64..5.0, 4..40),
        n in 1usize..=3,
    ) {
        let data = CouplingData::build(&Dipole::cubic(), BasisSpec::new(10), n).unwrap();
        let psi0 = StateFrame::eigenstates(n, 10);
        let end = propagate_endpoint(&psi0, &signal(t, values), &data).unwrap();
        prop_assert!(max_abs(&(end.gram() - psi0.gram())) < 1e-10);
    }

    #[test]
    fn moment_solutions_reproduce_their_targets(
        re in prop::collection::vec(-1.0f64..1.0, 6),
        im in prop::collection::vec(-1.0f64..1.0, 6),
        t in 0.5f64..2.0,
    ) {
        let f = build_frequency_set(2, 4, t, &IndexSet::Canonical).unwrap();
        let mut d: Vec<C64> = re.iter().zip(&im).take(f.len()).map(|(a, b)| C64::new(*a, *b)).collect();
        d[0].im = 0.0;
        let targets = MomentTargets { d };
        let v = solve_moments(&f, &targets, 600, &MomentOptions::default()).unwrap();
        let norm = targets.d.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        prop_assert!(verify_moments(&v, &f, Some(&targets)).max_residual() <= 1e-8 * (1.0 + norm));
    }

    #[test]
    fn vt_projection_is_idempotent(values in prop::collection::vec(-2.0f64..2.0, 64..200), t in 0.5f64..1.5) {
        let v = signal(t, values);
        let p = project_vt(&v, 5, &MomentOptions::default()).unwrap();
        let pp = project_vt(&p, 5, &MomentOptions::default()).unwrap();
        let diff = p.values.iter().zip(&pp.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = p.values.iter().map(|a| a.abs()).fold(1.0, f64::max);
        prop_assert!(diff <= 1e-9 * scale);
        prop_assert!(p.l2_norm() <= v.l2_norm() * (1.0 + 1e-12));
    }

    #[test]
    fn obstruction_identities_hold(values in prop::collection::vec(-3.0f64..3.0, 2..60), t in 0.01f64..3.0) {
        let data = CouplingData::build(&Dipole::cubic(), BasisSpec::new(6), 2).unwrap();
        let (a, b) = check_obstruction_identity(&signal(t, values), &data).unwrap();
        prop_assert!(a <= 1e-12 && b <= 1e-12);
    }

    #[test]
    fn multiplication_transform_round_trips(sigma in -3.0f64..3.0, a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let spec = BasisSpec::new(12);
        let mu = Dipole::poly(&[a, b, 0.0, 1.0]);
        let frame = StateFrame::free_eigenstates(3, 12, 0.2);
        let fwd = aux_transform(&frame, sigma, &mu, spec, Direction::Forward).unwrap();
        let back = aux_transform(&fwd, sigma, &mu, spec, Direction::Inverse).unwrap();
        prop_assert!(max_abs(&(&back.coeffs - &frame.coeffs)) < 1e-10);
    }

    #[test]
    fn weighted_norm_is_a_norm(
        x in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 8),
        y in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 8),
        s in -4.0f64..4.0,
    ) {
        let x: Vec<C64> = x.into_iter().map(|(a, b)| C64::new(a, b)).collect();
        let y: Vec<C64> = y.into_iter().map(|(a, b)| C64::new(a, b)).collect();
        let sum: Vec<C64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let scaled: Vec<C64> = x.iter().map(|a| a * s).collect();
        prop_assert!(weighted_h3_norm(&sum) <= weighted_h3_norm(&x) + weighted_h3_norm(&y) + 1e-12);
        prop_assert!((weighted_h3_norm(&scaled) - s.abs() * weighted_h3_norm(&x)).abs() < 1e-9);
    }

    #[test]
    fn compatible_phases_are_always_resolved(t1 in 0.1f64..3.0, th1 in -3.0f64..3.0, th2 in -3.0f64..3.0, m in -2i32..=2) {
        let lambdas: Vec<f64> = (1..=3).map(eigenvalue).collect();
        let th3 = (8.0 * th2 - 5.0 * th1 + 2.0 * std::f64::consts::PI * m as f64) / 3.0;
        let pd = phase_delay_solve(&[th1, th2, th3], &lambdas, t1, Variant::N3PhaseDelay).unwrap();
        prop_assert!(pd.t_eta > t1);
        prop_assert!(pd.residuals.iter().all(|r| r.abs() <= 1e-10));
    }

    #[test]
    fn execution_modes_agree(xs in prop::collection::vec(-10.0f64..10.0, 0..100)) {
        let f = |x: &f64| x.sin() * x.exp();
        prop_assert_eq!(exec::map(Exec::Auto, &xs, f), exec::map(Exec::Sequential, &xs, f));
    }

    #[test]
    fn primitive_ends_at_the_integral(values in prop::collection::vec(-2.0f64..2.0, 1..50), t in 0.1f64..2.0) {
        let v = signal(t, values);
        let s = v.primitive();
        prop_assert!((s.eval(s.t_end()) - v.integral()).abs() < 1e-12);
        prop_assert_eq!(s.eval(0.0), 0.0);
    }
}
