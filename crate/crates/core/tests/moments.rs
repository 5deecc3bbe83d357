mod common;

use std::f64::consts::PI;

use common::*;
use nalgebra::DMatrix;
use wellctl_core::moments::*;
use wellctl_core::numerics::C64;
use wellctl_core::{ControlSignal, WellError};

fn opts() -> MomentOptions {
    MomentOptions::default()
}

#[test]
fn pair_frequencies() {
    let f = build_frequency_set(3, 6, 1.0, &IndexSet::Canonical).unwrap();
    let n = f.index_of((1, 2)).unwrap();
    assert!((f.entries[n].omega - 3.0 * PI * PI).abs() < 1e-12);
    assert!((3.0 * PI * PI - 29.6088).abs() < 1e-4);
    assert_eq!(f.entries[0].n, 0);
    assert_eq!(f.entries[0].omega, 0.0);
    assert_eq!(f.entries[0].pairs, vec![(3, 3)]);
    assert!(f.omegas().windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn collision_groups_share_one_frequency() {
    let f = build_frequency_set(2, 9, 1.0, &IndexSet::Pairs(vec![(1, 7), (4, 8), (1, 2)])).unwrap();
    let c = f.collisions();
    assert_eq!(c.len(), 1);
    assert!((c[0].omega - 48.0 * PI * PI).abs() < 1e-10);
    assert!(c[0].pairs.contains(&(1, 7)) && c[0].pairs.contains(&(4, 8)));

    let bad = MomentTargets::from_pairs(&f, &[((1, 7), C64::new(1.0, 0.0)), ((4, 8), C64::new(2.0, 0.0))]);
    assert!(matches!(bad, Err(WellError::Input(_))));
}

#[test]
fn pairs_outside_the_truncation_are_rejected() {
    let r = build_frequency_set(2, 5, 1.0, &IndexSet::Pairs(vec![(1, 6)]));
    assert!(matches!(r, Err(WellError::Input(_))));
    let r = build_frequency_set(2, 5, 1.0, &IndexSet::Pairs(vec![(3, 2)]));
    assert!(matches!(r, Err(WellError::Input(_))));
}

#[test]
fn zero_targets_give_zero_control() {
    let f = build_frequency_set(3, 6, 1.0, &IndexSet::Canonical).unwrap();
    let v = solve_moments(&f, &MomentTargets::zeros(f.len()), 200, &opts()).unwrap();
    assert!(v.values.iter().all(|x| *x == 0.0));
}

#[test]
fn random_targets_round_trip() {
    let f = build_frequency_set(3, 6, 1.0, &IndexSet::Canonical).unwrap();
    let mut r = rng(21);
    let mut d: Vec<C64> = (0..f.len()).map(|_| C64::new(uniform(&mut r, -1.0, 1.0), uniform(&mut r, -1.0, 1.0))).collect();
    d[0].im = 0.0;
    let targets = MomentTargets { d };
    let v = solve_moments(&f, &targets, 2000, &opts()).unwrap();
    let norm = targets.d.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let check = verify_moments(&v, &f, Some(&targets));
    assert!(check.max_residual() <= 1e-8 * (1.0 + norm), "{}", check.max_residual());

    // The solution is minimal: adding anything orthogonal to all exponentials only grows it.
    let again = solve_moments(&f, &MomentTargets { d: check.moments.clone() }, 2000, &opts()).unwrap();
    let diff: f64 = v.values.iter().zip(&again.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-8);
}

#[test]
fn single_zero_frequency_gives_a_constant() {
    let f = FrequencySet::from_omegas(&[0.0], 0.8);
    let v = solve_moments(&f, &MomentTargets { d: vec![C64::new(0.4, 0.0)] }, 16, &opts()).unwrap();
    assert!(v.values.iter().all(|x| (x - 0.5).abs() < 1e-13));
}

#[test]
fn moments_of_simple_signals() {
    let f = FrequencySet::from_omegas(&[0.0, 3.0 * PI * PI, 8.0 * PI * PI], 1.0);
    let zero = verify_moments(&ControlSignal::zeros(1.0, 10), &f, None);
    assert!(zero.moments.iter().all(|z| z.norm() == 0.0));

    let w = 3.0 * PI * PI;
    let t = 2.0 * PI / w * 5.0;
    let v = ControlSignal::from_fn_midpoint(t, 20000, |s| (w * s).cos());
    let m = v.moment(w);
    assert!((m - C64::new(t / 2.0, 0.0)).norm() < 1e-6, "{m}");
}

#[test]
fn projection_onto_vt() {
    let t = 0.9;
    let k = 8;
    let mut r = rng(22);
    let v = random_control(&mut r, t, 900, 12, 1.0);
    let p = project_vt(&v, k, &opts()).unwrap();
    let omegas: Vec<f64> = (1..=k).map(|k| ((k * k - 1) as f64) * PI * PI).collect();
    let f = FrequencySet::from_omegas(&omegas, t);
    let check = verify_moments(&p, &f, None);
    assert!(check.moments.iter().all(|z| z.norm() <= 1e-10));

    let pp = project_vt(&p, k, &opts()).unwrap();
    let diff = p.values.iter().zip(&pp.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-10);

    // A pure tone at λ₂ − λ₁ lies almost entirely in the removed span.
    let tone = ControlSignal::from_fn_midpoint(t, 900, |s| (3.0 * PI * PI * s).cos());
    let pt = project_vt(&tone, k, &opts()).unwrap();
    assert!(pt.l2_norm() < 0.05 * tone.l2_norm(), "{}", pt.l2_norm() / tone.l2_norm());
}

/// Conjugate-closed Gram of {0, ±ω} on [0, T] in closed form.
fn gram3(w: f64, t: f64) -> DMatrix<C64> {
    let g = |a: f64| if a == 0.0 { C64::new(t, 0.0) } else { (C64::new(0.0, a * t).exp() - 1.0) / C64::new(0.0, a) };
    let f = [0.0, w, -w];
    DMatrix::from_fn(3, 3, |a, b| g(f[b] - f[a]))
}

#[test]
fn gram_conditioning() {
    assert!((gram_condition(&FrequencySet::from_omegas(&[0.0], 1.3)) - 1.0).abs() < 1e-12);

    // ωT = 6π: the three exponentials are exactly orthogonal on [0, 2/π].
    let w = 3.0 * PI * PI;
    let t = 2.0 / PI;
    assert!((gram_condition(&FrequencySet::from_omegas(&[0.0, w], t)) - 1.0).abs() < 1e-12);

    for t in [0.05, 0.13, 0.5] {
        let ev = gram3(w, t).symmetric_eigenvalues();
        let want = ev.max() / ev.min();
        let got = gram_condition(&FrequencySet::from_omegas(&[0.0, w], t));
        assert!(got > 1.0 && got.is_finite());
        assert!((got - want).abs() < 1e-9 * want, "{got} vs {want}");
    }

    assert!(gram_condition(&FrequencySet::from_omegas(&[w, w], t)).is_infinite());
}

#[test]
fn close_frequencies_on_a_short_window_are_ill_conditioned() {
    let f = FrequencySet::from_omegas(&[100.0, 100.001], 0.05);
    let d = vec![C64::new(1.0, 0.0), C64::new(0.0, 1.0)];
    match solve_moments(&f, &MomentTargets { d: d.clone() }, 200, &opts()) {
        Err(WellError::IllConditioned { cond, .. }) => assert!(cond > 1e10),
        other => panic!("expected ill-conditioning, got {other:?}"),
    }
    let ridge = MomentOptions { ridge: 1e-6, ..opts() };
    assert!(solve_moments(&f, &MomentTargets { d }, 200, &ridge).is_ok());
}

#[test]
fn problem_json_round_trip() {
    let f = FrequencySet::from_omegas(&[0.0, 30.0, 80.0], 1.5);
    let t = MomentTargets { d: vec![C64::new(1.0, 0.0), C64::new(0.5, -0.2), C64::new(0.0, 0.3)] };
    let p = MomentProblem::new(&f, &t);
    let s = serde_json::to_string(&p).unwrap();
    let back: MomentProblem = serde_json::from_str(&s).unwrap();
    let (f2, t2) = back.split().unwrap();
    assert_eq!(f2.omegas(), f.omegas());
    assert_eq!(t2, t);
    let unsorted = MomentProblem { omegas: vec![2.0, 1.0], targets: vec![[0.0; 2]; 2], t: 1.0 };
    assert!(unsorted.split().is_err());
}
