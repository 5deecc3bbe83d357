//! Return method at truncation scale: the η-family of reference trajectories,
//! controllability of the linearization around them, and the local Newton
//! inversion of the projected end-point map.
//!
//! Everything runs on one uniform grid of step `dt`; stage times are snapped
//! to grid nodes. The reference control lives on [0, T₁]; on (T₁, T^η] it is
//! identically zero and that tail is applied as an exact free evolution, so
//! T^η does not have to be a grid node.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::control::ControlSignal;
use crate::dynamics::{
    endpoint_sensitivity, free_evolve, propagate, propagate_basis, propagate_endpoint, PropagateOptions, StateFrame, Step,
    Trajectory,
};
use crate::error::{Result, WellError};
use crate::exec::{self, Exec};
use crate::linear::{synth_linear_control, DiagWeights, LinearTargets, SynthOptions};
use crate::moments::{min_norm_real, solve_moments_on, FrequencySet, IndexSet, MomentOptions, MomentTargets};
use crate::numerics::{exp_integral, sym_eigen, to_complex, wrap_residual, C64, I};
use crate::spectral::{weighted_h3_norm, CouplingData};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Three particles, exact up to a global phase and a delay.
    N3PhaseDelay,
    /// Two particles, up to a global phase at the original time.
    N2Phase,
    /// Two particles, exact after a delay.
    N2Delay,
}

impl Variant {
    pub fn n(self) -> usize {
        match self {
            Variant::N3PhaseDelay => 3,
            _ => 2,
        }
    }

    pub fn weights(self) -> DiagWeights {
        match self {
            Variant::N3PhaseDelay => DiagWeights::N3,
            Variant::N2Phase => DiagWeights::N2Phase,
            Variant::N2Delay => DiagWeights::N2Delay,
        }
    }

    pub fn has_tail(self) -> bool {
        self != Variant::N2Phase
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ReferenceOptions {
    /// Grid step shared by every stage.
    pub dt: f64,
    pub k_pump: usize,
    /// Modes k ≤ `stage1_modes` whose moments are zeroed in the stage-1 basis.
    pub stage1_modes: usize,
    pub stage1_inverse: Stage1Inverse,
    pub eta_max: f64,
    /// Largest Σ_j ‖ψ^j(T₀) − Φ_j(T₀)‖_{H³} accepted by stage 2.
    pub trust_radius: f64,
    /// Stage-1 tolerance on the checkpoint values.
    pub newton_tol: f64,
    /// Stage-2 tolerance (truncated H³ norm of the projections, phase functional).
    pub stage2_tol: f64,
    pub max_iter: usize,
    pub moments: MomentOptions,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        ReferenceOptions {
            dt: 1e-3,
            k_pump: 4,
            stage1_modes: 0,
            stage1_inverse: Stage1Inverse::MinNorm,
            eta_max: 0.05,
            trust_radius: 100.0,
            newton_tol: 1e-12,
            stage2_tol: 1e-9,
            max_iter: 20,
            moments: MomentOptions::default(),
        }
    }
}

fn snap(t: f64, dt: f64) -> usize {
    (t / dt).round() as usize
}

/// Damped Newton bookkeeping shared by the stages: accept a step when the
/// residual decreases, otherwise halve it (at most 8 times).
fn damped<S: Clone>(
    stage: &str,
    opts: &ReferenceOptions,
    mut state: S,
    residual: impl Fn(&S) -> Result<f64>,
    step: impl Fn(&S) -> Result<S>,
    combine: impl Fn(&S, &S, f64) -> S,
) -> Result<(S, Vec<f64>)> {
    let mut r = residual(&state)?;
    let mut history = vec![r];
    for _ in 0..opts.max_iter {
        if r <= opts.newton_tol {
            return Ok((state, history));
        }
        let target = step(&state)?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..8 {
            let cand = combine(&state, &target, lambda);
            let rc = residual(&cand)?;
            if rc < r {
                state = cand;
                r = rc;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        history.push(r);
        if !accepted {
            break;
        }
    }
    if r <= opts.newton_tol {
        Ok((state, history))
    } else {
        Err(WellError::NewtonFailed { stage: stage.into(), history })
    }
}

/// μ-expectations ⟨μψ^j, ψ^j⟩ of every row.
pub fn mu_expectations(frame: &StateFrame, data: &CouplingData) -> Vec<f64> {
    let m = to_complex(&data.mu_mat);
    (0..frame.n())
        .map(|j| {
            let c = frame.coeffs.row(j).transpose();
            let mc = &m * &c;
            c.iter().zip(mc.iter()).map(|(a, b)| (b * a.conj()).re).sum()
        })
        .collect()
}

/// Checkpoints (time, per-particle shift) of the first stage.
fn checkpoints(n: usize, eta: f64, eps: f64, eps1: f64) -> Vec<(f64, Vec<f64>)> {
    if n == 3 {
        vec![(eps1, vec![eta, 0.0, 0.0]), (eps, vec![0.0, eta, 0.0])]
    } else {
        let mut shift = vec![0.0; n];
        shift[0] = eta;
        vec![(eps, shift)]
    }
}

/// How the stage-1 Newton inverts the derivative of the checkpoint map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Inverse {
    /// Minimal-L² right inverse of the exact Jacobian on the grid.
    MinNorm,
    /// Newton on the coefficients of the two-window pump basis (moments at
    /// λ_K − λ_j, all other low moments zero).
    Pump,
}

/// Checkpoint values Θ (μ-expectation shifts, checkpoint-major) and, if asked,
/// their exact derivative rows with respect to the grid values of `u`.
fn stage1_map(
    u: &ControlSignal,
    start: &StateFrame,
    nodes: &[usize],
    a: usize,
    data: &CouplingData,
    with_rows: bool,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = start.n();
    let total = u.intervals();
    let mut theta = Vec::with_capacity(n * nodes.len());
    let mut rows = DMatrix::<f64>::zeros(if with_rows { n * nodes.len() } else { 0 }, total);
    let mmat = to_complex(&data.mu_mat);
    for (c, &node) in nodes.iter().enumerate() {
        let part = u.slice(0, node - a);
        if with_rows {
            let sens = endpoint_sensitivity(start, &part, data, None)?;
            let mc = &mmat * &sens.final_state;
            for j in 0..n {
                let e: f64 = mc.column(j).iter().zip(sens.final_state.column(j).iter()).map(|(x, y)| (x * y.conj()).re).sum();
                theta.push(e - data.m(j + 1, j + 1));
                for (m, blk) in sens.blocks.iter().enumerate() {
                    let s: C64 = mc.column(j).iter().zip(blk.column(j).iter()).map(|(x, y)| x * y.conj()).sum();
                    rows[(c * n + j, m)] = 2.0 * s.re;
                }
            }
        } else {
            let end = propagate_endpoint(start, &part, data)?;
            for (j, e) in mu_expectations(&end, data).iter().enumerate() {
                theta.push(e - data.m(j + 1, j + 1));
            }
        }
    }
    Ok((theta, rows))
}

/// Control on (ε/2, ε) shifting the diagonal μ-expectations by η at the
/// checkpoints (ε₁ and ε for N = 3, ε alone for N = 2), starting from the
/// free eigenstates at ε/2. Damped Newton with the exact Jacobian of the
/// truncated flow; see [`Stage1Inverse`] for the two derivative inverses.
pub fn stage1_control(
    data: &CouplingData,
    eta: f64,
    eps: f64,
    eps1: f64,
    k_pump: usize,
    opts: &ReferenceOptions,
) -> Result<ControlSignal> {
    let n = data.n;
    if !(eta >= 0.0) || eta > opts.eta_max {
        return Err(WellError::Precondition(format!("eta = {eta} outside the trust budget [0, {}]", opts.eta_max)));
    }
    if k_pump < n + 1 || k_pump > data.k_max {
        return Err(WellError::Input(format!("pump mode {k_pump} must lie in [N+1, K_max]")));
    }
    for j in 1..=n {
        if data.m(j, k_pump).abs() < 1e-14 {
            return Err(WellError::Unreachable(format!("⟨μφ_{j},φ_{k_pump}⟩ = 0")));
        }
    }
    let dt = opts.dt;
    let a = snap(0.5 * eps, dt);
    let cps = checkpoints(n, eta, eps, eps1);
    let nodes: Vec<usize> = cps.iter().map(|(t, _)| snap(*t, dt)).collect();
    let mut bounds = vec![a];
    bounds.extend(&nodes);
    if bounds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(WellError::Input("stage-1 windows are empty on this grid".into()));
    }
    let total = bounds[bounds.len() - 1] - a;
    let t0 = a as f64 * dt;
    let start = StateFrame::free_eigenstates(n, data.k_max, t0);
    let target: Vec<f64> = cps.iter().flat_map(|(_, s)| s.clone()).collect();
    let zero = ControlSignal::constant_on(t0, total as f64 * dt, vec![0.0; total]);
    if eta == 0.0 {
        return Ok(zero);
    }
    let misfit = |th: &[f64]| th.iter().zip(&target).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

    match opts.stage1_inverse {
        Stage1Inverse::MinNorm => {
            let resid = |u: &ControlSignal| -> Result<f64> { Ok(misfit(&stage1_map(u, &start, &nodes, a, data, false)?.0)) };
            let step = |u: &ControlSignal| -> Result<ControlSignal> {
                let (th, rows) = stage1_map(u, &start, &nodes, a, data, true)?;
                let f: Vec<f64> = th.iter().zip(&target).map(|(x, y)| x - y).collect();
                let (delta, _) = min_norm_real(&rows, &f, dt, &opts.moments, "stage-1 checkpoint map")?;
                let mut out = u.clone();
                for (x, d) in out.values.iter_mut().zip(&delta) {
                    *x -= d;
                }
                Ok(out)
            };
            let (u, _) = damped("stage1", opts, zero, resid, step, blend)?;
            Ok(u)
        }
        Stage1Inverse::Pump => {
            let basis = pump_basis(data, k_pump, &nodes, &bounds, dt, opts)?;
            let control_of = |g: &DVector<f64>| -> ControlSignal {
                let v = &basis * g;
                ControlSignal::constant_on(t0, total as f64 * dt, v.iter().copied().collect())
            };
            let resid =
                |g: &DVector<f64>| -> Result<f64> { Ok(misfit(&stage1_map(&control_of(g), &start, &nodes, a, data, false)?.0)) };
            let step = |g: &DVector<f64>| -> Result<DVector<f64>> {
                let (th, rows) = stage1_map(&control_of(g), &start, &nodes, a, data, true)?;
                let jac = rows * &basis;
                let f = DVector::from_iterator(th.len(), th.iter().zip(&target).map(|(x, y)| x - y));
                let delta = jac.lu().solve(&f).ok_or_else(|| WellError::Numerical("stage-1 Jacobian is singular".into()))?;
                Ok(g - delta)
            };
            let (g, _) = damped("stage1", opts, DVector::from_vec(target.clone()), resid, step, |a, b, l| a + (b - a) * l)?;
            Ok(control_of(&g))
        }
    }
}

fn blend(a: &ControlSignal, b: &ControlSignal, l: f64) -> ControlSignal {
    let mut out = a.clone();
    for (x, (y, z)) in out.values.iter_mut().zip(a.values.iter().zip(&b.values)) {
        *x = y + l * (z - y);
    }
    out
}

/// Columns: one control per (checkpoint c, particle j) carrying the moment
/// e^{i(λ_K−λ_j)t_c}/(2i⟨μφ_j,φ_K⟩²) at λ_K − λ_j on window c, its negative on
/// window c+1, and zero moments at every |λ_k − λ_l| with k ≤ `stage1_modes`.
fn pump_basis(
    data: &CouplingData,
    k_pump: usize,
    nodes: &[usize],
    bounds: &[usize],
    dt: f64,
    opts: &ReferenceOptions,
) -> Result<DMatrix<f64>> {
    let n = data.n;
    let mut modes: Vec<usize> = (1..=opts.stage1_modes.min(data.k_max)).collect();
    if !modes.contains(&k_pump) {
        modes.push(k_pump);
    }
    let mut keys: Vec<usize> = Vec::new();
    for j in 1..=n {
        for &k in &modes {
            let key = (k * k).abs_diff(j * j);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
    }
    keys.sort_unstable();
    let pump_keys: Vec<usize> = (1..=n).map(|j| k_pump * k_pump - j * j).collect();
    for (j, pk) in pump_keys.iter().enumerate() {
        let sharing = (1..=n)
            .flat_map(|jj| modes.iter().map(move |&k| (jj, k)))
            .filter(|&(jj, k)| (k * k).abs_diff(jj * jj) == *pk && !(jj == j + 1 && k == k_pump))
            .count();
        if sharing > 0 {
            return Err(WellError::Input(format!("pump frequency of particle {} collides with another mode", j + 1)));
        }
    }
    let pi2 = std::f64::consts::PI.powi(2);
    let omegas: Vec<f64> = keys.iter().map(|&k| k as f64 * pi2).collect();
    let total = bounds[bounds.len() - 1] - bounds[0];
    let windows = nodes.len();
    let mut basis = DMatrix::<f64>::zeros(total, windows * n);
    for c in 0..windows {
        for j in 1..=n {
            let w = data.lambda(k_pump) - data.lambda(j);
            let amp = C64::from_polar(1.0, w * nodes[c] as f64 * dt) / (2.0 * I * data.m(j, k_pump).powi(2));
            let idx = keys.iter().position(|&k| k == pump_keys[j - 1]).unwrap();
            for win in [c, c + 1] {
                if win >= windows {
                    continue;
                }
                let (lo, hi) = (bounds[win], bounds[win + 1]);
                let mut d = MomentTargets::zeros(omegas.len());
                d.d[idx] = if win == c { amp } else { -amp };
                let freqs = FrequencySet::from_omegas(&omegas, (hi - lo) as f64 * dt);
                let v = solve_moments_on(&freqs, &d, lo as f64 * dt, hi as f64 * dt, hi - lo, &opts.moments)
                    .map_err(|e| e.in_stage("stage1 basis"))?;
                for (m, x) in v.values.iter().enumerate() {
                    basis[(lo - bounds[0] + m, c * n + j - 1)] = *x;
                }
            }
        }
    }
    Ok(basis)
}

/// Im Π z_j^{w_j} with z_j = ⟨ψ^j(T), Φ_j(T)⟩ (conjugate powers for negative weights).
pub fn phase_functional(frame: &StateFrame, weights: DiagWeights) -> f64 {
    let mut p = C64::new(1.0, 0.0);
    for (j, &w) in weights.weights().iter().enumerate() {
        let z = frame.overlap_free(j, j + 1);
        let zz = if w >= 0.0 { z } else { z.conj() };
        p *= zz.powi(w.abs().round() as i32);
    }
    p.im
}

/// Residual of the stage-2 conditions: max over the projections P_j(ψ^j)
/// (truncated H³ norm) and the phase functional.
fn stage2_residual(end: &StateFrame, weights: DiagWeights) -> f64 {
    let mut r: f64 = phase_functional(end, weights).abs();
    for j in 0..end.n() {
        let row: Vec<C64> = (0..end.k()).map(|k| if k > j { end.coeffs[(j, k)] } else { C64::new(0.0, 0.0) }).collect();
        r = r.max(weighted_h3_norm(&row));
    }
    r
}

/// Control on (T₀, T_f) from `state` (at T₀) making ψ^j(T_f) ∈ span{Φ₁..Φ_j}
/// and cancelling the weighted phase product. Chord Newton whose derivative
/// inverse is the moment construction around the free trajectory.
pub fn stage2_control(
    state: &StateFrame,
    data: &CouplingData,
    t0: f64,
    tf: f64,
    variant: Variant,
    opts: &ReferenceOptions,
) -> Result<ControlSignal> {
    let n = variant.n();
    if state.n() != n || state.k() != data.k_max {
        return Err(WellError::Input("stage-2 state has the wrong shape".into()));
    }
    let free = StateFrame::free_eigenstates(n, data.k_max, t0);
    let dist: f64 = (0..n)
        .map(|j| weighted_h3_norm(&(state.coeffs.row(j) - free.coeffs.row(j)).iter().copied().collect::<Vec<_>>()))
        .sum();
    if dist > opts.trust_radius {
        return Err(WellError::Precondition(format!(
            "stage-2 start is {dist:.3e} from the eigenstates (trust radius {})",
            opts.trust_radius
        )));
    }
    let intervals = snap(tf - t0, opts.dt);
    if intervals == 0 {
        return Err(WellError::Input("stage-2 window is empty".into()));
    }
    let t0 = snap(t0, opts.dt) as f64 * opts.dt;
    let dur = intervals as f64 * opts.dt;
    let w = variant.weights();
    let synth = SynthOptions { k_trunc: data.k_max, intervals, moments: opts.moments };
    let u0 = ControlSignal::constant_on(t0, dur, vec![0.0; intervals]);
    let resid = |u: &ControlSignal| -> Result<f64> { Ok(stage2_residual(&propagate_endpoint(state, u, data)?, w)) };
    let step = |u: &ControlSignal| -> Result<ControlSignal> {
        let end = propagate_endpoint(state, u, data)?;
        let mut targets = LinearTargets::default();
        for j in 1..=n {
            for k in (j + 1)..=data.k_max {
                targets.entries.insert((j, k), -end.overlap_free(j - 1, k));
            }
        }
        targets.diag_combo = Some((w, -phase_functional(&end, w)));
        let du = synth_linear_control(&targets, data, n, t0, t0 + dur, None, &synth)?;
        let mut out = u.clone();
        out.add_scaled(&du, 1.0);
        Ok(out)
    };
    let o2 = ReferenceOptions { newton_tol: opts.stage2_tol, ..*opts };
    let (u, _) = damped("stage2", &o2, u0, resid, step, blend)?;
    Ok(u)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseDelay {
    pub t_eta: f64,
    pub theta_eta: f64,
    /// Representatives actually used (shifted by multiples of 2π).
    pub thetas: Vec<f64>,
    /// |θ_j + λ_j T^η − θ^η| modulo 2π (θ_j − θ^η for the phase-only variant).
    pub residuals: Vec<f64>,
}

/// Final time and global phase from the end phases ψ^j(T₁) = e^{−iθ_j}Φ_j(T₁).
pub fn phase_delay_solve(thetas: &[f64], lambdas: &[f64], t1: f64, variant: Variant) -> Result<PhaseDelay> {
    let n = variant.n();
    if thetas.len() != n || lambdas.len() < n {
        return Err(WellError::Input(format!("need {n} phases and eigenvalues")));
    }
    const TOL: f64 = 1e-8;
    let mut th = thetas.to_vec();
    let (l1, l2) = (lambdas[0], lambdas[1]);
    let period = TWO_PI / l1;
    let first_after = |base: f64| -> f64 { base + period * (((t1 - base) / period).floor() + 1.0) };
    let (t_eta, theta_eta) = match variant {
        Variant::N3PhaseDelay => {
            let s = 5.0 * th[0] - 8.0 * th[1] + 3.0 * th[2];
            if wrap_residual(s) > TOL {
                return Err(WellError::Precondition(format!("5θ₁ − 8θ₂ + 3θ₃ ≢ 0 mod 2π (off by {:.3e})", wrap_residual(s))));
            }
            let m = (s / TWO_PI).round();
            th[0] -= 2.0 * TWO_PI * m;
            th[2] += 3.0 * TWO_PI * m;
            let base = (th[0] - th[1]) / (l2 - l1);
            (first_after(base), (l2 * th[0] - l1 * th[1]) / (l2 - l1))
        }
        Variant::N2Delay => {
            if wrap_residual(4.0 * th[0] - th[1]) > TOL {
                return Err(WellError::Precondition(format!(
                    "4θ₁ − θ₂ ≢ 0 mod 2π (off by {:.3e})",
                    wrap_residual(4.0 * th[0] - th[1])
                )));
            }
            (first_after(-th[0] / l1), 0.0)
        }
        Variant::N2Phase => {
            if wrap_residual(th[0] - th[1]) > TOL {
                return Err(WellError::Precondition(format!("θ₁ − θ₂ ≢ 0 mod 2π (off by {:.3e})", wrap_residual(th[0] - th[1]))));
            }
            (t1, th[0])
        }
    };
    let residuals = (0..n)
        .map(|j| match variant {
            Variant::N2Phase => wrap_residual(thetas[j] - theta_eta),
            _ => wrap_residual(thetas[j] + lambdas[j] * t_eta - theta_eta),
        })
        .collect();
    Ok(PhaseDelay { t_eta, theta_eta, thetas: th, residuals })
}

/// Serializable description of a reference; the trajectory is recomputed on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMeta {
    pub variant: Variant,
    pub eta: f64,
    pub eps: f64,
    pub eps1: f64,
    #[serde(rename = "T1")]
    pub t1: f64,
    #[serde(rename = "T_eta")]
    pub t_eta: f64,
    pub theta_eta: f64,
    pub thetas: Vec<f64>,
    pub dt: f64,
    pub k_max: usize,
    pub checkpoint_residual: f64,
    pub endpoint_error: f64,
    pub phase_residuals: Vec<f64>,
    pub control_norm: f64,
    pub gram_drift: f64,
}

#[derive(Clone, Debug)]
pub struct ReferenceTrajectory {
    /// Reference control on [0, T₁] (zero on [0, ε/2]).
    pub control: ControlSignal,
    /// State at every grid node of `control`.
    pub traj: Trajectory,
    /// State at T^η after the free tail.
    pub end_state: StateFrame,
    pub meta: ReferenceMeta,
}

impl ReferenceTrajectory {
    pub fn n(&self) -> usize {
        self.end_state.n()
    }

    pub fn tail(&self) -> f64 {
        self.meta.t_eta - self.meta.t1
    }

    /// The prescribed endpoint: e^{−iθ^η}φ_j, or e^{−iθ^η}Φ_j(T₁) without a tail.
    pub fn expected_endpoint(&self) -> StateFrame {
        let n = self.n();
        let k = self.end_state.k();
        let mut f = if self.meta.variant.has_tail() {
            StateFrame::eigenstates(n, k)
        } else {
            StateFrame::free_eigenstates(n, k, self.meta.t1)
        };
        f.t = self.meta.t_eta;
        f.coeffs *= C64::from_polar(1.0, -self.meta.theta_eta);
        f
    }

    /// Rebuild from a stored control and metadata.
    pub fn from_parts(meta: ReferenceMeta, control: ControlSignal, data: &CouplingData) -> Result<ReferenceTrajectory> {
        let n = meta.variant.n();
        let opts = PropagateOptions { stride: 1, ..Default::default() };
        let traj = propagate(&StateFrame::eigenstates(n, data.k_max), &control, data, &opts)?;
        let end_state = free_evolve(traj.last(), meta.t_eta - meta.t1);
        Ok(ReferenceTrajectory { control, traj, end_state, meta })
    }
}

/// Largest deviation of the checkpoint μ-expectations from their prescribed values.
pub fn checkpoint_residual(traj: &Trajectory, data: &CouplingData, eta: f64, eps: f64, eps1: f64) -> f64 {
    let n = traj.frames[0].n();
    let dt = traj.control.dt;
    let mut r: f64 = 0.0;
    for (t, shift) in checkpoints(n, eta, eps, eps1) {
        let f = &traj.frames[snap(t, dt)];
        for (j, e) in mu_expectations(f, data).iter().enumerate() {
            r = r.max((e - data.m(j + 1, j + 1) - shift[j]).abs());
        }
    }
    r
}

/// Zero control on (0, ε/2), stage 1 on (ε/2, ε), stage 2 on (ε, T₁) and a
/// free tail to T^η.
pub fn build_reference(
    data: &CouplingData,
    eta: f64,
    eps: f64,
    eps1: f64,
    t1: f64,
    variant: Variant,
    opts: &ReferenceOptions,
) -> Result<ReferenceTrajectory> {
    let n = variant.n();
    if data.n != n {
        return Err(WellError::Input(format!("variant needs N = {n}, coupling data has N = {}", data.n)));
    }
    if !(eps > 0.0 && eps < t1) {
        return Err(WellError::Input("need 0 < ε < T₁".into()));
    }
    if n == 3 && !(eps1 > 0.5 * eps && eps1 < eps) {
        return Err(WellError::Input("need ε/2 < ε₁ < ε".into()));
    }
    let dt = opts.dt;
    let (a, e1, e, m1) = (snap(0.5 * eps, dt), snap(eps1, dt), snap(eps, dt), snap(t1, dt));
    if a == 0 || e <= a || m1 <= e || (n == 3 && (e1 <= a || e1 >= e)) {
        return Err(WellError::Input("stage times collapse on this grid; refine dt".into()));
    }
    let (eps, eps1, t1) = (e as f64 * dt, e1 as f64 * dt, m1 as f64 * dt);
    let s1 = stage1_control(data, eta, eps, eps1, opts.k_pump, opts).map_err(|x| x.in_stage("stage1"))?;
    let mid = propagate_endpoint(&StateFrame::free_eigenstates(n, data.k_max, a as f64 * dt), &s1, data)?;
    let s2 = stage2_control(&mid, data, eps, t1, variant, opts).map_err(|x| x.in_stage("stage2"))?;
    let zero = ControlSignal::constant_on(0.0, a as f64 * dt, vec![0.0; a]);
    let control = ControlSignal::concat(&[&zero, &s1, &s2]);
    let popts = PropagateOptions { stride: 1, ..Default::default() };
    let traj = propagate(&StateFrame::eigenstates(n, data.k_max), &control, data, &popts)?;
    let last = traj.last();
    let thetas: Vec<f64> = (0..n).map(|j| -last.overlap_free(j, j + 1).arg()).collect();
    let pd = phase_delay_solve(&thetas, &data.lambdas, t1, variant).map_err(|x| x.in_stage("phase"))?;
    let end_state = free_evolve(last, pd.t_eta - t1);
    let meta = ReferenceMeta {
        variant,
        eta,
        eps,
        eps1,
        t1,
        t_eta: pd.t_eta,
        theta_eta: pd.theta_eta,
        thetas,
        dt,
        k_max: data.k_max,
        checkpoint_residual: checkpoint_residual(&traj, data, eta, eps, eps1),
        endpoint_error: 0.0,
        phase_residuals: pd.residuals,
        control_norm: control.l2_norm(),
        gram_drift: traj.meta.gram_drift,
    };
    let mut out = ReferenceTrajectory { control, traj, end_state, meta };
    let expected = out.expected_endpoint();
    out.meta.endpoint_error = row_error(&out.end_state, &expected);
    if out.meta.endpoint_error > 1e-6 {
        return Err(WellError::Numerical(format!("reference endpoint off by {:.3e}", out.meta.endpoint_error)));
    }
    if out.meta.checkpoint_residual > 1e-9 * (1.0 + eta) {
        return Err(WellError::Numerical(format!("checkpoint conditions off by {:.3e}", out.meta.checkpoint_residual)));
    }
    Ok(out)
}

/// max_j ‖a^j − b^j‖_{L²}.
pub fn row_error(a: &StateFrame, b: &StateFrame) -> f64 {
    let d = &a.coeffs - &b.coeffs;
    (0..d.nrows()).map(|j| d.row(j).norm()).fold(0.0, f64::max)
}

fn index_pairs(n: usize, k: usize, index_set: &IndexSet) -> Vec<(usize, usize)> {
    match index_set {
        IndexSet::Canonical => {
            let mut p: Vec<_> = (1..=n).flat_map(|j| ((j + 1)..=k).map(move |kk| (j, kk))).collect();
            p.push((n, n));
            p
        }
        IndexSet::FirstParticle => (1..=k).map(|kk| (1, kk)).collect(),
        IndexSet::Pairs(p) => p.clone(),
    }
}

/// Samples of f_n^η(t) = ⟨μψ^j_ref, Φ^η_k⟩/⟨μφ_j, φ_k⟩ and f_{j,j}^η at the grid nodes of [0, T₁].
#[derive(Clone, Debug, Serialize)]
pub struct FrameFunctions {
    pub t: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub omegas: Vec<f64>,
    pub values: Vec<Vec<C64>>,
    /// f_{j,j} for j = 1..=N (f_{N,N} coincides with the (N, N) entry).
    pub diag: Vec<Vec<f64>>,
}

impl FrameFunctions {
    /// max |f_n(t) − e^{iω_n t}|.
    pub fn max_deviation_from_free(&self) -> f64 {
        let mut r: f64 = 0.0;
        for (p, w) in self.values.iter().zip(&self.omegas) {
            for (f, t) in p.iter().zip(&self.t) {
                r = r.max((f - C64::from_polar(1.0, w * t)).norm());
            }
        }
        r
    }
}

pub fn reference_frame_functions(rf: &ReferenceTrajectory, data: &CouplingData, index_set: &IndexSet) -> Result<FrameFunctions> {
    let n = rf.n();
    let pairs = index_pairs(n, data.k_max, index_set);
    for &(j, k) in &pairs {
        if j == 0 || j > n || k == 0 || k > data.k_max || data.m(j, k).abs() < 1e-14 {
            return Err(WellError::Input(format!("pair ({j},{k}) not usable for frame functions")));
        }
    }
    let us = propagate_basis(&rf.control, data);
    let mm = to_complex(&data.mu_mat);
    let t: Vec<f64> = (0..us.len()).map(|m| rf.control.node(m)).collect();
    let mut values = vec![Vec::with_capacity(us.len()); pairs.len()];
    let mut diag = vec![Vec::with_capacity(us.len()); n];
    for u in &us {
        let a = u.adjoint() * &mm * u;
        for (p, &(j, k)) in pairs.iter().enumerate() {
            values[p].push(a[(k - 1, j - 1)] / data.m(j, k));
        }
        for (j, d) in diag.iter_mut().enumerate() {
            d.push(a[(j, j)].re / data.m(j + 1, j + 1));
        }
    }
    let omegas = pairs.iter().map(|&(j, k)| data.lambda(k) - data.lambda(j)).collect();
    Ok(FrameFunctions { t, pairs, omegas, values, diag })
}

/// Exact derivative rows P_m = U(T)^† ∂c(T)/∂v_m (K×N) of ⟨Ψ^j(T), Φ^η_k(T)⟩
/// for controls supported on the first `intervals` intervals of the reference.
fn pulled_back_sensitivities(rf: &ReferenceTrajectory, data: &CouplingData, intervals: usize) -> Result<Vec<DMatrix<C64>>> {
    let n = rf.n();
    let u = rf.control.slice(0, intervals);
    let sens = endpoint_sensitivity(&StateFrame::eigenstates(n, data.k_max), &u, data, None)?;
    let mut big_u = DMatrix::<C64>::identity(data.k_max, data.k_max);
    for s in crate::dynamics::steps_for(&u, data) {
        big_u = s.apply(&big_u);
    }
    let ua = big_u.adjoint();
    Ok(sens.blocks.iter().map(|b| &ua * b).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct RieszGap {
    /// Largest singular value of J^η − J⁰ on L²(0, T) (real controls).
    pub gap: f64,
    /// Smallest nonzero singular value of J⁰ on the same window.
    pub margin: f64,
    pub remains_basis: bool,
}

fn largest_singular(rows: &DMatrix<f64>) -> (f64, f64) {
    let (ev, _) = sym_eigen(rows * rows.transpose());
    let max = ev.iter().cloned().fold(0.0, f64::max);
    let min = ev.iter().cloned().filter(|x| *x > 1e-14 * max).fold(f64::INFINITY, f64::min);
    (max.max(0.0).sqrt(), min.sqrt())
}

/// Operator gap between the perturbed and free moment maps on (0, T).
pub fn riesz_gap(rf: &ReferenceTrajectory, data: &CouplingData, t: f64) -> Result<RieszGap> {
    let n = rf.n();
    let dt = rf.control.dt;
    let m = snap(t, dt).min(rf.control.intervals());
    if m == 0 {
        return Err(WellError::Input("empty window".into()));
    }
    let p = pulled_back_sensitivities(rf, data, m)?;
    let pairs = index_pairs(n, data.k_max, &IndexSet::Canonical);
    let mut diff: Vec<Vec<f64>> = Vec::new();
    let mut free: Vec<Vec<f64>> = Vec::new();
    let scale = 1.0 / dt.sqrt();
    for &(j, k) in &pairs {
        let c = I * data.m(j, k);
        let w = data.lambda(k) - data.lambda(j);
        let eta_row: Vec<C64> = p.iter().map(|b| b[(k - 1, j - 1)] / c).collect();
        let free_row: Vec<C64> = (0..m).map(|i| exp_integral(w, i as f64 * dt, dt)).collect();
        let parts: &[fn(C64) -> f64] = if j == k { &[|z: C64| z.re] } else { &[|z: C64| z.re, |z: C64| z.im] };
        for part in parts {
            diff.push(eta_row.iter().zip(&free_row).map(|(a, b)| part(a - b) * scale).collect());
            free.push(free_row.iter().map(|b| part(*b) * scale).collect());
        }
    }
    let to_mat = |r: &Vec<Vec<f64>>| DMatrix::from_fn(r.len(), m, |a, b| r[a][b]);
    let (gap, _) = largest_singular(&to_mat(&diff));
    let (_, margin) = largest_singular(&to_mat(&free));
    Ok(RieszGap { gap, margin, remains_basis: gap < margin })
}

/// Perturbation target at T^η, one row per particle.
#[derive(Clone, Debug, PartialEq)]
pub struct XfTarget {
    pub t: f64,
    pub rows: DMatrix<C64>,
}

fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

impl XfTarget {
    /// Largest violation of Re⟨φ^j, ψ^j_ref⟩ = 0 and ⟨φ^j, ψ^k_ref⟩ = −conj⟨φ^k, ψ^j_ref⟩.
    pub fn invariant_residual(&self, rf: &ReferenceTrajectory) -> f64 {
        let n = self.rows.nrows();
        let phi: Vec<Vec<C64>> = (0..n).map(|j| self.rows.row(j).iter().copied().collect()).collect();
        let psi: Vec<Vec<C64>> = (0..n).map(|j| rf.end_state.row(j)).collect();
        let mut r: f64 = 0.0;
        for j in 0..n {
            r = r.max(inner(&phi[j], &psi[j]).re.abs());
            for k in 0..j {
                r = r.max((inner(&phi[j], &psi[k]) + inner(&phi[k], &psi[j]).conj()).norm());
            }
        }
        r
    }

    pub fn h3_norm(&self) -> f64 {
        (0..self.rows.nrows()).map(|j| weighted_h3_norm(&self.rows.row(j).iter().copied().collect::<Vec<_>>())).sum()
    }
}

/// The projections P̃_j onto X^f at T^η, applied row by row.
pub fn project_xf(rf: &ReferenceTrajectory, raw: &StateFrame) -> XfTarget {
    let n = rf.n();
    let psi: Vec<Vec<C64>> = (0..n).map(|j| rf.end_state.row(j)).collect();
    let phi: Vec<Vec<C64>> = (0..n).map(|j| raw.row(j)).collect();
    let k = raw.k();
    let mut rows = raw.coeffs.clone();
    for j in 0..n {
        let re = inner(&phi[j], &psi[j]).re;
        for c in 0..k {
            rows[(j, c)] -= psi[j][c] * re;
        }
        for l in 0..j {
            let coef = inner(&phi[j], &psi[l]) + inner(&psi[j], &phi[l]);
            for c in 0..k {
                rows[(j, c)] -= psi[l][c] * coef;
            }
        }
    }
    XfTarget { t: rf.meta.t_eta, rows }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LinearOptions {
    /// Condition number of the full family (with the diagonal functions)
    /// above which it is declared degenerate.
    pub degeneracy_threshold: f64,
    pub moments: MomentOptions,
}

impl Default for LinearOptions {
    fn default() -> Self {
        LinearOptions { degeneracy_threshold: 1e12, moments: MomentOptions { cond_threshold: 1e12, ridge: 0.0 } }
    }
}

/// Right inverse of the linearization around a reference, built once and
/// applied to many targets.
///
/// Rows are the exact derivatives of ⟨Ψ^j(T₁), Φ^η_k(T₁)⟩ for (j,k) ∈ 𝓘
/// (real and imaginary parts, imaginary only on the diagonal) followed by
/// Im⟨Ψ^j(T₁), ψ^j_ref(T₁)⟩ for j < N. The control is v₀ (minimal norm on
/// the 𝓘 rows) corrected along the dual functions g_{j,j} of the diagonal rows.
#[derive(Clone, Debug)]
pub struct LinearSynthesizer {
    rows: DMatrix<f64>,
    n_family: usize,
    /// Dual (biorthogonal) functions of the diagonal rows, one per j < N.
    pub duals: Vec<Vec<f64>>,
    pub family_cond: f64,
    pub full_cond: f64,
    dt: f64,
    t1: f64,
    tail: f64,
    n: usize,
    k: usize,
    u_adj: DMatrix<C64>,
    opts: LinearOptions,
}

impl LinearSynthesizer {
    pub fn new(rf: &ReferenceTrajectory, data: &CouplingData, opts: &LinearOptions) -> Result<LinearSynthesizer> {
        let n = rf.n();
        let k = data.k_max;
        let m = rf.control.intervals();
        let dt = rf.control.dt;
        let p = pulled_back_sensitivities(rf, data, m)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for j in 1..=n {
            for kk in (j + 1)..=k {
                rows.push(p.iter().map(|b| b[(kk - 1, j - 1)].re).collect());
                rows.push(p.iter().map(|b| b[(kk - 1, j - 1)].im).collect());
            }
        }
        rows.push(p.iter().map(|b| b[(n - 1, n - 1)].im).collect());
        let n_family = rows.len();
        for j in 1..n {
            rows.push(p.iter().map(|b| b[(j - 1, j - 1)].im).collect());
        }
        let r = DMatrix::from_fn(rows.len(), m, |a, b| rows[a][b]);
        let cond_of = |mat: &DMatrix<f64>| {
            let (ev, _) = sym_eigen(mat * mat.transpose() / dt);
            let max = ev.iter().cloned().fold(0.0, f64::max);
            let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
            if min > 0.0 { max / min } else { f64::INFINITY }
        };
        let family_cond = cond_of(&r.rows(0, n_family).into_owned());
        let full_cond = cond_of(&r);
        if !(family_cond <= opts.moments.cond_threshold) {
            return Err(WellError::IllConditioned { cond: family_cond, context: "moment family around the reference".into() });
        }
        if !(full_cond <= opts.degeneracy_threshold) {
            return Err(WellError::DegenerateFamily { cond: full_cond });
        }
        let gram = &r * r.transpose() / dt;
        let (ev, vecs) = sym_eigen(gram);
        let mut duals = Vec::new();
        for i in n_family..r.nrows() {
            let mut e = DVector::<f64>::zeros(r.nrows());
            e[i] = 1.0;
            let mut c = vecs.transpose() * e;
            for (a, x) in c.iter_mut().enumerate() {
                *x /= ev[a];
            }
            let y = &vecs * c;
            let g = r.transpose() * y / dt;
            duals.push(g.iter().copied().collect());
        }
        let mut big_u = DMatrix::<C64>::identity(k, k);
        for s in crate::dynamics::steps_for(&rf.control, data) {
            big_u = s.apply(&big_u);
        }
        Ok(LinearSynthesizer {
            rows: r,
            n_family,
            duals,
            family_cond,
            full_cond,
            dt,
            t1: rf.meta.t1,
            tail: rf.tail(),
            n,
            k,
            u_adj: big_u.adjoint(),
            opts: *opts,
        })
    }

    /// Right-hand sides of the rows for a target given at T^η.
    fn rhs(&self, target: &XfTarget) -> Vec<f64> {
        // ψ̃_f = e^{iA(T^η − T₁)}ψ_f, then coordinates against Φ^η_k(T₁) = U(T₁)φ_k.
        let lam: Vec<f64> = (1..=self.k).map(crate::spectral::eigenvalue).collect();
        let back = Step::free(&lam, -self.tail);
        let tilde = back.apply(&target.rows.transpose());
        let d = &self.u_adj * tilde; // K×N, d[(k,j)] = ⟨ψ̃^j, Φ^η_k⟩
        let mut b = Vec::with_capacity(self.rows.nrows());
        for j in 0..self.n {
            for kk in (j + 1)..self.k {
                b.push(d[(kk, j)].re);
                b.push(d[(kk, j)].im);
            }
        }
        b.push(d[(self.n - 1, self.n - 1)].im);
        for j in 0..self.n - 1 {
            b.push(d[(j, j)].im);
        }
        b
    }

    /// Control on [0, T₁] (zero on the tail) steering the linearization to `target`.
    pub fn solve(&self, target: &XfTarget) -> Result<ControlSignal> {
        if target.rows.nrows() != self.n || target.rows.ncols() != self.k {
            return Err(WellError::Input("target shape does not match the reference".into()));
        }
        let b = self.rhs(target);
        let fam = self.rows.rows(0, self.n_family).into_owned();
        let (mut v, _) = min_norm_real(&fam, &b[..self.n_family], self.dt, &self.opts.moments, "moment family around the reference")?;
        for (i, g) in self.duals.iter().enumerate() {
            let row = self.rows.row(self.n_family + i);
            let have: f64 = row.iter().zip(&v).map(|(a, x)| a * x).sum();
            let c = b[self.n_family + i] - have;
            for (x, y) in v.iter_mut().zip(g) {
                *x += c * y;
            }
        }
        Ok(ControlSignal::constant_on(0.0, self.t1, v))
    }
}

/// One-shot linear synthesis around `rf`.
pub fn linear_control_around_ref(
    rf: &ReferenceTrajectory,
    data: &CouplingData,
    target: &XfTarget,
    opts: &LinearOptions,
) -> Result<ControlSignal> {
    LinearSynthesizer::new(rf, data, opts)?.solve(target)
}

/// Endpoint at T^η of the linearization along `rf` under `v` (zero initial data).
pub fn linearized_endpoint(rf: &ReferenceTrajectory, v: &ControlSignal, data: &CouplingData) -> Result<StateFrame> {
    let n = rf.n();
    let zero = StateFrame { t: 0.0, coeffs: DMatrix::zeros(n, data.k_max) };
    let lin = crate::dynamics::propagate_linearized(&rf.traj, v, &zero, data)?;
    Ok(free_evolve(lin.last(), rf.tail()))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LocalOptions {
    /// Largest Σ_j ‖ψ^j_f − ψ^j_ref(T^η)‖_{H³} accepted.
    pub radius: f64,
    pub gram_tol: f64,
    pub newton_tol: f64,
    pub max_iter: usize,
    pub linear: LinearOptions,
}

impl Default for LocalOptions {
    fn default() -> Self {
        LocalOptions { radius: 1e-2, gram_tol: 1e-9, newton_tol: 1e-8, max_iter: 20, linear: LinearOptions::default() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LocalSolution {
    /// Control on [0, T₁]; zero on (T₁, T^η].
    pub control: ControlSignal,
    pub iterations: usize,
    pub history: Vec<f64>,
    pub endpoint_error: f64,
}

/// Reference plus its linear right inverse, reused across targets.
pub struct LocalController<'a> {
    pub reference: &'a ReferenceTrajectory,
    pub data: &'a CouplingData,
    pub synth: LinearSynthesizer,
    pub opts: LocalOptions,
}

impl<'a> LocalController<'a> {
    pub fn new(reference: &'a ReferenceTrajectory, data: &'a CouplingData, opts: &LocalOptions) -> Result<Self> {
        let synth = LinearSynthesizer::new(reference, data, &opts.linear)?;
        Ok(LocalController { reference, data, synth, opts: *opts })
    }

    pub fn endpoint(&self, u: &ControlSignal) -> Result<StateFrame> {
        let n = self.reference.n();
        let end = propagate_endpoint(&StateFrame::eigenstates(n, self.data.k_max), u, self.data)?;
        Ok(free_evolve(&end, self.reference.tail()))
    }

    /// Newton on u ↦ P̃(ψ_u(T^η)) from u_ref with the linear right inverse.
    pub fn solve(&self, targets: &StateFrame) -> Result<LocalSolution> {
        let rf = self.reference;
        let n = rf.n();
        if targets.n() != n || targets.k() != self.data.k_max {
            return Err(WellError::Input("target shape does not match the reference".into()));
        }
        let g = targets.gram();
        let gram_err = (0..n)
            .flat_map(|a| (0..n).map(move |b| (a, b)))
            .map(|(a, b)| (g[(a, b)] - if a == b { 1.0 } else { 0.0 }).norm())
            .fold(0.0, f64::max);
        if gram_err > self.opts.gram_tol {
            return Err(WellError::Compatibility(format!(
                "target Gram matrix differs from the initial one by {gram_err:.3e}"
            )));
        }
        let mut dist = 0.0;
        for j in 0..n {
            let d: Vec<C64> = (targets.coeffs.row(j) - rf.end_state.coeffs.row(j)).iter().copied().collect();
            dist += weighted_h3_norm(&d);
            if inner(&targets.row(j), &rf.end_state.row(j)).re <= 0.0 {
                return Err(WellError::Precondition(format!("Re⟨ψ_f^{}, ψ_ref(T^η)⟩ ≤ 0", j + 1)));
            }
        }
        if dist > self.opts.radius {
            return Err(WellError::Precondition(format!(
                "target is {dist:.3e} from the reference endpoint (radius {})",
                self.opts.radius
            )));
        }
        let goal = project_xf(rf, targets);
        let residual_of = |u: &ControlSignal| -> Result<(XfTarget, f64)> {
            let end = self.endpoint(u)?;
            let p = project_xf(rf, &end);
            let r = XfTarget { t: goal.t, rows: &goal.rows - &p.rows };
            let norm = r.h3_norm();
            Ok((r, norm))
        };
        let mut u = rf.control.clone();
        let (mut res, mut r) = residual_of(&u)?;
        let mut history = vec![r];
        let mut iterations = 0;
        while r > self.opts.newton_tol && iterations < self.opts.max_iter {
            let du = self.synth.solve(&res)?;
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..8 {
                let mut cand = u.clone();
                cand.add_scaled(&du, lambda);
                let (rc, nc) = residual_of(&cand)?;
                if nc < r {
                    u = cand;
                    res = rc;
                    r = nc;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            iterations += 1;
            history.push(r);
            if !accepted {
                break;
            }
        }
        let end = self.endpoint(&u)?;
        let endpoint_error = row_error(&end, targets);
        if r > self.opts.newton_tol || endpoint_error > 1e-6 {
            return Err(WellError::NewtonFailed { stage: "local".into(), history });
        }
        Ok(LocalSolution { control: u, iterations, history, endpoint_error })
    }
}

impl LocalController<'_> {
    /// Independent solves, one per target, in input order.
    pub fn solve_many(&self, targets: &[StateFrame], exec: Exec) -> Vec<Result<LocalSolution>> {
        exec::map(exec, targets, |t| self.solve(t))
    }
}

pub fn solve_local_control(
    rf: &ReferenceTrajectory,
    data: &CouplingData,
    targets: &StateFrame,
    opts: &LocalOptions,
) -> Result<LocalSolution> {
    LocalController::new(rf, data, opts)?.solve(targets)
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// exp(X)ψ_ref(T^η) for a random anti-Hermitian X with k⁻³-weighted entries,
/// scaled so that Σ_j ‖ψ_f^j − ψ_ref^j‖_{H³} ≈ `radius`. Orthonormality is exact.
pub fn random_admissible_target(rf: &ReferenceTrajectory, radius: f64, seed: u64) -> StateFrame {
    let mut rng = rng_for(seed);
    let k = rf.end_state.k();
    let mut h = DMatrix::<C64>::zeros(k, k);
    for p in 0..k {
        for q in p..k {
            let w = ((p.max(q) + 1) as f64).powi(-3);
            if p == q {
                h[(p, p)] = C64::new(gauss(&mut rng) * w, 0.0);
            } else {
                let z = C64::new(gauss(&mut rng), gauss(&mut rng)) * w;
                h[(p, q)] = z;
                h[(q, p)] = z.conj();
            }
        }
    }
    // First-order size of the rotation, used for scaling.
    let cols = rf.end_state.coeffs.transpose();
    let d = &h * &cols;
    let first: f64 = (0..rf.n()).map(|j| weighted_h3_norm(&d.column(j).iter().copied().collect::<Vec<_>>())).sum();
    let s = if first > 0.0 { radius / first } else { 0.0 };
    // e^{X} with X = −i s H.
    let rot = Step::from_hermitian(h * C64::new(s, 0.0), 1.0).apply(&cols);
    StateFrame { t: rf.end_state.t, coeffs: rot.transpose() }
}

/// Random element of X^f at T^η with the given truncated H³ size.
pub fn random_xf_target(rf: &ReferenceTrajectory, size: f64, seed: u64) -> XfTarget {
    let mut rng = rng_for(seed);
    let (n, k) = (rf.n(), rf.end_state.k());
    let raw = DMatrix::from_fn(n, k, |_, c| C64::new(gauss(&mut rng), gauss(&mut rng)) * ((c + 1) as f64).powi(-4));
    let mut x = project_xf(rf, &StateFrame { t: rf.meta.t_eta, coeffs: raw });
    let norm = x.h3_norm();
    if norm > 0.0 {
        x.rows *= C64::new(size / norm, 0.0);
    }
    x
}
