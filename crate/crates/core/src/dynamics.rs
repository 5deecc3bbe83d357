//! Galerkin propagation of the coupled system, its linearizations, the Duhamel
//! form with a source term and the auxiliary (gauge-transformed) system.
//!
//! Controls are piecewise constant on a uniform grid, so the truncated
//! Hamiltonian Λ − uM is constant on each interval and its exponential is
//! applied exactly through a symmetric eigendecomposition. Linearizations use
//! the exact Fréchet derivative of that exponential, which makes the
//! first-order closed forms hold to round-off inside the truncated model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::{ControlSignal, SignalKind};
use crate::error::{Result, WellError};
use crate::numerics::{phi1, sym_eigen, to_complex, C64, I};
use crate::spectral::{AuxMatrices, BasisSpec, CouplingData, Dipole};

/// Coefficients of (ψ¹, …, ψᴺ) in the eigenbasis at time `t`; row j is ψ^j.
#[derive(Clone, Debug, PartialEq)]
pub struct StateFrame {
    pub t: f64,
    pub coeffs: DMatrix<C64>,
}

impl StateFrame {
    /// (φ₁, …, φ_N) at time 0.
    pub fn eigenstates(n: usize, k: usize) -> StateFrame {
        StateFrame::free_eigenstates(n, k, 0.0)
    }

    /// (Φ₁(t), …, Φ_N(t)) with Φ_j(t) = φ_j e^{−iλ_j t}.
    pub fn free_eigenstates(n: usize, k: usize, t: f64) -> StateFrame {
        let mut c = DMatrix::zeros(n, k);
        for j in 0..n {
            c[(j, j)] = C64::from_polar(1.0, -crate::spectral::eigenvalue(j + 1) * t);
        }
        StateFrame { t, coeffs: c }
    }

    pub fn n(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn k(&self) -> usize {
        self.coeffs.ncols()
    }

    pub fn row(&self, j: usize) -> Vec<C64> {
        self.coeffs.row(j).iter().copied().collect()
    }

    /// ⟨ψ^j, ψ^k⟩.
    pub fn gram(&self) -> DMatrix<C64> {
        &self.coeffs * self.coeffs.adjoint()
    }

    /// ⟨ψ^j, Φ_k(t)⟩ with 1-based `k`.
    pub fn overlap_free(&self, j: usize, k: usize) -> C64 {
        self.coeffs[(j, k - 1)] * C64::from_polar(1.0, crate::spectral::eigenvalue(k) * self.t)
    }

    /// Max over rows of |a_K|, the last retained coefficient.
    pub fn tail_mass(&self) -> f64 {
        let k = self.k();
        (0..self.n()).map(|j| self.coeffs[(j, k - 1)].norm()).fold(0.0, f64::max)
    }

    /// Work layout used by the propagators: K×N, particles as columns.
    fn columns(&self) -> DMatrix<C64> {
        self.coeffs.transpose()
    }

    fn from_columns(t: f64, x: &DMatrix<C64>) -> StateFrame {
        StateFrame { t, coeffs: x.transpose() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Integrator {
    /// Exact exponential of the truncated Hamiltonian per interval
    /// (fourth-order commutator-free Magnus on piecewise-linear signals).
    Exact,
    /// Interaction-picture exponential midpoint: half free step, coupling
    /// exponential with the interval mean, half free step; second order.
    Midpoint { substeps: usize },
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator::Exact
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PropagateOptions {
    pub integrator: Integrator,
    /// Keep every `stride`-th node frame (the final frame is always kept).
    pub stride: usize,
    pub tail_threshold: f64,
}

impl Default for PropagateOptions {
    fn default() -> Self {
        PropagateOptions { integrator: Integrator::Exact, stride: 1, tail_threshold: 1e-9 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryMeta {
    pub integrator: Integrator,
    pub k_max: usize,
    pub intervals: usize,
    pub stride: usize,
    pub gram_drift: f64,
    pub norm_drift: f64,
    pub tail_mass: f64,
    /// Tail above threshold: rerun with 2·K_max is advised.
    pub tail_warning: bool,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub frames: Vec<StateFrame>,
    pub control: ControlSignal,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn last(&self) -> &StateFrame {
        self.frames.last().expect("non-empty trajectory")
    }

    /// CSV rows `t,j,k,re,im` (1-based j, k).
    pub fn csv_rows(&self) -> Vec<(f64, usize, usize, f64, f64)> {
        let mut out = Vec::new();
        for f in &self.frames {
            for j in 0..f.n() {
                for k in 0..f.k() {
                    let a = f.coeffs[(j, k)];
                    out.push((f.t, j + 1, k + 1, a.re, a.im));
                }
            }
        }
        out
    }
}

/// e^{−iH·dt} for one interval, stored through the eigendecomposition of H.
#[derive(Clone, Debug)]
pub(crate) enum Step {
    Diag { d: Vec<f64>, dt: f64 },
    Full { v: DMatrix<C64>, d: Vec<f64>, dt: f64 },
}

impl Step {
    pub(crate) fn free(lambdas: &[f64], dt: f64) -> Step {
        Step::Diag { d: lambdas.to_vec(), dt }
    }

    pub(crate) fn from_real(h: DMatrix<f64>, dt: f64) -> Step {
        let (d, v) = sym_eigen(h);
        Step::Full { v: to_complex(&v), d: d.iter().copied().collect(), dt }
    }

    pub(crate) fn from_hermitian(h: DMatrix<C64>, dt: f64) -> Step {
        let e = h.symmetric_eigen();
        Step::Full { v: e.eigenvectors, d: e.eigenvalues.iter().copied().collect(), dt }
    }

    /// Exact step of Λ − uM.
    pub(crate) fn coupled(data: &CouplingData, u: f64, dt: f64) -> Step {
        if u == 0.0 {
            return Step::free(&data.lambdas, dt);
        }
        let mut h = data.mu_mat.scale(-u);
        for k in 0..data.k_max {
            h[(k, k)] += data.lambdas[k];
        }
        Step::from_real(h, dt)
    }

    fn phases(d: &[f64], dt: f64) -> Vec<C64> {
        d.iter().map(|x| C64::from_polar(1.0, -x * dt)).collect()
    }

    /// E·x for a K×n block.
    pub(crate) fn apply(&self, x: &DMatrix<C64>) -> DMatrix<C64> {
        match self {
            Step::Diag { d, dt } => {
                let ph = Step::phases(d, *dt);
                let mut y = x.clone();
                for (r, p) in ph.iter().enumerate() {
                    y.row_mut(r).scale_mut_c(*p);
                }
                y
            }
            Step::Full { v, d, dt } => {
                let mut y = v.ad_mul(x);
                for (r, p) in Step::phases(d, *dt).iter().enumerate() {
                    y.row_mut(r).scale_mut_c(*p);
                }
                v * y
            }
        }
    }

    /// x·E for an n×K block (right multiplication).
    pub(crate) fn apply_right(&self, x: &DMatrix<C64>) -> DMatrix<C64> {
        match self {
            Step::Diag { d, dt } => {
                let ph = Step::phases(d, *dt);
                let mut y = x.clone();
                for (c, p) in ph.iter().enumerate() {
                    y.column_mut(c).scale_mut_c(*p);
                }
                y
            }
            Step::Full { v, d, dt } => {
                let mut y = x * v;
                for (c, p) in Step::phases(d, *dt).iter().enumerate() {
                    y.column_mut(c).scale_mut_c(*p);
                }
                y * v.adjoint()
            }
        }
    }

    fn basis(&self) -> (Option<&DMatrix<C64>>, &[f64], f64) {
        match self {
            Step::Diag { d, dt } => (None, d, *dt),
            Step::Full { v, d, dt } => (Some(v), d, *dt),
        }
    }

    /// Directional derivative of E = e^{−iHΔ} along a generator perturbation
    /// `g` = −i·δH, applied to x: ∫₀^Δ e^{−iH(Δ−s)} g e^{−iHs} ds · x.
    pub(crate) fn derivative(&self, g: &DMatrix<C64>, x: &DMatrix<C64>) -> DMatrix<C64> {
        let (v, d, dt) = self.basis();
        let (gp, xp) = match v {
            Some(v) => (v.ad_mul(&(g * v)), v.ad_mul(x)),
            None => (g.clone(), x.clone()),
        };
        let k = d.len();
        let mut w = gp;
        for p in 0..k {
            let ep = C64::from_polar(dt, -d[p] * dt);
            for q in 0..k {
                w[(p, q)] *= ep * phi1(C64::new(0.0, (d[p] - d[q]) * dt));
            }
        }
        let y = w * xp;
        match v {
            Some(v) => v * y,
            None => y,
        }
    }

    /// ∫₀^Δ e^{−iH(Δ−s)} e^{−iΛ(t₀+s)} ds · y for diagonal Λ (`lambdas`).
    fn source_integral(&self, lambdas: &[f64], t0: f64, y: &DMatrix<C64>) -> DMatrix<C64> {
        let (v, d, dt) = self.basis();
        let mut yy = y.clone();
        for (r, l) in lambdas.iter().enumerate() {
            yy.row_mut(r).scale_mut_c(C64::from_polar(1.0, -l * t0));
        }
        let k = d.len();
        match v {
            None => {
                for p in 0..k {
                    yy.row_mut(p).scale_mut_c(C64::from_polar(dt, -d[p] * dt));
                }
                yy
            }
            Some(v) => {
                let mut g = v.adjoint();
                for p in 0..k {
                    let ep = C64::from_polar(dt, -d[p] * dt);
                    for q in 0..k {
                        g[(p, q)] *= ep * phi1(C64::new(0.0, (d[p] - lambdas[q]) * dt));
                    }
                }
                v * (g * yy)
            }
        }
    }
}

trait ScaleC {
    fn scale_mut_c(&mut self, a: C64);
}

impl<R: nalgebra::Dim, Cc: nalgebra::Dim, S: nalgebra::StorageMut<C64, R, Cc>> ScaleC
    for nalgebra::Matrix<C64, R, Cc, S>
{
    fn scale_mut_c(&mut self, a: C64) {
        for x in self.iter_mut() {
            *x *= a;
        }
    }
}

const CF4_A1: f64 = 0.25 + 0.288_675_134_594_812_9; // 1/4 + √3/6
const CF4_A2: f64 = 0.25 - 0.288_675_134_594_812_9;
const GAUSS_1: f64 = 0.5 - 0.288_675_134_594_812_9; // 1/2 − √3/6
const GAUSS_2: f64 = 0.5 + 0.288_675_134_594_812_9;

/// Steps realizing one control interval, applied in order.
fn interval_steps(data: &CouplingData, u: &ControlSignal, m: usize) -> Vec<Step> {
    let (a, b) = u.ends(m);
    let dt = u.dt;
    if a == b {
        return vec![Step::coupled(data, a, dt)];
    }
    let u1 = a + (b - a) * GAUSS_1;
    let u2 = a + (b - a) * GAUSS_2;
    // exp(−iΔ(½Λ − wM)) = exp(−i(Δ/2)(Λ − 2wM))
    let w1 = CF4_A1 * u1 + CF4_A2 * u2;
    let w2 = CF4_A2 * u1 + CF4_A1 * u2;
    vec![Step::coupled(data, 2.0 * w1, 0.5 * dt), Step::coupled(data, 2.0 * w2, 0.5 * dt)]
}

fn check_dims(psi0: &StateFrame, data: &CouplingData) -> Result<()> {
    if psi0.k() != data.k_max {
        return Err(WellError::Input(format!("state has K = {}, coupling data K_max = {}", psi0.k(), data.k_max)));
    }
    Ok(())
}

fn finite(x: &DMatrix<C64>) -> Result<()> {
    if x.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
        Ok(())
    } else {
        Err(WellError::Numerical("integrator produced a non-finite state".into()))
    }
}

fn drift(g0: &DMatrix<C64>, g1: &DMatrix<C64>) -> (f64, f64) {
    let gram = (g1 - g0).iter().map(|c| c.norm()).fold(0.0, f64::max);
    let norm = (0..g0.nrows()).map(|j| (g1[(j, j)].re.sqrt() - g0[(j, j)].re.sqrt()).abs()).fold(0.0, f64::max);
    (gram, norm)
}

struct MidpointCache {
    v: DMatrix<C64>,
    d: DVector<f64>,
}

impl MidpointCache {
    fn new(data: &CouplingData) -> MidpointCache {
        let (d, v) = sym_eigen(data.mu_mat.clone());
        MidpointCache { v: to_complex(&v), d }
    }

    /// e^{−iΛh/2} e^{iūhM} e^{−iΛh/2} x
    fn step(&self, lambdas: &[f64], ubar: f64, h: f64, x: &DMatrix<C64>) -> DMatrix<C64> {
        let half = Step::free(lambdas, 0.5 * h);
        let mut y = self.v.ad_mul(&half.apply(x));
        for (r, dv) in self.d.iter().enumerate() {
            y.row_mut(r).scale_mut_c(C64::from_polar(1.0, ubar * h * dv));
        }
        half.apply(&(&self.v * y))
    }
}

/// Propagate the truncated nonlinear system from `psi0` under `u`.
pub fn propagate(psi0: &StateFrame, u: &ControlSignal, data: &CouplingData, opts: &PropagateOptions) -> Result<Trajectory> {
    check_dims(psi0, data)?;
    u.validate()?;
    let stride = opts.stride.max(1);
    let n_int = u.intervals();
    let mut x = psi0.columns();
    let g0 = psi0.gram();
    let mut frames = vec![StateFrame::from_columns(u.t0, &x)];
    let cache = match opts.integrator {
        Integrator::Midpoint { .. } => Some(MidpointCache::new(data)),
        Integrator::Exact => None,
    };
    for m in 0..n_int {
        match opts.integrator {
            Integrator::Exact => {
                for s in interval_steps(data, u, m) {
                    x = s.apply(&x);
                }
            }
            Integrator::Midpoint { substeps } => {
                let sub = substeps.max(1);
                let h = u.dt / sub as f64;
                let (a, b) = u.ends(m);
                for r in 0..sub {
                    let tm = (r as f64 + 0.5) / sub as f64;
                    let ubar = a + (b - a) * tm;
                    x = cache.as_ref().unwrap().step(&data.lambdas, ubar, h, &x);
                }
            }
        }
        if (m + 1) % stride == 0 || m + 1 == n_int {
            frames.push(StateFrame::from_columns(u.node(m + 1), &x));
        }
    }
    finite(&x)?;
    let last = frames.last().unwrap();
    let (gram_drift, norm_drift) = drift(&g0, &last.gram());
    let tail = last.tail_mass();
    Ok(Trajectory {
        meta: TrajectoryMeta {
            integrator: opts.integrator,
            k_max: data.k_max,
            intervals: n_int,
            stride,
            gram_drift,
            norm_drift,
            tail_mass: tail,
            tail_warning: tail > opts.tail_threshold,
        },
        frames,
        control: u.clone(),
    })
}

/// Final state only (exact integrator).
pub fn propagate_endpoint(psi0: &StateFrame, u: &ControlSignal, data: &CouplingData) -> Result<StateFrame> {
    check_dims(psi0, data)?;
    let mut x = psi0.columns();
    for m in 0..u.intervals() {
        for s in interval_steps(data, u, m) {
            x = s.apply(&x);
        }
    }
    finite(&x)?;
    Ok(StateFrame::from_columns(u.t_end(), &x))
}

/// Free evolution of a frame by `dt`.
pub fn free_evolve(frame: &StateFrame, dt: f64) -> StateFrame {
    let lambdas: Vec<f64> = (1..=frame.k()).map(crate::spectral::eigenvalue).collect();
    let x = Step::free(&lambdas, dt).apply(&frame.columns());
    StateFrame::from_columns(frame.t + dt, &x)
}

/// Propagator U(t_m) (K×K) at every node of `u`.
pub fn propagate_basis(u: &ControlSignal, data: &CouplingData) -> Vec<DMatrix<C64>> {
    let k = data.k_max;
    let mut x = DMatrix::<C64>::identity(k, k);
    let mut out = Vec::with_capacity(u.intervals() + 1);
    out.push(x.clone());
    for m in 0..u.intervals() {
        for s in interval_steps(data, u, m) {
            x = s.apply(&x);
        }
        out.push(x.clone());
    }
    out
}

fn require_constant(u: &ControlSignal, what: &str) -> Result<()> {
    if u.kind != SignalKind::PiecewiseConstant {
        return Err(WellError::Input(format!("{what} requires a piecewise-constant control")));
    }
    Ok(())
}

fn same_grid(a: &ControlSignal, b: &ControlSignal) -> Result<()> {
    if a.intervals() != b.intervals() || (a.dt - b.dt).abs() > 1e-12 * a.dt || (a.t0 - b.t0).abs() > 1e-12 {
        return Err(WellError::Input("reference and perturbation grids differ".into()));
    }
    Ok(())
}

/// Linearization of the truncated flow along `reference` (frames at every node)
/// in the direction `v`, starting from `psi0_lin`.
pub fn propagate_linearized(
    reference: &Trajectory,
    v: &ControlSignal,
    psi0_lin: &StateFrame,
    data: &CouplingData,
) -> Result<Trajectory> {
    require_constant(&reference.control, "linearization")?;
    require_constant(v, "linearization")?;
    same_grid(&reference.control, v)?;
    if reference.meta.stride != 1 || reference.frames.len() != v.intervals() + 1 {
        return Err(WellError::Input("reference trajectory must store every node".into()));
    }
    check_dims(psi0_lin, data)?;
    let gen = to_complex(&data.mu_mat).scale(1.0).map(|c| c * I);
    let mut x = psi0_lin.columns();
    let mut frames = vec![StateFrame::from_columns(v.t0, &x)];
    for m in 0..v.intervals() {
        let step = Step::coupled(data, reference.control.values[m], v.dt);
        let mut next = step.apply(&x);
        if v.values[m] != 0.0 {
            let psi = reference.frames[m].columns();
            next += step.derivative(&gen, &psi).scale(v.values[m]);
        }
        x = next;
        frames.push(StateFrame::from_columns(v.node(m + 1), &x));
    }
    finite(&x)?;
    Ok(Trajectory {
        meta: TrajectoryMeta {
            integrator: Integrator::Exact,
            k_max: data.k_max,
            intervals: v.intervals(),
            stride: 1,
            gram_drift: f64::NAN,
            norm_drift: f64::NAN,
            tail_mass: frames.last().unwrap().tail_mass(),
            tail_warning: false,
        },
        frames,
        control: v.clone(),
    })
}

/// Source term of the Duhamel form, one K×N block per control interval.
///
/// Values are interaction-frame amplitudes: on interval m the source is
/// f(t) = e^{−iΛt} f̂_m, so a constant f̂ = φ_k is the co-rotating Φ_k(t).
#[derive(Clone, Debug)]
pub struct Source {
    pub values: Vec<DMatrix<C64>>,
}

impl Source {
    pub fn zeros(intervals: usize, k: usize, n: usize) -> Source {
        Source { values: vec![DMatrix::zeros(k, n); intervals] }
    }
}

/// ψ(t) = e^{−iAt}ψ₀ + i∫₀ᵗ e^{−iA(t−τ)}[u μ ψ + f](τ) dτ, exact per interval.
pub fn propagate_with_source(
    psi0: &StateFrame,
    u: &ControlSignal,
    f: &Source,
    data: &CouplingData,
) -> Result<Trajectory> {
    require_constant(u, "source propagation")?;
    check_dims(psi0, data)?;
    if f.values.len() != u.intervals() {
        return Err(WellError::Input("source must have one block per control interval".into()));
    }
    let mut x = psi0.columns();
    let mut frames = vec![StateFrame::from_columns(u.t0, &x)];
    for m in 0..u.intervals() {
        let step = Step::coupled(data, u.values[m], u.dt);
        let mut next = step.apply(&x);
        let fm = &f.values[m];
        if fm.iter().any(|c| c.norm_sqr() > 0.0) {
            next += step.source_integral(&data.lambdas, u.node(m), fm).map(|c| c * I);
        }
        x = next;
        frames.push(StateFrame::from_columns(u.node(m + 1), &x));
    }
    finite(&x)?;
    Ok(Trajectory {
        meta: TrajectoryMeta {
            integrator: Integrator::Exact,
            k_max: data.k_max,
            intervals: u.intervals(),
            stride: 1,
            gram_drift: f64::NAN,
            norm_drift: f64::NAN,
            tail_mass: frames.last().unwrap().tail_mass(),
            tail_warning: false,
        },
        frames,
        control: u.clone(),
    })
}

/// Auxiliary system i∂ₜψ̃ = (Λ − i s G₁ + s² G₂) ψ̃ driven by the primitive `s`.
pub fn propagate_auxiliary(
    s: &ControlSignal,
    aux: &AuxMatrices,
    psi0: &StateFrame,
    opts: &PropagateOptions,
) -> Result<Trajectory> {
    s.validate()?;
    if s.kind == SignalKind::PiecewiseLinear && s.values[0] != 0.0 {
        return Err(WellError::Precondition("auxiliary system requires s(0) = 0".into()));
    }
    let k = aux.g1.nrows();
    if psi0.k() != k {
        return Err(WellError::Input("state and auxiliary matrices disagree on K".into()));
    }
    let lambdas: Vec<f64> = (1..=k).map(crate::spectral::eigenvalue).collect();
    let lam = DMatrix::from_diagonal(&DVector::from_vec(lambdas.clone()));
    let h_of = |a: f64, b: f64| -> DMatrix<C64> {
        // ½·(Λ weights folded by caller) − i a G₁ + b G₂
        DMatrix::from_fn(k, k, |p, q| C64::new(lam[(p, q)] + b * aux.g2[(p, q)], -a * aux.g1[(p, q)]))
    };
    let stride = opts.stride.max(1);
    let mut x = psi0.columns();
    let g0 = psi0.gram();
    let mut frames = vec![StateFrame::from_columns(s.t0, &x)];
    let dt = s.dt;
    for m in 0..s.intervals() {
        let (a, b) = s.ends(m);
        if a == b {
            if a == 0.0 {
                x = Step::free(&lambdas, dt).apply(&x);
            } else {
                x = Step::from_hermitian(h_of(a, a * a), dt).apply(&x);
            }
        } else {
            let s1 = a + (b - a) * GAUSS_1;
            let s2 = a + (b - a) * GAUSS_2;
            // Δ(a₁H(t₁) + a₂H(t₂)) = (Δ/2)(Λ − i·2(a₁s₁+a₂s₂)G₁ + 2(a₁s₁²+a₂s₂²)G₂)
            let first = h_of(2.0 * (CF4_A1 * s1 + CF4_A2 * s2), 2.0 * (CF4_A1 * s1 * s1 + CF4_A2 * s2 * s2));
            let second = h_of(2.0 * (CF4_A2 * s1 + CF4_A1 * s2), 2.0 * (CF4_A2 * s1 * s1 + CF4_A1 * s2 * s2));
            x = Step::from_hermitian(first, 0.5 * dt).apply(&x);
            x = Step::from_hermitian(second, 0.5 * dt).apply(&x);
        }
        if (m + 1) % stride == 0 || m + 1 == s.intervals() {
            frames.push(StateFrame::from_columns(s.node(m + 1), &x));
        }
    }
    finite(&x)?;
    let last = frames.last().unwrap();
    let (gram_drift, norm_drift) = drift(&g0, &last.gram());
    Ok(Trajectory {
        meta: TrajectoryMeta {
            integrator: opts.integrator,
            k_max: k,
            intervals: s.intervals(),
            stride,
            gram_drift,
            norm_drift,
            tail_mass: last.tail_mass(),
            tail_warning: last.tail_mass() > opts.tail_threshold,
        },
        frames,
        control: s.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// ψ ↦ ψ e^{−isμ} (original variables to auxiliary ones).
    Forward,
    /// ψ̃ ↦ ψ̃ e^{isμ}.
    Inverse,
}

/// Multiply every row by e^{∓iσμ}. The multiplication operator is taken as
/// the exponential of the truncated coupling matrix, which keeps the map
/// exactly unitary (forward∘inverse is the identity to round-off).
pub fn aux_transform(frame: &StateFrame, sigma: f64, mu: &Dipole, spec: BasisSpec, direction: Direction) -> Result<StateFrame> {
    let sign = match direction {
        Direction::Forward => -1.0,
        Direction::Inverse => 1.0,
    };
    let data = CouplingData::build(mu, BasisSpec { k_max: frame.k(), ..spec }, 1)?;
    let e = multiplication_exp(&data.mu_mat, sign * sigma);
    Ok(StateFrame { t: frame.t, coeffs: &frame.coeffs * e.transpose() })
}

/// exp(iσM) for real symmetric M.
pub(crate) fn multiplication_exp(mu_mat: &DMatrix<f64>, sigma: f64) -> DMatrix<C64> {
    let (d, v) = sym_eigen(mu_mat.clone());
    let v = to_complex(&v);
    let mut w = v.transpose();
    for (r, l) in d.iter().enumerate() {
        w.row_mut(r).scale_mut_c(C64::from_polar(1.0, sigma * l));
    }
    v * w
}

/// Endpoint sensitivities ∂c(T)/∂u_m for every interval of a piecewise-constant control.
pub struct Sensitivity {
    /// Final state (K×N, particles as columns), after the optional post map.
    pub final_state: DMatrix<C64>,
    /// One K×N block per interval.
    pub blocks: Vec<DMatrix<C64>>,
}

/// Forward pass storing the interval steps, then a backward sweep of the
/// propagator from each interval to the end; `post` is applied at the end
/// (e.g. a free tail).
pub(crate) fn endpoint_sensitivity(
    psi0: &StateFrame,
    u: &ControlSignal,
    data: &CouplingData,
    post: Option<&Step>,
) -> Result<Sensitivity> {
    require_constant(u, "sensitivity")?;
    check_dims(psi0, data)?;
    let gen = to_complex(&data.mu_mat).map(|c| c * I);
    let n_int = u.intervals();
    let mut steps = Vec::with_capacity(n_int);
    let mut states = Vec::with_capacity(n_int);
    let mut x = psi0.columns();
    for m in 0..n_int {
        let s = Step::coupled(data, u.values[m], u.dt);
        states.push(x.clone());
        x = s.apply(&x);
        steps.push(s);
    }
    let k = data.k_max;
    let mut w = DMatrix::<C64>::identity(k, k);
    if let Some(p) = post {
        x = p.apply(&x);
        w = p.apply(&w);
    }
    finite(&x)?;
    let mut blocks = vec![DMatrix::zeros(0, 0); n_int];
    for m in (0..n_int).rev() {
        blocks[m] = &w * steps[m].derivative(&gen, &states[m]);
        w = steps[m].apply_right(&w);
    }
    Ok(Sensitivity { final_state: x, blocks })
}

/// Exact steps for a piecewise-constant control (shared with the return method).
pub(crate) fn steps_for(u: &ControlSignal, data: &CouplingData) -> Vec<Step> {
    (0..u.intervals()).map(|m| Step::coupled(data, u.values[m], u.dt)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{BasisSpec, Dipole};

    fn setup(k: usize) -> CouplingData {
        CouplingData::build(&Dipole::cubic(), BasisSpec::new(k), 3).unwrap()
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let data = setup(10);
        let psi = StateFrame::eigenstates(3, 10).columns();
        let h = 1e-6;
        let u = 0.7;
        let dt = 0.01;
        let fd = (Step::coupled(&data, u + h, dt).apply(&psi) - Step::coupled(&data, u - h, dt).apply(&psi)) / C64::new(2.0 * h, 0.0);
        let an = Step::coupled(&data, u, dt).derivative(&to_complex(&data.mu_mat).map(|c| c * I), &psi);
        assert!((fd - an).norm() < 1e-8);
    }

    #[test]
    fn apply_right_is_transpose_consistent() {
        let data = setup(8);
        let s = Step::coupled(&data, -0.4, 0.03);
        let id = DMatrix::<C64>::identity(8, 8);
        let e = s.apply(&id);
        assert!((s.apply_right(&id) - &e).norm() < 1e-13);
        let x = DMatrix::from_fn(8, 8, |a, b| C64::new(a as f64 - b as f64, (a * b) as f64 * 0.1));
        assert!((s.apply_right(&x) - &x * &e).norm() < 1e-11);
    }
}
