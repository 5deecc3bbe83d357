//! Trigonometric moment problems: frequency bookkeeping, minimal-norm real
//! solutions on a control grid, the V_T projector and Gram diagnostics.
//!
//! Controls live on the piecewise-constant grid used by the propagators, so
//! moments are enforced exactly for the signal that is actually simulated:
//! the solution is the L²-minimal piecewise-constant v whose exact interval
//! moments match the targets.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::ControlSignal;
use crate::error::{Result, WellError};
use crate::numerics::{exp_integral, sym_eigen, C64};
use crate::spectral::eigenvalue;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEntry {
    pub n: usize,
    pub omega: f64,
    /// Mode pairs (j, k) with λ_k − λ_j = ω (1-based).
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencySet {
    pub entries: Vec<FrequencyEntry>,
    #[serde(rename = "T")]
    pub t: f64,
}

impl FrequencySet {
    pub fn omegas(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.omega).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index n of the entry carrying `pair`.
    pub fn index_of(&self, pair: (usize, usize)) -> Option<usize> {
        self.entries.iter().position(|e| e.pairs.contains(&pair))
    }

    /// Entries whose frequency is shared by more than one pair.
    pub fn collisions(&self) -> Vec<&FrequencyEntry> {
        self.entries.iter().filter(|e| e.pairs.len() > 1).collect()
    }

    /// Plain set of frequencies (no pairs), e.g. for ad-hoc problems.
    pub fn from_omegas(omegas: &[f64], t: f64) -> FrequencySet {
        FrequencySet {
            entries: omegas.iter().enumerate().map(|(n, &omega)| FrequencyEntry { n, omega, pairs: vec![] }).collect(),
            t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum IndexSet {
    /// {(j,k) : j ≤ N, k ≥ j+1} ∪ {(N,N)}.
    Canonical,
    /// {(1,k) : k ≥ 1}: the constraints defining V_T.
    FirstParticle,
    Pairs(Vec<(usize, usize)>),
}

pub fn build_frequency_set(n: usize, k_trunc: usize, t: f64, index_set: &IndexSet) -> Result<FrequencySet> {
    if k_trunc < n + 1 {
        return Err(WellError::Input(format!("K_trunc = {k_trunc} must be at least N+1 = {}", n + 1)));
    }
    if !(t > 0.0) {
        return Err(WellError::Input("horizon must be positive".into()));
    }
    let pairs: Vec<(usize, usize)> = match index_set {
        IndexSet::Canonical => {
            let mut p: Vec<_> = (1..=n).flat_map(|j| ((j + 1)..=k_trunc).map(move |k| (j, k))).collect();
            p.push((n, n));
            p
        }
        IndexSet::FirstParticle => (1..=k_trunc).map(|k| (1, k)).collect(),
        IndexSet::Pairs(p) => {
            for &(j, k) in p {
                if j == 0 || k == 0 || j > k_trunc || k > k_trunc || k < j {
                    return Err(WellError::Input(format!("pair ({j},{k}) outside the truncation / ordering k ≥ j")));
                }
            }
            p.clone()
        }
    };
    // k² − j² is an exact integer key, so collisions are detected without tolerances.
    let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (j, k) in pairs {
        let key = k * k - j * j;
        let g = groups.entry(key).or_default();
        if !g.contains(&(j, k)) {
            g.push((j, k));
        }
    }
    let entries = groups
        .into_iter()
        .enumerate()
        .map(|(n, (key, pairs))| FrequencyEntry { n, omega: key as f64 * std::f64::consts::PI.powi(2), pairs })
        .collect();
    Ok(FrequencySet { entries, t })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentTargets {
    pub d: Vec<C64>,
}

impl MomentTargets {
    pub fn zeros(n: usize) -> MomentTargets {
        MomentTargets { d: vec![C64::new(0.0, 0.0); n] }
    }

    /// Targets given per mode pair; pairs of one collision group must agree.
    pub fn from_pairs(freqs: &FrequencySet, values: &[((usize, usize), C64)]) -> Result<MomentTargets> {
        let mut d: Vec<Option<C64>> = vec![None; freqs.len()];
        for &(pair, val) in values {
            let n = freqs.index_of(pair).ok_or_else(|| WellError::Input(format!("pair {pair:?} not in frequency set")))?;
            match d[n] {
                Some(prev) if (prev - val).norm() > 1e-12 * (1.0 + prev.norm()) => {
                    return Err(WellError::Input(format!(
                        "incompatible targets within collision group at omega = {}",
                        freqs.entries[n].omega
                    )))
                }
                _ => d[n] = Some(val),
            }
        }
        Ok(MomentTargets { d: d.into_iter().map(|x| x.unwrap_or_default()).collect() })
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MomentOptions {
    pub cond_threshold: f64,
    /// Tikhonov shift added to the Gram eigenvalues; 0 disables it.
    pub ridge: f64,
}

impl Default for MomentOptions {
    fn default() -> Self {
        MomentOptions { cond_threshold: 1e10, ridge: 0.0 }
    }
}

/// Minimal-norm solution of R v = b, where row r of R holds the exact
/// integrals of v's basis functions and ‖v‖² = dt·Σv². Returns (v, cond).
pub(crate) fn min_norm_real(rows: &DMatrix<f64>, b: &[f64], dt: f64, opts: &MomentOptions, context: &str) -> Result<(Vec<f64>, f64)> {
    let gram = (rows * rows.transpose()) / dt;
    let (ev, vecs) = sym_eigen(gram);
    let max = ev.iter().cloned().fold(0.0, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if opts.ridge == 0.0 && !(cond <= opts.cond_threshold) {
        return Err(WellError::IllConditioned { cond, context: format!("{context}; enlarge the horizon or enable the ridge") });
    }
    let bv = DVector::from_column_slice(b);
    let mut c = vecs.transpose() * bv;
    for (i, x) in c.iter_mut().enumerate() {
        *x /= ev[i] + opts.ridge;
    }
    let y = vecs * c;
    let v = rows.transpose() * y / dt;
    Ok((v.iter().copied().collect(), cond))
}

/// Real rows (Re, Im) of the complex moment equations on a grid; the Im row
/// of ω = 0 is identically zero and omitted. Returns (rows, rhs).
fn moment_rows(omegas: &[f64], d: &[C64], t0: f64, dt: f64, intervals: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs = Vec::new();
    for (&w, &dn) in omegas.iter().zip(d) {
        let c: Vec<C64> = (0..intervals).map(|m| exp_integral(w, t0 + m as f64 * dt, dt)).collect();
        rows.push(c.iter().map(|z| z.re).collect());
        rhs.push(dn.re);
        if w != 0.0 {
            rows.push(c.iter().map(|z| z.im).collect());
            rhs.push(dn.im);
        } else if dn.im.abs() > 1e-14 * (1.0 + dn.re.abs()) {
            return Err(WellError::Input("the zero-frequency target must be real".into()));
        }
    }
    let r = DMatrix::from_fn(rows.len(), intervals, |a, m| rows[a][m]);
    Ok((r, rhs))
}

/// Solve on [t0, t1] with `intervals` uniform pieces.
pub fn solve_moments_on(
    freqs: &FrequencySet,
    targets: &MomentTargets,
    t0: f64,
    t1: f64,
    intervals: usize,
    opts: &MomentOptions,
) -> Result<ControlSignal> {
    if targets.d.len() != freqs.len() {
        return Err(WellError::Input(format!("{} targets for {} frequencies", targets.d.len(), freqs.len())));
    }
    if !(t1 > t0) || intervals == 0 {
        return Err(WellError::Input("empty moment window".into()));
    }
    let dt = (t1 - t0) / intervals as f64;
    if targets.d.iter().all(|z| z.norm_sqr() == 0.0) {
        return Ok(ControlSignal::constant_on(t0, t1 - t0, vec![0.0; intervals]));
    }
    let (rows, rhs) = moment_rows(&freqs.omegas(), &targets.d, t0, dt, intervals)?;
    let (v, _) = min_norm_real(&rows, &rhs, dt, opts, "moment problem")?;
    Ok(ControlSignal::constant_on(t0, t1 - t0, v))
}

/// Minimal-norm real control on [0, T] matching the targets.
pub fn solve_moments(freqs: &FrequencySet, targets: &MomentTargets, intervals: usize, opts: &MomentOptions) -> Result<ControlSignal> {
    solve_moments_on(freqs, targets, 0.0, freqs.t, intervals, opts)
}

#[derive(Clone, Debug, Serialize)]
pub struct MomentCheck {
    pub moments: Vec<C64>,
    pub residuals: Option<Vec<f64>>,
}

impl MomentCheck {
    pub fn max_residual(&self) -> f64 {
        self.residuals.as_ref().map_or(f64::NAN, |r| r.iter().cloned().fold(0.0, f64::max))
    }
}

pub fn verify_moments(v: &ControlSignal, freqs: &FrequencySet, targets: Option<&MomentTargets>) -> MomentCheck {
    let moments: Vec<C64> = freqs.entries.iter().map(|e| v.moment(e.omega)).collect();
    let residuals = targets.map(|t| moments.iter().zip(&t.d).map(|(a, b)| (a - b).norm()).collect());
    MomentCheck { moments, residuals }
}

/// v minus the minimal-norm signal carrying its moments at λ_k − λ₁, k ≤ K_trunc.
pub fn project_vt(v: &ControlSignal, k_trunc: usize, opts: &MomentOptions) -> Result<ControlSignal> {
    let omegas: Vec<f64> = (1..=k_trunc).map(|k| eigenvalue(k) - eigenvalue(1)).collect();
    let freqs = FrequencySet::from_omegas(&omegas, v.duration());
    let check = verify_moments(v, &freqs, None);
    let mut d = check.moments;
    d[0].im = 0.0;
    let corr = solve_moments_on(&freqs, &MomentTargets { d }, v.t0, v.t_end(), v.intervals(), opts)?;
    let mut out = v.clone();
    out.add_scaled(&corr, -1.0);
    Ok(out)
}

/// 2-norm condition number of the conjugate-closed continuous Gram matrix
/// G_mn = ∫₀ᵀ e^{i(ω_n − ω_m)t} dt; +∞ when singular.
pub fn gram_condition(freqs: &FrequencySet) -> f64 {
    let mut w = Vec::new();
    for e in &freqs.entries {
        w.push(e.omega);
        if e.omega != 0.0 {
            w.push(-e.omega);
        }
    }
    let n = w.len();
    let g = DMatrix::from_fn(n, n, |a, b| exp_integral(w[b] - w[a], 0.0, freqs.t));
    let ev = g.symmetric_eigenvalues();
    let max = ev.iter().cloned().fold(0.0, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= max * f64::EPSILON * n as f64 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// JSON form `{"T":…, "omegas":[…], "targets":[[re,im],…]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentProblem {
    #[serde(rename = "T")]
    pub t: f64,
    pub omegas: Vec<f64>,
    pub targets: Vec<[f64; 2]>,
}

impl MomentProblem {
    pub fn new(freqs: &FrequencySet, targets: &MomentTargets) -> MomentProblem {
        MomentProblem { t: freqs.t, omegas: freqs.omegas(), targets: targets.d.iter().map(|z| [z.re, z.im]).collect() }
    }

    pub fn split(&self) -> Result<(FrequencySet, MomentTargets)> {
        if self.omegas.len() != self.targets.len() {
            return Err(WellError::Input("omegas and targets differ in length".into()));
        }
        if self.omegas.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(WellError::Input("omegas must be strictly increasing".into()));
        }
        Ok((
            FrequencySet::from_omegas(&self.omegas, self.t),
            MomentTargets { d: self.targets.iter().map(|p| C64::new(p[0], p[1])).collect() },
        ))
    }
}
