//! First-order endpoint map around the eigenstates, the two identities that
//! obstruct the diagonal directions, and linear control synthesis.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::control::ControlSignal;
use crate::dynamics::StateFrame;
use crate::error::{Result, WellError};
use crate::moments::{build_frequency_set, solve_moments_on, IndexSet, MomentOptions, MomentTargets};
use crate::numerics::{C64, I};
use crate::spectral::CouplingData;

/// ⟨Ψ^j(T), Φ_k(T)⟩ = i⟨μφ_j,φ_k⟩ ∫ v e^{i(λ_k−λ_j)t} (N×K_trunc), with the
/// integrals taken exactly over the intervals of `v`.
pub fn first_order_endpoint(v: &ControlSignal, data: &CouplingData, n: usize, k_trunc: usize) -> DMatrix<C64> {
    let k_trunc = k_trunc.min(data.k_max);
    DMatrix::from_fn(n, k_trunc, |j, k| {
        let m = data.m(j + 1, k + 1);
        if m == 0.0 {
            return C64::new(0.0, 0.0);
        }
        I * m * v.moment(data.lambda(k + 1) - data.lambda(j + 1))
    })
}

/// Residuals (M₂₂⟨Ψ¹,Φ₁⟩ − M₁₁⟨Ψ²,Φ₂⟩, ⟨Ψ¹,Φ₂⟩ + conj⟨Ψ²,Φ₁⟩) of an
/// endpoint matrix expressed against (Φ_k(T)).
pub fn obstruction_residuals(psi: &DMatrix<C64>, data: &CouplingData) -> (f64, f64) {
    let r1 = data.m(2, 2) * psi[(0, 0)] - data.m(1, 1) * psi[(1, 1)];
    let r2 = psi[(0, 1)] + psi[(1, 0)].conj();
    (r1.norm(), r2.norm())
}

/// Both identities evaluated through the closed form.
pub fn check_obstruction_identity(v: &ControlSignal, data: &CouplingData) -> Result<(f64, f64)> {
    if data.n < 2 {
        return Err(WellError::Precondition("obstruction identities need N ≥ 2".into()));
    }
    Ok(obstruction_residuals(&first_order_endpoint(v, data, 2, 2), data))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagWeights {
    /// (5, −8, 3)
    N3,
    /// (1, −1)
    N2Phase,
    /// (4, −1)
    N2Delay,
}

impl DiagWeights {
    pub fn weights(self) -> &'static [f64] {
        match self {
            DiagWeights::N3 => &[5.0, -8.0, 3.0],
            DiagWeights::N2Phase => &[1.0, -1.0],
            DiagWeights::N2Delay => &[4.0, -1.0],
        }
    }

    pub fn n(self) -> usize {
        self.weights().len()
    }

    /// Σ w_j ⟨μφ_j, φ_j⟩.
    pub fn combo(self, data: &CouplingData) -> f64 {
        self.weights().iter().enumerate().map(|(j, w)| w * data.m(j + 1, j + 1)).sum()
    }
}

/// Requested ⟨Ψ^j(T),Φ_k(T)⟩ for k ≥ j+1 plus an optional weighted diagonal
/// imaginary part Im Σ w_j ⟨Ψ^j(T),Φ_j(T)⟩ = r.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinearTargets {
    pub entries: BTreeMap<(usize, usize), C64>,
    pub diag_combo: Option<(DiagWeights, f64)>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SynthOptions {
    pub k_trunc: usize,
    pub intervals: usize,
    pub moments: MomentOptions,
}

/// Control on [t0, t1] whose linearization around the free trajectory
/// (started from `initial` at t0, zero if absent) hits the targets.
pub fn synth_linear_control(
    targets: &LinearTargets,
    data: &CouplingData,
    n: usize,
    t0: f64,
    t1: f64,
    initial: Option<&StateFrame>,
    opts: &SynthOptions,
) -> Result<ControlSignal> {
    let k_trunc = opts.k_trunc.min(data.k_max);
    for &(j, k) in targets.entries.keys() {
        if j == 0 || j > n || k < j + 1 || k > k_trunc {
            return Err(WellError::Input(format!(
                "target ({j},{k}) outside the index set (k ≥ j+1 ≤ K_trunc); lower entries are induced by skew-symmetry"
            )));
        }
        if data.m(j, k).abs() < 1e-14 {
            return Err(WellError::Unreachable(format!("⟨μφ_{j},φ_{k}⟩ = 0")));
        }
    }
    let init = |j: usize, k: usize| -> C64 {
        initial.map_or(C64::new(0.0, 0.0), |f| {
            let z = f.coeffs[(j - 1, k - 1)];
            z * C64::from_polar(1.0, data.lambda(k) * t0)
        })
    };
    let pairs: Vec<(usize, usize)> = (1..=n).flat_map(|j| ((j + 1)..=k_trunc).map(move |k| (j, k))).collect();
    let mut values = Vec::new();
    for &(j, k) in &pairs {
        let want = targets.entries.get(&(j, k)).copied().unwrap_or_default();
        values.push(((j, k), (want - init(j, k)) / (I * data.m(j, k))));
    }
    let mut index_pairs = pairs.clone();
    if let Some((w, r)) = targets.diag_combo {
        if w.n() != n {
            return Err(WellError::Input("diagonal weights do not match N".into()));
        }
        let combo = w.combo(data);
        if combo.abs() < 1e-14 {
            return Err(WellError::Precondition("weighted diagonal coupling vanishes".into()));
        }
        let base: f64 = w.weights().iter().enumerate().map(|(j, wj)| wj * init(j + 1, j + 1).im).sum();
        index_pairs.push((n, n));
        values.push(((n, n), C64::new((r - base) / combo, 0.0)));
    }
    let freqs = build_frequency_set(n, k_trunc, t1 - t0, &IndexSet::Pairs(index_pairs))?;
    let mt = MomentTargets::from_pairs(&freqs, &values)?;
    solve_moments_on(&freqs, &mt, t0, t1, opts.intervals, &opts.moments)
}
