//! Second-order obstructions: the quadratic forms Q_{T,j} (in v) and 𝒬_{T,j}
//! (in the primitive s), their weighted combinations, coercivity scans,
//! expansion-order checks of the auxiliary system and the randomized
//! non-reachability experiment.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::control::{square_integral, volterra_exp, ControlSignal};
use crate::dynamics::{propagate, propagate_auxiliary, PropagateOptions, StateFrame};
use crate::error::{Result, WellError};
use crate::exec::{self, Exec};
use crate::moments::{project_vt, MomentOptions};
use crate::numerics::{exp_integral, loglog_slope, phi, sym_eigen, C64};
use crate::spectral::{AuxMatrices, CouplingData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormVariant {
    N2,
    N3,
}

impl FormVariant {
    pub fn n(self) -> usize {
        match self {
            FormVariant::N2 => 2,
            FormVariant::N3 => 3,
        }
    }

    /// Weights c_j of Σ c_j 𝒬_{T,j}.
    pub fn weights(self, data: &CouplingData) -> Vec<f64> {
        let m = |j| data.m(j, j);
        match self {
            FormVariant::N2 => vec![-m(2), m(1)],
            FormVariant::N3 => vec![m(3) - m(2), m(1) - m(3), m(2) - m(1)],
        }
    }

    /// 𝒜 or ℬ: minus the ‖s‖² coefficient of the combined form.
    pub fn scalar(self, data: &CouplingData) -> f64 {
        match self {
            FormVariant::N2 => data.a_scalar,
            FormVariant::N3 => data.b_scalar,
        }
    }
}

fn check_trunc(data: &CouplingData, j: usize, k_trunc: usize) -> Result<()> {
    if k_trunc > data.k_max {
        return Err(WellError::Input(format!("K_trunc = {k_trunc} exceeds coupling data K_max = {}", data.k_max)));
    }
    if j == 0 || j > 3 || j > k_trunc {
        return Err(WellError::Input(format!("particle index {j} out of range")));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelTable {
    pub j: usize,
    pub k_trunc: usize,
    pub t: Vec<f64>,
    pub samples: Vec<f64>,
    /// Σ_{k>K_trunc} (λ_k−λ_j)²⟨μφ_j,φ_k⟩² under a fitted c·k⁻³ coupling model.
    pub tail_bound: f64,
    /// Couplings decay visibly slower than k⁻³ over the last retained modes.
    pub tail_warning: bool,
}

/// h_j(t) = Σ_k (λ_k−λ_j)² ⟨μφ_j,φ_k⟩² sin((λ_k−λ_j)t), k ≤ K_trunc.
pub fn kernel_h(data: &CouplingData, j: usize, k_trunc: usize, grid: &[f64]) -> Result<KernelTable> {
    check_trunc(data, j, k_trunc)?;
    let terms: Vec<(f64, f64)> = (1..=k_trunc)
        .filter(|&k| k != j)
        .map(|k| {
            let w = data.lambda(k) - data.lambda(j);
            (w, w * w * data.m(j, k).powi(2))
        })
        .collect();
    let samples = grid.iter().map(|&t| terms.iter().map(|(w, c)| c * (w * t).sin()).sum()).collect();
    // Fit |⟨μφ_j,φ_k⟩| k³ over the last quarter of the window.
    let lo = (3 * k_trunc / 4).max(j + 1);
    let scaled: Vec<f64> = (lo..=k_trunc).map(|k| data.m(j, k).abs() * (k as f64).powi(3)).collect();
    let c = scaled.iter().cloned().fold(0.0, f64::max);
    let growth = match (scaled.first(), scaled.last()) {
        (Some(a), Some(b)) if *a > 0.0 => b / a,
        _ => 1.0,
    };
    // (λ_k−λ_j)² c² k⁻⁶ ≤ π⁴ c² k⁻², whose tail sum is below π⁴c²/K.
    let tail_bound = std::f64::consts::PI.powi(4) * c * c / k_trunc as f64;
    Ok(KernelTable { j, k_trunc, t: grid.to_vec(), samples, tail_bound, tail_warning: growth > 2.0 })
}

/// Q_{T,j}(v) = ∫v(t)∫₀ᵗ v(τ) Σ_k ⟨μφ_j,φ_k⟩² sin((λ_k−λ_j)(t−τ)) dτ dt.
pub fn quadratic_form_q(v: &ControlSignal, data: &CouplingData, j: usize, k_trunc: usize) -> Result<f64> {
    check_trunc(data, j, k_trunc)?;
    Ok((1..=k_trunc)
        .filter(|&k| k != j)
        .map(|k| data.m(j, k).powi(2) * volterra_exp(v, v, data.lambda(k) - data.lambda(j)).im)
        .sum())
}

/// 𝒬_{T,j}(s) = −⟨(μ′)²φ_j,φ_j⟩∫s² + ∫s(t)∫₀ᵗ s(τ) h_j(t−τ) dτ dt.
pub fn quadratic_form_calq(s: &ControlSignal, data: &CouplingData, j: usize, k_trunc: usize) -> Result<f64> {
    check_trunc(data, j, k_trunc)?;
    let kernel: f64 = (1..=k_trunc)
        .filter(|&k| k != j)
        .map(|k| {
            let w = data.lambda(k) - data.lambda(j);
            w * w * data.m(j, k).powi(2) * volterra_exp(s, s, w).im
        })
        .sum();
    Ok(-data.grad_diag[j - 1] * square_integral(s) + kernel)
}

/// Weighted combination whose ‖s‖² coefficient is −𝒜 (N2) or −ℬ (N3).
pub fn combined_form(s: &ControlSignal, data: &CouplingData, variant: FormVariant, k_trunc: usize) -> Result<f64> {
    let w = variant.weights(data);
    let mut acc = 0.0;
    for (j, c) in w.iter().enumerate() {
        acc += c * quadratic_form_calq(s, data, j + 1, k_trunc)?;
    }
    Ok(acc)
}

/// Kernel part of the combined form: combined_form + scalar·‖s‖².
pub fn combined_kernel_part(s: &ControlSignal, data: &CouplingData, variant: FormVariant, k_trunc: usize) -> Result<f64> {
    Ok(combined_form(s, data, variant, k_trunc)? + variant.scalar(data) * square_integral(s))
}

#[derive(Clone, Debug, Serialize)]
pub struct CoercivityReport {
    pub variant: FormVariant,
    pub resolution: usize,
    pub k_trunc: usize,
    pub t_grid: Vec<f64>,
    pub rayleigh_max: Vec<f64>,
    /// Largest T such that every scanned T′ ≤ T has rayleigh_max < 0.
    pub t_star_est: Option<f64>,
    pub samples_tested: usize,
    pub applicable: bool,
    pub degenerate: bool,
}

/// Symmetric matrix A with sign·𝒬_T(s) = aᵀAa for s = Σ a_m 1_{I_m}.
fn form_matrix(data: &CouplingData, variant: FormVariant, t: f64, res: usize, k_trunc: usize, sign: f64) -> DMatrix<f64> {
    let dt = t / res as f64;
    // The grid is uniform, so off-diagonal blocks depend on the lag only:
    // Im(E_m conj E_n) = |E₀|² sin(ω(m−n)Δ).
    let mut lag = vec![0.0; res];
    let weights = variant.weights(data);
    for (jj, c) in weights.iter().enumerate() {
        let j = jj + 1;
        for k in (1..=k_trunc).filter(|&k| k != j) {
            let w = data.lambda(k) - data.lambda(j);
            let amp = c * w * w * data.m(j, k).powi(2);
            if amp == 0.0 {
                continue;
            }
            let e0 = exp_integral(w, 0.0, dt).norm_sqr();
            lag[0] += amp * dt * dt * phi(C64::new(0.0, w * dt))[1].im;
            for (d, l) in lag.iter_mut().enumerate().skip(1) {
                *l += amp * e0 * (w * d as f64 * dt).sin();
            }
        }
    }
    let g = variant.scalar(data);
    DMatrix::from_fn(res, res, |a, b| {
        let d = a.abs_diff(b);
        let mut v = if d == 0 { lag[0] - g * dt } else { 0.5 * lag[d] };
        v *= sign;
        v
    })
}

/// Largest Rayleigh quotient of sign·𝒬_T over piecewise-constant s on `res` intervals.
pub fn rayleigh_max(data: &CouplingData, variant: FormVariant, t: f64, res: usize, k_trunc: usize) -> Result<f64> {
    let sign = variant.scalar(data).signum();
    let a = form_matrix(data, variant, t, res, k_trunc, if sign == 0.0 { 1.0 } else { sign });
    let (ev, _) = sym_eigen(a);
    let max = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(WellError::Numerical("eigenvalue solve failed in coercivity scan".into()));
    }
    Ok(max / (t / res as f64))
}

/// Same quotient restricted to s with ∫ s e^{i(λ_k−λ₁)t} dt = 0 for
/// 2 ≤ k ≤ `constraint_modes`, i.e. primitives of controls in V_T.
pub fn rayleigh_max_constrained(
    data: &CouplingData,
    variant: FormVariant,
    t: f64,
    res: usize,
    k_trunc: usize,
    constraint_modes: usize,
) -> Result<f64> {
    let sign = variant.scalar(data).signum();
    let a = form_matrix(data, variant, t, res, k_trunc, if sign == 0.0 { 1.0 } else { sign });
    let dt = t / res as f64;
    let mut rows = Vec::new();
    for k in 2..=constraint_modes {
        let w = data.lambda(k) - data.lambda(1);
        let c: Vec<C64> = (0..res).map(|m| exp_integral(w, m as f64 * dt, dt)).collect();
        rows.push(c.iter().map(|z| z.re).collect::<Vec<_>>());
        rows.push(c.iter().map(|z| z.im).collect::<Vec<_>>());
    }
    if rows.len() >= res {
        return Err(WellError::Input("more constraints than grid intervals".into()));
    }
    // Orthonormal basis of the null space from the eigenvectors of CᵀC.
    let c = DMatrix::from_fn(rows.len(), res, |i, m| rows[i][m]);
    let (ev, vecs) = sym_eigen(c.transpose() * &c);
    let scale = ev.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..res).filter(|&i| ev[i] <= 1e-12 * scale).collect();
    let n = DMatrix::from_fn(res, keep.len(), |r, q| vecs[(r, keep[q])]);
    let (ev, _) = sym_eigen(n.transpose() * a * n);
    Ok(ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / dt)
}

pub fn coercivity_scan(
    data: &CouplingData,
    variant: FormVariant,
    t_grid: &[f64],
    resolution: usize,
    k_trunc: usize,
    exec: Exec,
) -> Result<CoercivityReport> {
    if data.n < variant.n() {
        return Err(WellError::Input("coupling data built for fewer particles than the variant needs".into()));
    }
    let scalar = variant.scalar(data);
    let off_diag_zero = (1..=variant.n()).all(|j| (1..=k_trunc).all(|k| k == j || data.m(j, k) == 0.0));
    let degenerate = scalar.abs() < 1e-14 && off_diag_zero;
    if scalar.abs() < 1e-14 {
        return Ok(CoercivityReport {
            variant,
            resolution,
            k_trunc,
            t_grid: t_grid.to_vec(),
            rayleigh_max: vec![0.0; t_grid.len()],
            t_star_est: None,
            samples_tested: 0,
            applicable: false,
            degenerate,
        });
    }
    let vals = exec::map(exec, t_grid, |&t| rayleigh_max(data, variant, t, resolution, k_trunc));
    let rayleigh_max = vals.into_iter().collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..t_grid.len()).collect();
    order.sort_by(|&a, &b| t_grid[a].total_cmp(&t_grid[b]));
    let mut t_star = None;
    for i in order {
        if rayleigh_max[i] < 0.0 {
            t_star = Some(t_grid[i]);
        } else {
            break;
        }
    }
    Ok(CoercivityReport {
        variant,
        resolution,
        k_trunc,
        t_grid: t_grid.to_vec(),
        rayleigh_max,
        t_star_est: t_star,
        samples_tested: t_grid.len() * resolution,
        applicable: true,
        degenerate,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ExpansionReport {
    pub j: usize,
    pub t: f64,
    pub eps: Vec<f64>,
    pub im_overlap: Vec<f64>,
    pub calq_shape: f64,
    pub residual: Vec<f64>,
    pub first_order_residual: Vec<f64>,
    pub slope_im: f64,
    pub slope_residual: f64,
    pub slope_first_order: f64,
    /// Some residual fell near the floating-point floor.
    pub precision_warning: bool,
}

/// Auxiliary propagation at s = ε·s_shape: Im⟨ψ̃^j(T),Φ_j(T)⟩ against ε²𝒬_{T,j}(s_shape).
///
/// 𝒬 is summed over the same modes as the propagation so the residual
/// measures the expansion order rather than the truncation mismatch.
pub fn expansion_order_check(
    data: &CouplingData,
    aux: &AuxMatrices,
    j: usize,
    s_shape: &ControlSignal,
    eps_list: &[f64],
    exec: Exec,
) -> Result<ExpansionReport> {
    check_trunc(data, j, data.k_max)?;
    let k = data.k_max;
    let t = s_shape.t_end();
    let calq = quadratic_form_calq(s_shape, data, j, k)?;
    // First-order auxiliary term: ⟨Ψ̃^j(T),Φ_k(T)⟩ = −(G₁)_{kj} ∫ s e^{i(λ_k−λ_j)t}.
    let first: Vec<C64> = (1..=k)
        .map(|kk| -aux.g1[(kk - 1, j - 1)] * s_shape.moment(data.lambda(kk) - data.lambda(j)))
        .collect();
    let n = data.n.max(j);
    let psi0 = StateFrame::eigenstates(n, k);
    let runs = exec::map(exec, eps_list, |&e| -> Result<(f64, f64, f64)> {
        let s = s_shape.scaled(e);
        let tr = propagate_auxiliary(&s, aux, &psi0, &PropagateOptions { stride: usize::MAX, ..Default::default() })?;
        let last = tr.last();
        let im = last.overlap_free(j - 1, j).im;
        let mut fo = 0.0;
        for kk in 1..=k {
            let free = if kk == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
            fo += (last.overlap_free(j - 1, kk) - free - e * first[kk - 1]).norm_sqr();
        }
        Ok((im, (im - e * e * calq).abs(), fo.sqrt()))
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let im: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let residual: Vec<f64> = runs.iter().map(|r| r.1).collect();
    let first_res: Vec<f64> = runs.iter().map(|r| r.2).collect();
    let abs_im: Vec<f64> = im.iter().map(|x| x.abs()).collect();
    let precision_warning = residual.iter().any(|r| *r < 1e-13);
    Ok(ExpansionReport {
        j,
        t,
        eps: eps_list.to_vec(),
        calq_shape: calq,
        slope_im: loglog_slope(eps_list, &abs_im),
        slope_residual: loglog_slope(eps_list, &residual),
        slope_first_order: loglog_slope(eps_list, &first_res),
        im_overlap: im,
        residual,
        first_order_residual: first_res,
        precision_warning,
    })
}

/// 𝒯 = Σ_j c_j Im⟨ψ^j(T),Φ_j(T)⟩ with the weights of the combined form.
pub fn signed_functional(frame: &StateFrame, data: &CouplingData, variant: FormVariant) -> f64 {
    variant.weights(data).iter().enumerate().map(|(j, c)| c * frame.overlap_free(j, j + 1).im).sum()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ReachabilityOptions {
    pub trials: usize,
    pub seed: u64,
    pub intervals: usize,
    /// Bound on ‖u‖_{L²}.
    pub budget: f64,
    /// Fourier modes of the raw noise.
    pub modes: usize,
    /// Number of V_T moment constraints λ_k − λ₁ enforced (k ≤ vt_modes);
    /// 0 means the propagation truncation K_max.
    pub vt_modes: usize,
}

impl Default for ReachabilityOptions {
    fn default() -> Self {
        ReachabilityOptions { trials: 200, seed: 7, intervals: 1024, budget: 0.1, modes: 16, vt_modes: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub u_norm: f64,
    pub s_norm_sq: f64,
    pub functional: f64,
    /// sign·𝒯 / ‖s‖².
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReachabilityReport {
    pub variant: FormVariant,
    pub t: f64,
    pub seed: u64,
    pub sign: f64,
    /// α (N2) or β (N3).
    pub direction_sign: f64,
    pub trials: usize,
    pub vt_modes: usize,
    pub skipped: usize,
    pub zero_excluded: usize,
    pub violations: usize,
    /// Largest C with sign·𝒯 ≤ −C‖s‖² on every trial.
    pub c_star_fit: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub ratio_mean: f64,
    pub records: Vec<TrialRecord>,
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Band-limited random control in V_T, scaled to a random norm below the budget.
pub fn random_vt_control(t: f64, k_trunc: usize, opts: &ReachabilityOptions, trial: usize) -> Result<ControlSignal> {
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(opts.seed, trial));
    let coef: Vec<(f64, f64)> = (0..opts.modes).map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
    let raw = ControlSignal::from_fn_midpoint(t, opts.intervals, |x| {
        coef.iter()
            .enumerate()
            .map(|(m, (a, b))| {
                let w = 2.0 * std::f64::consts::PI * (m + 1) as f64 * x / t;
                a * w.cos() + b * w.sin()
            })
            .sum()
    });
    let v = project_vt(&raw, k_trunc, &MomentOptions::default())?;
    let norm = v.l2_norm();
    let target: f64 = opts.budget * rng.random_range(0.05..1.0);
    Ok(if norm > 0.0 { v.scaled(target / norm) } else { v })
}

pub fn reachability_experiment(
    data: &CouplingData,
    t: f64,
    variant: FormVariant,
    opts: &ReachabilityOptions,
    exec: Exec,
) -> Result<ReachabilityReport> {
    if data.n < variant.n() {
        return Err(WellError::Input("coupling data built for fewer particles than the variant needs".into()));
    }
    let scalar = variant.scalar(data);
    if scalar.abs() < 1e-14 {
        return Err(WellError::Precondition("combined form has no sign (scalar vanishes)".into()));
    }
    let sign = scalar.signum();
    let direction_sign = match variant {
        FormVariant::N2 => data.alpha(),
        FormVariant::N3 => data.beta(),
    };
    let k = data.k_max;
    let psi0 = StateFrame::eigenstates(variant.n(), k);
    let vt = if opts.vt_modes == 0 { k } else { opts.vt_modes };
    let ids: Vec<usize> = (0..opts.trials).collect();
    let results = exec::map(exec, &ids, |&i| -> Result<Option<TrialRecord>> {
        let u = random_vt_control(t, vt, opts, i)?;
        let u_norm = u.l2_norm();
        if u_norm > opts.budget * (1.0 + 1e-12) {
            return Ok(None);
        }
        let s = u.primitive();
        let s_norm_sq = square_integral(&s);
        let end = propagate(&psi0, &u, data, &PropagateOptions { stride: usize::MAX, ..Default::default() })?;
        let f = signed_functional(end.last(), data, variant);
        Ok(Some(TrialRecord { trial: i, u_norm, s_norm_sq, functional: f, ratio: sign * f / s_norm_sq }))
    });
    let mut records = Vec::new();
    let mut skipped = 0;
    let mut zero_excluded = 0;
    for r in results {
        match r? {
            None => skipped += 1,
            Some(rec) if rec.s_norm_sq == 0.0 || rec.functional == 0.0 => zero_excluded += 1,
            Some(rec) => records.push(rec),
        }
    }
    let violations = records.iter().filter(|r| r.ratio >= 0.0).count();
    let ratio_max = records.iter().map(|r| r.ratio).fold(f64::NEG_INFINITY, f64::max);
    let ratio_min = records.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let ratio_mean = records.iter().map(|r| r.ratio).sum::<f64>() / records.len().max(1) as f64;
    Ok(ReachabilityReport {
        variant,
        t,
        seed: opts.seed,
        sign,
        direction_sign,
        trials: opts.trials,
        vt_modes: vt,
        skipped,
        zero_excluded,
        violations,
        c_star_fit: -ratio_max,
        ratio_min,
        ratio_max,
        ratio_mean,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{BasisSpec, Dipole};

    #[test]
    fn form_matrix_reproduces_combined_form() {
        let data = CouplingData::build(&Dipole::cubic(), BasisSpec::new(24), 3).unwrap();
        let t = 0.07;
        let res = 12;
        let a: Vec<f64> = (0..res).map(|m| ((m * 7 % 5) as f64 - 2.0) * 0.3 + 0.1).collect();
        let s = ControlSignal::piecewise_constant(t, a.clone());
        for variant in [FormVariant::N2, FormVariant::N3] {
            let mat = form_matrix(&data, variant, t, res, 24, 1.0);
            let av = nalgebra::DVector::from_vec(a.clone());
            let quad = (av.transpose() * &mat * &av)[(0, 0)];
            let direct = combined_form(&s, &data, variant, 24).unwrap();
            assert!((quad - direct).abs() < 1e-12 * (1.0 + direct.abs()), "{quad} vs {direct}");
        }
    }
}
