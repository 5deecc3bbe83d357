//! Eigendata of the well, dipole couplings and the scalar hypothesis quantities.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WellError};
use crate::numerics::{composite_gl, C64};

/// λ_k = (kπ)², k ≥ 1.
#[inline]
pub fn eigenvalue(k: usize) -> f64 {
    let a = k as f64 * PI;
    a * a
}

/// φ_k(x) = √2 sin(kπx).
#[inline]
pub fn eigenfunction(k: usize, x: f64) -> f64 {
    std::f64::consts::SQRT_2 * (k as f64 * PI * x).sin()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct BasisSpec {
    pub k_max: usize,
    pub quadrature_order: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec { k_max: 30, quadrature_order: 12 }
    }
}

impl BasisSpec {
    pub fn new(k_max: usize) -> Self {
        BasisSpec { k_max, ..Default::default() }
    }

    pub fn lambdas(&self) -> Vec<f64> {
        (1..=self.k_max).map(eigenvalue).collect()
    }
}

/// Dipole specification as it appears in configuration files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DipoleSpec {
    Poly { coeffs: Vec<f64> },
    Samples { x: Vec<f64>, y: Vec<f64> },
}

impl Default for DipoleSpec {
    fn default() -> Self {
        DipoleSpec::Poly { coeffs: vec![0.0, 0.0, 0.0, 1.0] }
    }
}

#[derive(Clone, Debug)]
enum Repr {
    Poly(Vec<f64>),
    Spline(CubicSpline),
}

/// The coupling profile μ on [0, 1].
#[derive(Clone, Debug)]
pub struct Dipole {
    repr: Repr,
    spec: DipoleSpec,
}

impl Dipole {
    pub fn from_spec(spec: &DipoleSpec) -> Result<Dipole> {
        let repr = match spec {
            DipoleSpec::Poly { coeffs } => {
                if coeffs.iter().any(|c| !c.is_finite()) {
                    return Err(WellError::Input("non-finite polynomial coefficient".into()));
                }
                Repr::Poly(coeffs.clone())
            }
            DipoleSpec::Samples { x, y } => Repr::Spline(CubicSpline::new(x, y)?),
        };
        Ok(Dipole { repr, spec: spec.clone() })
    }

    pub fn poly(coeffs: &[f64]) -> Dipole {
        Dipole::from_spec(&DipoleSpec::Poly { coeffs: coeffs.to_vec() }).expect("finite coefficients")
    }

    /// μ(x) = x³, the default profile.
    pub fn cubic() -> Dipole {
        Dipole::poly(&[0.0, 0.0, 0.0, 1.0])
    }

    pub fn spec(&self) -> &DipoleSpec {
        &self.spec
    }

    pub fn scaled(&self, a: f64) -> Dipole {
        match &self.spec {
            DipoleSpec::Poly { coeffs } => Dipole::poly(&coeffs.iter().map(|c| a * c).collect::<Vec<_>>()),
            DipoleSpec::Samples { x, y } => Dipole::from_spec(&DipoleSpec::Samples {
                x: x.clone(),
                y: y.iter().map(|v| a * v).collect(),
            })
            .expect("scaling keeps samples valid"),
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.eval_d(x, 0)
    }

    /// Derivative of order `d` ∈ {0, 1, 2}.
    pub fn eval_d(&self, x: f64, d: usize) -> f64 {
        match &self.repr {
            Repr::Poly(c) => poly_eval(&poly_deriv(c, d), x),
            Repr::Spline(s) => s.eval(x, d),
        }
    }

    fn poly_coeffs(&self) -> Option<&[f64]> {
        match &self.repr {
            Repr::Poly(c) => Some(c),
            Repr::Spline(_) => None,
        }
    }

    /// Sample spacing used to align quadrature panels with spline knots.
    fn knots(&self) -> usize {
        match &self.repr {
            Repr::Poly(_) => 1,
            Repr::Spline(s) => s.y.len() - 1,
        }
    }
}

fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * x + a)
}

fn poly_deriv(c: &[f64], d: usize) -> Vec<f64> {
    let mut out = c.to_vec();
    for _ in 0..d {
        if out.len() <= 1 {
            return vec![0.0];
        }
        out = out.iter().enumerate().skip(1).map(|(p, a)| p as f64 * a).collect();
    }
    out
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Not-a-knot cubic spline on a uniform grid of [0, 1].
#[derive(Clone, Debug)]
struct CubicSpline {
    h: f64,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl CubicSpline {
    fn new(x: &[f64], y: &[f64]) -> Result<CubicSpline> {
        let n = x.len();
        if n != y.len() || n < 4 {
            return Err(WellError::Input("samples need matching x/y with at least 4 points".into()));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(WellError::Input("non-finite dipole samples".into()));
        }
        let h = 1.0 / (n - 1) as f64;
        for (i, xi) in x.iter().enumerate() {
            if (xi - i as f64 * h).abs() > 1e-9 {
                return Err(WellError::Input("dipole samples must be uniform on [0,1]".into()));
            }
        }
        let r: Vec<f64> = (0..n)
            .map(|i| if i == 0 || i == n - 1 { 0.0 } else { 6.0 * (y[i + 1] - 2.0 * y[i] + y[i - 1]) / (h * h) })
            .collect();
        let mut m = vec![0.0; n];
        // Not-a-knot on a uniform grid decouples the first and last interior rows.
        m[1] = r[1] / 6.0;
        m[n - 2] = r[n - 2] / 6.0;
        if n > 4 {
            // Thomas solve for rows 2..=n-3 of M_{i-1} + 4 M_i + M_{i+1} = r_i.
            let lo = 2;
            let hi = n - 3;
            let len = hi + 1 - lo;
            let mut cp = vec![0.0; len];
            let mut dp = vec![0.0; len];
            for (t, i) in (lo..=hi).enumerate() {
                let mut rhs = r[i];
                if i == lo {
                    rhs -= m[1];
                }
                if i == hi {
                    rhs -= m[n - 2];
                }
                let denom = if t == 0 { 4.0 } else { 4.0 - cp[t - 1] };
                cp[t] = 1.0 / denom;
                dp[t] = if t == 0 { rhs / denom } else { (rhs - dp[t - 1]) / denom };
            }
            for t in (0..len).rev() {
                let next = if t + 1 < len { m[lo + t + 1] } else { 0.0 };
                m[lo + t] = dp[t] - cp[t] * next;
            }
        }
        m[0] = 2.0 * m[1] - m[2];
        m[n - 1] = 2.0 * m[n - 2] - m[n - 3];
        Ok(CubicSpline { h, y: y.to_vec(), m })
    }

    fn eval(&self, x: f64, d: usize) -> f64 {
        let n = self.y.len();
        let i = ((x / self.h).floor() as isize).clamp(0, n as isize - 2) as usize;
        let t = x - i as f64 * self.h;
        let (y0, y1, m0, m1, h) = (self.y[i], self.y[i + 1], self.m[i], self.m[i + 1], self.h);
        let b = (y1 - y0) / h - h * (2.0 * m0 + m1) / 6.0;
        let c = m0 / 2.0;
        let dd = (m1 - m0) / (6.0 * h);
        match d {
            0 => y0 + t * (b + t * (c + t * dd)),
            1 => b + t * (2.0 * c + 3.0 * dd * t),
            2 => 2.0 * c + 6.0 * dd * t,
            _ => 6.0 * dd,
        }
    }
}

/// ∫₀¹ x^p cos(nπx) dx for p = 0..=p_max (index p).
fn cos_moments(p_max: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; p_max + 1];
    if n == 0 {
        for (p, v) in c.iter_mut().enumerate() {
            *v = 1.0 / (p + 1) as f64;
        }
        return c;
    }
    let a = n as f64 * PI;
    let cos_a = if n % 2 == 0 { 1.0 } else { -1.0 };
    let mut s_prev = (1.0 - cos_a) / a; // S_0
    c[0] = 0.0;
    for p in 1..=p_max {
        let cp = -(p as f64 / a) * s_prev;
        let sp = -cos_a / a + (p as f64 / a) * c[p - 1];
        c[p] = cp;
        s_prev = sp;
    }
    c
}

/// ∫₀¹ q(x)·2 sin(jπx) sin(kπx) dx for a polynomial q.
fn poly_coupling(q: &[f64], j: usize, k: usize) -> f64 {
    let p_max = q.len().saturating_sub(1);
    let a = cos_moments(p_max, j.abs_diff(k));
    let b = cos_moments(p_max, j + k);
    q.iter().enumerate().map(|(p, c)| c * (a[p] - b[p])).sum()
}

fn check_mode(k: usize) -> Result<()> {
    if k == 0 {
        return Err(WellError::Input("mode indices start at 1".into()));
    }
    Ok(())
}

/// ⟨μφ_j, φ_k⟩.
pub fn coupling_coefficient(mu: &Dipole, j: usize, k: usize) -> Result<f64> {
    check_mode(j)?;
    check_mode(k)?;
    Ok(match mu.poly_coeffs() {
        Some(c) => poly_coupling(c, j, k),
        None => quad_coupling(mu, j.max(k), |x| mu.eval(x), j, k),
    })
}

/// ⟨(μ′)²φ_j, φ_j⟩.
pub fn grad_coupling_coefficient(mu: &Dipole, j: usize) -> Result<f64> {
    check_mode(j)?;
    Ok(match mu.poly_coeffs() {
        Some(c) => {
            let d = poly_deriv(c, 1);
            poly_coupling(&poly_mul(&d, &d), j, j)
        }
        None => quad_coupling(mu, j, |x| mu.eval_d(x, 1).powi(2), j, j),
    })
}

fn quad_rule(mu: &Dipole, k_max: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let knots = mu.knots();
    let per = (2 * k_max + 32).div_ceil(knots).max(1);
    let (mut xs, mut ws) = (Vec::new(), Vec::new());
    let h = 1.0 / knots as f64;
    for s in 0..knots {
        let (x, w) = composite_gl(s as f64 * h, (s + 1) as f64 * h, per, order.max(8));
        xs.extend(x);
        ws.extend(w);
    }
    (xs, ws)
}

fn quad_coupling(mu: &Dipole, k_max: usize, f: impl Fn(f64) -> f64, j: usize, k: usize) -> f64 {
    let (xs, ws) = quad_rule(mu, k_max, 12);
    xs.iter().zip(&ws).map(|(&x, w)| w * f(x) * eigenfunction(j, x) * eigenfunction(k, x)).sum()
}

/// Coupling matrix and the scalar quantities entering the hypotheses.
#[derive(Clone, Debug, Serialize)]
pub struct CouplingData {
    pub k_max: usize,
    pub n: usize,
    #[serde(skip)]
    pub mu_mat: DMatrix<f64>,
    #[serde(skip)]
    pub lambdas: Vec<f64>,
    /// ⟨(μ′)²φ_j, φ_j⟩ for j = 1..=3 (all three enter ℬ even when N = 2).
    pub grad_diag: Vec<f64>,
    pub a_scalar: f64,
    pub b_scalar: f64,
    pub combo_531: f64,
    pub combo_41: f64,
    pub diag_gap: f64,
}

impl CouplingData {
    pub fn build(mu: &Dipole, spec: BasisSpec, n: usize) -> Result<CouplingData> {
        if !(1..=3).contains(&n) {
            return Err(WellError::Input(format!("N must be 1, 2 or 3 (got {n})")));
        }
        if spec.k_max < n + 2 || spec.k_max < 3 {
            return Err(WellError::Input(format!("K_max = {} too small for N = {n}", spec.k_max)));
        }
        let k = spec.k_max;
        let mut mu_mat = DMatrix::zeros(k, k);
        match mu.poly_coeffs() {
            Some(c) => {
                for a in 0..k {
                    for b in a..k {
                        let v = poly_coupling(c, a + 1, b + 1);
                        mu_mat[(a, b)] = v;
                        mu_mat[(b, a)] = v;
                    }
                }
            }
            None => {
                let (xs, ws) = quad_rule(mu, k, spec.quadrature_order);
                let phi = basis_at(&xs, k);
                let wmu: Vec<f64> = xs.iter().zip(&ws).map(|(&x, w)| w * mu.eval(x)).collect();
                mu_mat = weighted_gram(&phi, &wmu);
            }
        }
        if mu_mat.iter().any(|v| !v.is_finite()) {
            return Err(WellError::Numerical("non-finite coupling entry".into()));
        }
        let grad_diag = (1..=3).map(|j| grad_coupling_coefficient(mu, j)).collect::<Result<Vec<_>>>()?;
        let m = |j: usize| mu_mat[(j - 1, j - 1)];
        let g = &grad_diag;
        let a_scalar = m(1) * g[1] - m(2) * g[0];
        let b_scalar = (m(3) - m(2)) * g[0] + (m(1) - m(3)) * g[1] + (m(2) - m(1)) * g[2];
        Ok(CouplingData {
            k_max: k,
            n,
            lambdas: spec.lambdas(),
            combo_531: 5.0 * m(1) - 8.0 * m(2) + 3.0 * m(3),
            combo_41: 4.0 * m(1) - m(2),
            diag_gap: m(1) - m(2),
            mu_mat,
            grad_diag,
            a_scalar,
            b_scalar,
        })
    }

    /// ⟨μφ_j, φ_k⟩ with 1-based indices.
    #[inline]
    pub fn m(&self, j: usize, k: usize) -> f64 {
        self.mu_mat[(j - 1, k - 1)]
    }

    #[inline]
    pub fn lambda(&self, k: usize) -> f64 {
        self.lambdas[k - 1]
    }

    /// α = sign(𝒜⟨μφ₁,φ₁⟩).
    pub fn alpha(&self) -> f64 {
        (self.a_scalar * self.m(1, 1)).signum()
    }

    /// β = sign(ℬ(⟨μφ₂,φ₂⟩ − ⟨μφ₁,φ₁⟩)).
    pub fn beta(&self) -> f64 {
        (self.b_scalar * (self.m(2, 2) - self.m(1, 1))).signum()
    }
}

fn basis_at(xs: &[f64], k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k, xs.len(), |a, q| eigenfunction(a + 1, xs[q]))
}

fn weighted_gram(phi: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut scaled = phi.clone();
    for (q, wq) in w.iter().enumerate() {
        scaled.column_mut(q).scale_mut(*wq);
    }
    &scaled * phi.transpose()
}

/// Finite-window estimate of the constant in the k⁻³ lower bound on couplings.
#[derive(Clone, Debug, Serialize)]
pub struct HypothesisReport {
    pub c_hat: f64,
    pub argmin: (usize, usize),
    pub window_k_max: usize,
    pub n: usize,
    pub threshold: f64,
    pub violated_on_window: bool,
    pub note: &'static str,
}

pub fn check_hypothesis_mu(data: &CouplingData, n: usize) -> HypothesisReport {
    let threshold = 1e-10;
    let mut best = (f64::INFINITY, (1, 1));
    for j in 1..=n.min(data.k_max) {
        for k in 1..=data.k_max {
            let v = data.m(j, k).abs() * (k as f64).powi(3);
            if v < best.0 {
                best = (v, (j, k));
            }
        }
    }
    HypothesisReport {
        c_hat: best.0,
        argmin: best.1,
        window_k_max: data.k_max,
        n,
        threshold,
        violated_on_window: best.0 <= threshold,
        note: "estimate over the finite window k <= K_max only",
    }
}

/// Galerkin matrices of 2μ′∂ₓ + μ″ (real skew) and (μ′)² (real symmetric).
#[derive(Clone, Debug)]
pub struct AuxMatrices {
    pub g1: DMatrix<f64>,
    pub g2: DMatrix<f64>,
}

impl AuxMatrices {
    pub fn build(mu: &Dipole, spec: BasisSpec) -> AuxMatrices {
        let k = spec.k_max;
        let (xs, ws) = quad_rule(mu, k, spec.quadrature_order);
        let phi = basis_at(&xs, k);
        let dphi = DMatrix::from_fn(k, xs.len(), |a, q| {
            let kk = (a + 1) as f64 * PI;
            std::f64::consts::SQRT_2 * kk * (kk * xs[q]).cos()
        });
        let w1: Vec<f64> = xs.iter().zip(&ws).map(|(&x, w)| w * mu.eval_d(x, 1)).collect();
        let w2: Vec<f64> = xs.iter().zip(&ws).map(|(&x, w)| w * mu.eval_d(x, 1).powi(2)).collect();
        // ⟨(2μ′∂ₓ + μ″)φ_l, φ_k⟩ = ∫ μ′ (φ_l′ φ_k − φ_l φ_k′) after integrating μ″ by parts.
        let mut a = phi.clone();
        for (q, wq) in w1.iter().enumerate() {
            a.column_mut(q).scale_mut(*wq);
        }
        let cross = &a * dphi.transpose(); // cross[(k,l)] = ∫ μ′ φ_k φ_l′
        let g1 = &cross - cross.transpose();
        let g2 = weighted_gram(&phi, &w2);
        AuxMatrices { g1, g2 }
    }
}

/// Matrix of multiplication by e^{iσμ} in the truncated basis, by quadrature.
pub fn multiplication_matrix(mu: &Dipole, sigma: f64, spec: BasisSpec) -> DMatrix<C64> {
    let k = spec.k_max;
    let (xs, ws) = quad_rule(mu, k, spec.quadrature_order);
    let phi = basis_at(&xs, k);
    let wc: Vec<f64> = xs.iter().zip(&ws).map(|(&x, w)| w * (sigma * mu.eval(x)).cos()).collect();
    let wsn: Vec<f64> = xs.iter().zip(&ws).map(|(&x, w)| w * (sigma * mu.eval(x)).sin()).collect();
    let re = weighted_gram(&phi, &wc);
    let im = weighted_gram(&phi, &wsn);
    DMatrix::from_fn(k, k, |a, b| C64::new(re[(a, b)], im[(a, b)]))
}

/// √(Σ_k |k³ a_k|²).
pub fn weighted_h3_norm(row: &[C64]) -> f64 {
    row.iter()
        .enumerate()
        .map(|(i, a)| {
            let k3 = ((i + 1) as f64).powi(3);
            (k3 * k3) * a.norm_sqr()
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spline_reproduces_cubic() {
        let n = 41;
        let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v.powi(3) - 0.5 * v).collect();
        let s = Dipole::from_spec(&DipoleSpec::Samples { x, y }).unwrap();
        for &t in &[0.0, 0.013, 0.37, 0.999, 1.0] {
            assert!((s.eval(t) - (t.powi(3) - 0.5 * t)).abs() < 1e-12);
            assert!((s.eval_d(t, 1) - (3.0 * t * t - 0.5)).abs() < 1e-10);
            assert!((s.eval_d(t, 2) - 6.0 * t).abs() < 1e-8);
        }
    }

    #[test]
    fn cos_moments_against_quadrature() {
        let (xs, ws) = composite_gl(0.0, 1.0, 64, 12);
        for n in [0usize, 1, 2, 7, 40] {
            let c = cos_moments(6, n);
            for (p, cp) in c.iter().enumerate() {
                let q: f64 = xs.iter().zip(&ws).map(|(x, w)| w * x.powi(p as i32) * (n as f64 * PI * x).cos()).sum();
                assert!((cp - q).abs() < 1e-13, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn aux_matrices_match_commutator_identity() {
        let mu = Dipole::cubic();
        let spec = BasisSpec::new(12);
        let aux = AuxMatrices::build(&mu, spec);
        let data = CouplingData::build(&mu, spec, 3).unwrap();
        for k in 1..=12 {
            for j in 1..=12 {
                let expect = -(data.lambda(k) - data.lambda(j)) * data.m(k, j);
                assert!((aux.g1[(k - 1, j - 1)] - expect).abs() < 1e-9 * (1.0 + expect.abs()));
            }
            assert!((aux.g2[(0, 0)] - data.grad_diag[0]).abs() < 1e-12);
        }
    }
}
