//! Small numerical kernels shared by the other modules: phi functions of the
//! exponential integrators, Gauss–Legendre rules and a few complex helpers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type C64 = Complex64;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

/// `[φ1(z), φ2(z), φ3(z), φ4(z)]` with φ_k(z) = Σ_n z^n/(n+k)!.
///
/// φ1(z) = (e^z − 1)/z is the mean of e^{zx} over [0,1].
pub fn phi(z: C64) -> [C64; 4] {
    if z.norm() < 2.0 {
        // Power series; 34 terms put the truncation below 1e-18 for |z| < 2.
        let mut out = [C64::new(0.0, 0.0); 4];
        for (k, slot) in out.iter_mut().enumerate() {
            let k = k + 1;
            let mut term = C64::new(1.0 / factorial(k), 0.0);
            let mut sum = term;
            for n in 1..34 {
                term = term * z / (n + k) as f64;
                sum += term;
            }
            *slot = sum;
        }
        out
    } else {
        let mut p = z.exp();
        let mut out = [C64::new(0.0, 0.0); 4];
        for k in 0..4 {
            p = (p - 1.0 / factorial(k)) / z;
            out[k] = p;
        }
        out
    }
}

/// φ1 only, cheaper path for the common case.
#[inline]
pub fn phi1(z: C64) -> C64 {
    if z.norm() < 1e-3 {
        C64::new(1.0, 0.0) + z * (0.5 + z * (1.0 / 6.0 + z / 24.0))
    } else {
        (z.exp() - 1.0) / z
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|x| x as f64).product()
}

/// ∫_a^{a+h} e^{iωt} dt, exact.
#[inline]
pub fn exp_integral(omega: f64, a: f64, h: f64) -> C64 {
    C64::from_polar(h, omega * a) * phi1(C64::new(0.0, omega * h))
}

/// Gauss–Legendre nodes and weights on [-1, 1] (Newton on P_n).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Composite Gauss–Legendre rule on [a, b] with `panels` equal panels.
pub fn composite_gl(a: f64, b: f64, panels: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut xs = Vec::with_capacity(panels * order);
    let mut ws = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let c = a + (p as f64 + 0.5) * h;
        for (xi, wi) in x.iter().zip(&w) {
            xs.push(c + 0.5 * h * xi);
            ws.push(0.5 * h * wi);
        }
    }
    (xs, ws)
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|x| C64::new(x, 0.0))
}

/// Eigen-decomposition of a real symmetric matrix; eigenvalues ascending.
pub fn sym_eigen(m: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let e = m.symmetric_eigen();
    (e.eigenvalues, e.eigenvectors)
}

/// Least-squares slope of log(y) against log(x).
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in lx.iter().zip(&ly) {
        num += (a - mx) * (b - my);
        den += (a - mx) * (a - mx);
    }
    num / den
}

/// Distance of `x` to the nearest multiple of 2π.
pub fn wrap_residual(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    (x - two_pi * (x / two_pi).round()).abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_branches_agree() {
        for &r in &[0.5, 1.9, 2.1, 7.0] {
            for &a in &[0.3, 1.7, 3.0] {
                let z = C64::from_polar(r, a);
                let p = phi(z);
                // φ2 = (φ1 − 1)/z holds on both branches.
                assert!((p[1] - (p[0] - 1.0) / z).norm() < 1e-13);
                assert!((p[0] - (z.exp() - 1.0) / z).norm() < 1e-13);
            }
        }
        let p = phi(C64::new(0.0, 0.0));
        assert!((p[3].re - 1.0 / 24.0).abs() < 1e-16);
    }

    #[test]
    fn gl_integrates_polynomials() {
        let (x, w) = gauss_legendre(6);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert!((s - 2.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn exp_integral_matches_formula() {
        let v = exp_integral(3.0, 0.2, 0.5);
        let exact = ((I * 3.0 * 0.7).exp() - (I * 3.0 * 0.2).exp()) / (I * 3.0);
        assert!((v - exact).norm() < 1e-15);
        assert!((exp_integral(0.0, 1.0, 0.25).re - 0.25).abs() < 1e-16);
    }
}
