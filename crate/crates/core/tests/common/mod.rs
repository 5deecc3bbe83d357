#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wellctl_core::ControlSignal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth random control on [0, t] with `modes` Fourier modes and L² norm `norm`.
pub fn random_control(rng: &mut ChaCha8Rng, t: f64, intervals: usize, modes: usize, norm: f64) -> ControlSignal {
    let c: Vec<(f64, f64)> = (0..=modes).map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
    let raw = ControlSignal::from_fn_midpoint(t, intervals, |x| {
        c.iter()
            .enumerate()
            .map(|(m, (a, b))| {
                let w = 2.0 * std::f64::consts::PI * m as f64 * x / t;
                a * w.cos() + b * w.sin()
            })
            .sum()
    });
    let n = raw.l2_norm();
    raw.scaled(norm / n)
}

/// Random control with zero mean, so its primitive vanishes at both ends.
pub fn zero_mean_control(rng: &mut ChaCha8Rng, t: f64, intervals: usize, modes: usize, norm: f64) -> ControlSignal {
    let mut v = random_control(rng, t, intervals, modes, 1.0);
    let mean = v.integral() / t;
    for x in v.values.iter_mut() {
        *x -= mean;
    }
    let n = v.l2_norm();
    v.scaled(norm / n)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Least-squares slope of log y against log x.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
