//! Real control signals on uniform grids and exact interval integrals against
//! complex exponentials.

use serde::{Deserialize, Serialize};

use crate::error::{Result, WellError};
use crate::numerics::{exp_integral, phi, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// One value per interval.
    PiecewiseConstant,
    /// One value per node, linear in between.
    PiecewiseLinear,
}

/// A real signal on `[t0, t0 + M·dt]` with a uniform partition into `M` intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSignal {
    pub t0: f64,
    pub dt: f64,
    pub kind: SignalKind,
    pub values: Vec<f64>,
}

impl ControlSignal {
    pub fn zeros(t: f64, intervals: usize) -> ControlSignal {
        ControlSignal::constant_on(0.0, t, vec![0.0; intervals])
    }

    /// Piecewise-constant signal on `[t0, t0 + duration]`.
    pub fn constant_on(t0: f64, duration: f64, values: Vec<f64>) -> ControlSignal {
        let dt = duration / values.len() as f64;
        ControlSignal { t0, dt, kind: SignalKind::PiecewiseConstant, values }
    }

    pub fn piecewise_constant(t: f64, values: Vec<f64>) -> ControlSignal {
        ControlSignal::constant_on(0.0, t, values)
    }

    /// Piecewise-linear signal on `[0, t]` from node values.
    pub fn piecewise_linear(t: f64, nodes: Vec<f64>) -> ControlSignal {
        let dt = t / (nodes.len() - 1) as f64;
        ControlSignal { t0: 0.0, dt, kind: SignalKind::PiecewiseLinear, values: nodes }
    }

    /// Samples `f` at interval midpoints (piecewise-constant) on `[0, t]`.
    pub fn from_fn_midpoint(t: f64, intervals: usize, f: impl Fn(f64) -> f64) -> ControlSignal {
        let dt = t / intervals as f64;
        ControlSignal::piecewise_constant(t, (0..intervals).map(|m| f((m as f64 + 0.5) * dt)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(WellError::Input("control grid step must be positive".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(WellError::Input("non-finite control value".into()));
        }
        if self.kind == SignalKind::PiecewiseLinear && self.values.len() < 2 {
            return Err(WellError::Input("piecewise-linear signal needs two nodes".into()));
        }
        Ok(())
    }

    pub fn intervals(&self) -> usize {
        match self.kind {
            SignalKind::PiecewiseConstant => self.values.len(),
            SignalKind::PiecewiseLinear => self.values.len() - 1,
        }
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.intervals() as f64
    }

    pub fn t_end(&self) -> f64 {
        self.t0 + self.duration()
    }

    pub fn node(&self, m: usize) -> f64 {
        self.t0 + m as f64 * self.dt
    }

    /// End values `(a, b)` of interval `m`.
    #[inline]
    pub fn ends(&self, m: usize) -> (f64, f64) {
        match self.kind {
            SignalKind::PiecewiseConstant => (self.values[m], self.values[m]),
            SignalKind::PiecewiseLinear => (self.values[m], self.values[m + 1]),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let x = ((t - self.t0) / self.dt).max(0.0);
        let m = (x.floor() as usize).min(self.intervals() - 1);
        let (a, b) = self.ends(m);
        a + (b - a) * (x - m as f64)
    }

    /// Exact L² norm.
    pub fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        for m in 0..self.intervals() {
            let (a, b) = self.ends(m);
            s += (a * a + a * b + b * b) / 3.0;
        }
        (s * self.dt).sqrt()
    }

    pub fn integral(&self) -> f64 {
        (0..self.intervals()).map(|m| {
            let (a, b) = self.ends(m);
            0.5 * (a + b)
        }).sum::<f64>() * self.dt
    }

    /// Primitive s(t) = ∫_{t0}^t u as a piecewise-linear signal (requires piecewise-constant u).
    pub fn primitive(&self) -> ControlSignal {
        assert_eq!(self.kind, SignalKind::PiecewiseConstant, "primitive of a piecewise-constant signal");
        let mut nodes = Vec::with_capacity(self.values.len() + 1);
        let mut acc = 0.0;
        nodes.push(0.0);
        for v in &self.values {
            acc += v * self.dt;
            nodes.push(acc);
        }
        ControlSignal { t0: self.t0, dt: self.dt, kind: SignalKind::PiecewiseLinear, values: nodes }
    }

    pub fn scaled(&self, a: f64) -> ControlSignal {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= a);
        out
    }

    pub fn add_scaled(&mut self, other: &ControlSignal, a: f64) {
        assert_eq!(self.values.len(), other.values.len());
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    /// ∫ u(t) e^{iωt} dt over the interval `m`, exact.
    #[inline]
    pub fn interval_moment(&self, m: usize, omega: f64) -> C64 {
        let (a, b) = self.ends(m);
        let t = self.node(m);
        if a == b {
            return a * exp_integral(omega, t, self.dt);
        }
        let p = phi(C64::new(0.0, omega * self.dt));
        // ∫_0^1 (a + (b − a)x) e^{zx} dx = a φ1 + (b − a)(φ1 − φ2)
        let local = a * p[0] + (b - a) * (p[0] - p[1]);
        C64::from_polar(self.dt, omega * t) * local
    }

    /// ∫ u(t) e^{iωt} dt over the whole signal, exact.
    pub fn moment(&self, omega: f64) -> C64 {
        (0..self.intervals()).map(|m| self.interval_moment(m, omega)).sum()
    }

    /// Concatenate piecewise-constant pieces sharing one step.
    pub fn concat(parts: &[&ControlSignal]) -> ControlSignal {
        let dt = parts[0].dt;
        let mut values = Vec::new();
        for p in parts {
            assert!((p.dt - dt).abs() < 1e-12 * dt, "grid steps differ");
            assert_eq!(p.kind, SignalKind::PiecewiseConstant);
            values.extend_from_slice(&p.values);
        }
        ControlSignal { t0: parts[0].t0, dt, kind: SignalKind::PiecewiseConstant, values }
    }

    /// Copy of `self` restricted to intervals `[a, b)`.
    pub fn slice(&self, a: usize, b: usize) -> ControlSignal {
        assert_eq!(self.kind, SignalKind::PiecewiseConstant);
        ControlSignal { t0: self.node(a), dt: self.dt, kind: self.kind, values: self.values[a..b].to_vec() }
    }
}

/// D(ω) = ∫₀ᵀ f(t) e^{iωt} ∫₀ᵗ g(τ) e^{−iωτ} dτ dt for signals on a common grid.
///
/// Im D is the Volterra form with kernel sin(ω(t−τ)); evaluated exactly for
/// piecewise-constant or piecewise-linear f and g.
pub fn volterra_exp(f: &ControlSignal, g: &ControlSignal, omega: f64) -> C64 {
    let n = f.intervals();
    assert_eq!(n, g.intervals());
    let dt = f.dt;
    let z = C64::new(0.0, omega * dt);
    let p = phi(z);
    let pm = phi(-z);
    // Triangle weights W_ab = ∫₀¹∫₀ˣ x^a y^b e^{z(x−y)} dy dx.
    let w00 = p[1];
    let w10 = p[1] - p[2];
    let w01 = p[2];
    let w11 = p[2] - p[3];
    let mut cum = C64::new(0.0, 0.0); // ∫₀^{t_m} g e^{−iωτ}
    let mut total = C64::new(0.0, 0.0);
    for m in 0..n {
        let (fa, fb) = f.ends(m);
        let (ga, gb) = g.ends(m);
        let t = f.node(m);
        let rot = C64::from_polar(1.0, omega * t);
        let fm = rot * dt * (fa * p[0] + (fb - fa) * (p[0] - p[1]));
        let gm = rot.conj() * dt * (ga * pm[0] + (gb - ga) * (pm[0] - pm[1]));
        let tri = dt * dt
            * (fa * ga * w00 + (fb - fa) * ga * w10 + fa * (gb - ga) * w01 + (fb - fa) * (gb - ga) * w11);
        total += fm * cum + tri;
        cum += gm;
    }
    total
}

/// ∫ f(t)² dt, exact.
pub fn square_integral(f: &ControlSignal) -> f64 {
    f.l2_norm().powi(2)
}
