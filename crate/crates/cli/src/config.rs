//! Run configuration: a single JSON document, validated before any work starts.

use serde::{Deserialize, Serialize};
use wellctl_core::dynamics::Integrator;
use wellctl_core::obstruction::FormVariant;
use wellctl_core::reference::Variant;
use wellctl_core::DipoleSpec;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dipole: DipoleSpec,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K_max")]
    pub k_max: usize,
    pub seed: u64,
    pub simulate: SimulateConfig,
    pub obstruction: ObstructionConfig,
    pub reference: ReferenceConfig,
    pub control: ControlConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dipole: DipoleSpec::default(),
            n: 3,
            k_max: 20,
            seed: 0,
            simulate: SimulateConfig::default(),
            obstruction: ObstructionConfig::default(),
            reference: ReferenceConfig::default(),
            control: ControlConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlSpec {
    Zero,
    /// Piecewise-constant values on a uniform grid of [0, T].
    Values { values: Vec<f64> },
    /// a·sin(2π f t / T) + b.
    Sine { amplitude: f64, frequency: f64, offset: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(rename = "T")]
    pub t: f64,
    pub intervals: usize,
    pub stride: usize,
    pub integrator: Integrator,
    pub control: ControlSpec,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { t: 1.0, intervals: 1000, stride: 10, integrator: Integrator::Exact, control: ControlSpec::Zero }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObstructionConfig {
    pub variant: FormVariant,
    pub t_grid: Vec<f64>,
    pub resolution: usize,
    /// Modes kept in the forms; K_max when absent.
    pub k_trunc: Option<usize>,
    #[serde(rename = "reach_T")]
    pub reach_t: f64,
    pub trials: usize,
    pub budget: f64,
    pub intervals: usize,
}

impl Default for ObstructionConfig {
    fn default() -> Self {
        ObstructionConfig {
            variant: FormVariant::N2,
            t_grid: vec![0.005, 0.01, 0.02, 0.05, 0.1],
            resolution: 128,
            k_trunc: None,
            reach_t: 0.1,
            trials: 50,
            budget: 0.1,
            intervals: 512,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub variant: Variant,
    pub eta: f64,
    pub eps: f64,
    pub eps1: f64,
    #[serde(rename = "T1")]
    pub t1: f64,
    pub dt: f64,
    pub k_pump: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig { variant: Variant::N3PhaseDelay, eta: 1e-2, eps: 0.3, eps1: 0.2, t1: 1.0, dt: 1e-3, k_pump: 4 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TargetSpec {
    /// The reference endpoint itself.
    ReferenceEndpoint,
    /// Seeded random unitary perturbation of the reference endpoint.
    RandomAdmissible { radius: f64, count: usize },
    /// Explicit coefficients, one row of `[re, im]` pairs per particle.
    Explicit { rows: Vec<Vec<[f64; 2]>> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub target: TargetSpec,
    /// Directory holding a previously built reference bundle.
    pub reference_bundle: Option<String>,
    pub radius: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig { target: TargetSpec::ReferenceEndpoint, reference_bundle: None, radius: 1e-2 }
    }
}

fn positive(name: &str, x: f64) -> Result<(), String> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(format!("{name} must be positive and finite (got {x})"))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=3).contains(&self.n) {
            return Err(format!("N must be 1, 2 or 3 (got {})", self.n));
        }
        if self.k_max < self.n + 2 {
            return Err(format!("K_max = {} too small for N = {}", self.k_max, self.n));
        }
        let s = &self.simulate;
        positive("simulate.T", s.t)?;
        if s.intervals == 0 || s.stride == 0 {
            return Err("simulate.intervals and simulate.stride must be positive".into());
        }
        if let ControlSpec::Values { values } = &s.control {
            if values.is_empty() {
                return Err("simulate.control.values is empty".into());
            }
        }
        let o = &self.obstruction;
        if o.t_grid.is_empty() {
            return Err("obstruction.t_grid is empty".into());
        }
        for t in &o.t_grid {
            positive("obstruction.t_grid entry", *t)?;
        }
        positive("obstruction.reach_T", o.reach_t)?;
        positive("obstruction.budget", o.budget)?;
        if o.k_trunc.is_some_and(|k| k > self.k_max || k < 3) || o.resolution == 0 || o.intervals == 0 {
            return Err("obstruction.k_trunc must lie in [3, K_max]; resolution and intervals must be positive".into());
        }
        let r = &self.reference;
        positive("reference.eps", r.eps)?;
        positive("reference.eps1", r.eps1)?;
        positive("reference.T1", r.t1)?;
        positive("reference.dt", r.dt)?;
        if r.eta < 0.0 || !r.eta.is_finite() {
            return Err("reference.eta must be non-negative".into());
        }
        if !(r.eps1 < r.eps && r.eps < r.t1) {
            return Err("stage times must satisfy eps1 < eps < T1".into());
        }
        positive("control.radius", self.control.radius)?;
        Ok(())
    }
}
