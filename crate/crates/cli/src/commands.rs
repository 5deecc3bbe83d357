use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::json;
use wellctl_core::dynamics::{propagate, PropagateOptions, StateFrame};
use wellctl_core::exec::Exec;
use wellctl_core::numerics::C64;
use wellctl_core::obstruction::{coercivity_scan, reachability_experiment, ReachabilityOptions};
use wellctl_core::reference::{self as rm, LinearOptions, LocalController, LocalOptions, ReferenceMeta, ReferenceOptions, ReferenceTrajectory};
use wellctl_core::spectral::check_hypothesis_mu;
use wellctl_core::{BasisSpec, ControlSignal, CouplingData, Dipole, WellError};

use crate::config::{ControlSpec, RunConfig, TargetSpec};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Core(WellError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                WellError::Input(_) => 2,
                WellError::Precondition(_) | WellError::Compatibility(_) | WellError::Unreachable(_) => 3,
                _ => 4,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<WellError> for CliError {
    fn from(e: WellError) -> Self {
        CliError::Core(e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io<E: fmt::Display>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// Every report carries the toolkit version and the resolved configuration.
fn write_report<T: Serialize>(out: &Path, command: &str, cfg: &RunConfig, result: &T) -> Result<()> {
    let doc = json!({
        "tool": "wellctl",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg,
        "result": result,
    });
    let path = out.join(format!("{command}.json"));
    let text = serde_json::to_string_pretty(&doc).map_err(io(&path))?;
    std::fs::write(&path, text + "\n").map_err(io(&path))
}

fn write_control_csv(path: &Path, u: &ControlSignal) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(io(path))?;
    w.write_record(["t_start", "t_end", "value"]).map_err(io(path))?;
    for (m, v) in u.values.iter().enumerate() {
        let (a, b) = u.ends(m);
        w.serialize((a, b, v)).map_err(io(path))?;
    }
    w.flush().map_err(io(path))
}

fn read_control_csv(path: &Path, t0: f64, duration: f64) -> Result<ControlSignal> {
    let mut r = csv::Reader::from_path(path).map_err(io(path))?;
    let mut values = Vec::new();
    for row in r.deserialize::<(f64, f64, f64)>() {
        values.push(row.map_err(io(path))?.2);
    }
    if values.is_empty() {
        return Err(CliError::Config(format!("{}: empty control", path.display())));
    }
    Ok(ControlSignal::constant_on(t0, duration, values))
}

fn dipole(cfg: &RunConfig) -> Result<Dipole> {
    Ok(Dipole::from_spec(&cfg.dipole)?)
}

fn coupling(cfg: &RunConfig, n: usize) -> Result<CouplingData> {
    Ok(CouplingData::build(&dipole(cfg)?, BasisSpec::new(cfg.k_max), n)?)
}

fn pair(z: C64) -> [f64; 2] {
    [z.re, z.im]
}

pub fn check_hypotheses(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = coupling(cfg, cfg.n)?;
    let c = check_hypothesis_mu(&data, cfg.n);
    let tiny = 1e-12;
    let a_ok = data.a_scalar.abs() > tiny;
    let b_ok = data.b_scalar.abs() > tiny;
    let combo_ok = data.combo_531.abs() > tiny;
    let gap_ok = data.diag_gap.abs() > tiny;
    let c_ok = !c.violated_on_window;
    let verdict = |ok: bool| if ok { "satisfied" } else { "degenerate" };
    let result = json!({
        "coupling_lower_bound": c,
        "A": data.a_scalar,
        "B": data.b_scalar,
        "combo_531": data.combo_531,
        "combo_41": data.combo_41,
        "diag_gap": data.diag_gap,
        "grad_diag": data.grad_diag,
        "alpha": data.alpha(),
        "beta": data.beta(),
        "flags": {
            "coupling_lower_bound": verdict(c_ok),
            "A_nonzero": verdict(a_ok),
            "B_nonzero": verdict(b_ok),
            "combo_531_nonzero": verdict(combo_ok),
            "diag_gap_nonzero": verdict(gap_ok),
        },
        "all_satisfied": c_ok && a_ok && b_ok && combo_ok && gap_ok,
    });
    write_report(out, "check-hypotheses", cfg, &result)
}

fn simulate_control(cfg: &RunConfig) -> ControlSignal {
    let s = &cfg.simulate;
    match &s.control {
        ControlSpec::Zero => ControlSignal::zeros(s.t, s.intervals),
        ControlSpec::Values { values } => ControlSignal::piecewise_constant(s.t, values.clone()),
        ControlSpec::Sine { amplitude, frequency, offset } => {
            let w = 2.0 * std::f64::consts::PI * frequency / s.t;
            ControlSignal::from_fn_midpoint(s.t, s.intervals, |t| amplitude * (w * t).sin() + offset)
        }
    }
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = coupling(cfg, cfg.n)?;
    let u = simulate_control(cfg);
    u.validate()?;
    let opts = PropagateOptions { integrator: cfg.simulate.integrator, stride: cfg.simulate.stride, ..Default::default() };
    let tr = propagate(&StateFrame::eigenstates(cfg.n, cfg.k_max), &u, &data, &opts)?;
    let last = tr.last();
    let overlaps: Vec<[f64; 2]> = (0..cfg.n).map(|j| pair(last.overlap_free(j, j + 1))).collect();
    let path = out.join("trajectory.csv");
    let mut w = csv::Writer::from_path(&path).map_err(io(&path))?;
    w.write_record(["t", "j", "k", "re", "im"]).map_err(io(&path))?;
    for row in tr.csv_rows() {
        w.serialize(row).map_err(io(&path))?;
    }
    w.flush().map_err(io(&path))?;
    write_control_csv(&out.join("control.csv"), &u)?;
    let result = json!({
        "meta": tr.meta,
        "T": last.t,
        "diagonal_overlaps": overlaps,
        "files": ["trajectory.csv", "control.csv"],
    });
    write_report(out, "simulate", cfg, &result)
}

pub fn obstruction(cfg: &RunConfig, out: &Path) -> Result<()> {
    let o = &cfg.obstruction;
    let n = cfg.n.max(o.variant.n());
    let data = coupling(cfg, n)?;
    let k_trunc = o.k_trunc.unwrap_or(cfg.k_max);
    let scan = coercivity_scan(&data, o.variant, &o.t_grid, o.resolution, k_trunc, Exec::Auto)?;
    let reach = if scan.applicable {
        let opts = ReachabilityOptions { trials: o.trials, seed: cfg.seed, intervals: o.intervals, budget: o.budget, ..Default::default() };
        Some(reachability_experiment(&data, o.reach_t, o.variant, &opts, Exec::Auto)?)
    } else {
        None
    };
    let result = json!({
        "applicable": scan.applicable,
        "note": if scan.applicable { "" } else { "not applicable: the combined form has no leading sign for this dipole" },
        "coercivity": scan,
        "reachability": reach,
    });
    write_report(out, "obstruction", cfg, &result)
}

fn reference_data(cfg: &RunConfig) -> Result<CouplingData> {
    let n = cfg.reference.variant.n();
    if n != cfg.n {
        return Err(CliError::Config(format!("reference variant needs N = {n}, configuration has N = {}", cfg.n)));
    }
    coupling(cfg, n)
}

fn reference_options(cfg: &RunConfig) -> ReferenceOptions {
    ReferenceOptions { dt: cfg.reference.dt, k_pump: cfg.reference.k_pump, ..Default::default() }
}

fn build(cfg: &RunConfig, data: &CouplingData) -> Result<ReferenceTrajectory> {
    let r = &cfg.reference;
    Ok(rm::build_reference(data, r.eta, r.eps, r.eps1, r.t1, r.variant, &reference_options(cfg))?)
}

const META: &str = "reference_meta.json";
const CONTROL: &str = "reference_control.csv";

fn save_bundle(out: &Path, rf: &ReferenceTrajectory) -> Result<()> {
    let path = out.join(META);
    let text = serde_json::to_string_pretty(&rf.meta).map_err(io(&path))?;
    std::fs::write(&path, text + "\n").map_err(io(&path))?;
    write_control_csv(&out.join(CONTROL), &rf.control)
}

fn load_bundle(dir: &Path, data: &CouplingData) -> Result<ReferenceTrajectory> {
    let path = dir.join(META);
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    let meta: ReferenceMeta = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if meta.k_max != data.k_max || meta.variant.n() != data.n {
        return Err(CliError::Config("reference bundle was built for a different truncation or particle number".into()));
    }
    let control = read_control_csv(&dir.join(CONTROL), 0.0, meta.t1)?;
    Ok(ReferenceTrajectory::from_parts(meta, control, data)?)
}

pub fn build_reference(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = reference_data(cfg)?;
    let rf = build(cfg, &data)?;
    save_bundle(out, &rf)?;
    let synth = rm::LinearSynthesizer::new(&rf, &data, &LinearOptions::default());
    let gap = rm::riesz_gap(&rf, &data, rf.meta.t1)?;
    let result = json!({
        "meta": rf.meta,
        "riesz_gap": gap,
        "family_condition": synth.as_ref().ok().map(|s| s.full_cond),
        "family_error": synth.as_ref().err().map(|e| e.to_string()),
        "files": [META, CONTROL],
    });
    write_report(out, "build-reference", cfg, &result)
}

fn targets(cfg: &RunConfig, rf: &ReferenceTrajectory) -> Result<Vec<StateFrame>> {
    Ok(match &cfg.control.target {
        TargetSpec::ReferenceEndpoint => vec![rf.end_state.clone()],
        TargetSpec::RandomAdmissible { radius, count } => {
            (0..*count as u64).map(|i| rm::random_admissible_target(rf, *radius, cfg.seed.wrapping_add(i))).collect()
        }
        TargetSpec::Explicit { rows } => {
            let (n, k) = (rf.n(), rf.end_state.k());
            if rows.len() != n || rows.iter().any(|r| r.len() != k) {
                return Err(CliError::Config(format!("explicit target must have {n} rows of {k} coefficients")));
            }
            let coeffs = DMatrix::from_fn(n, k, |j, c| C64::new(rows[j][c][0], rows[j][c][1]));
            vec![StateFrame { t: rf.meta.t_eta, coeffs }]
        }
    })
}

pub fn control(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = reference_data(cfg)?;
    let rf = match &cfg.control.reference_bundle {
        Some(dir) => load_bundle(Path::new(dir), &data)?,
        None => build(cfg, &data)?,
    };
    let opts = LocalOptions { radius: cfg.control.radius, ..Default::default() };
    let ctl = LocalController::new(&rf, &data, &opts)?;
    let goals = targets(cfg, &rf)?;
    let sols = ctl.solve_many(&goals, Exec::Auto);
    let mut records = Vec::new();
    for (i, s) in sols.into_iter().enumerate() {
        let s = s?;
        let file = format!("control_{i}.csv");
        write_control_csv(&out.join(&file), &s.control)?;
        let same = s.control == rf.control;
        records.push(json!({
            "target": i,
            "iterations": s.iterations,
            "history": s.history,
            "endpoint_error": s.endpoint_error,
            "control_norm": s.control.l2_norm(),
            "equals_reference_control": same,
            "file": file,
        }));
    }
    save_bundle(out, &rf)?;
    let result = json!({
        "reference": rf.meta,
        "solutions": records,
    });
    write_report(out, "control", cfg, &result)
}
