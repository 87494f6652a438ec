//! Scenario configuration, trajectory execution and file output.
//!
//! Configuration files are flat `key = value` text, one entry per line, with
//! `#` starting a comment. Vector values are three comma-separated numbers,
//! optionally wrapped in parentheses:
//!
//! ```text
//! # reference scenario
//! integrator = hamel
//! m = 1
//! r = 9.8
//! h = 0.2
//! steps = 10000
//! omega0 = 0.6, 0, 0
//! gamma0 = (0.3, 0.2, -0.932738)
//! ```
//!
//! Layers combine as preset < file < command-line flags.

use std::fmt::{self, Write as _};
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::diagnostics::{
    body_distance, node_average, Accumulator, ConvergenceReport, Observables, TimeGrid,
};
use crate::error::Error;
use crate::geometry::Vector3;
use crate::hamel::{self, HalfStepState, SolverConfig, SolverMode};
use crate::model::{embed, BodyState, EmbeddedState, PendulumParams, GAMMA_ADMISSION_TOL};
use crate::reference::{
    rattle_step, rattle_step_report, rk4_embedded_step, rk4_step, sv_step, sv_step_report,
    RattleConfig,
};

/// Step size of the RK4 runs used as the exact flow.
pub const REFERENCE_STEP: f64 = 1e-5;

/// Final time of convergence studies when none is configured.
pub const DEFAULT_CONVERGENCE_TIME: f64 = 1.0;

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONVERGENCE_FILE: &str = "convergence.json";

pub const BODY_HEADER: &str =
    "step,t,Gamma1,Gamma2,Gamma3,Omega1,Omega2,norm_err,energy,energy_err,momentum,momentum_err";
pub const EMBEDDED_HEADER: &str =
    "step,t,x1,x2,x3,p1,p2,p3,norm_err,energy,energy_err,momentum,momentum_err";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing required keys: {}", .0.join(", "))]
    Missing(Vec<&'static str>),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("unknown preset `{0}` (available: paper-fig1, equator-cross)")]
    UnknownPreset(String),
    #[error("{0}")]
    Usage(String),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("solver failure at step {step}: {source}")]
    Solver { step: usize, source: Error },
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Solver { .. } => 3,
            HarnessError::Io { .. } => 4,
        }
    }

    fn io(context: impl Into<String>) -> impl FnOnce(io::Error) -> Self {
        let context = context.into();
        move |source| HarnessError::Io { context, source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegratorKind {
    Hamel,
    Sv,
    Rattle,
    Rk4,
}

impl IntegratorKind {
    pub fn name(self) -> &'static str {
        match self {
            IntegratorKind::Hamel => "hamel",
            IntegratorKind::Sv => "sv",
            IntegratorKind::Rattle => "rattle",
            IntegratorKind::Rk4 => "rk4",
        }
    }

    pub fn is_embedded(self) -> bool {
        matches!(self, IntegratorKind::Sv | IntegratorKind::Rattle)
    }
}

impl fmt::Display for IntegratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IntegratorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hamel" => Ok(IntegratorKind::Hamel),
            "sv" => Ok(IntegratorKind::Sv),
            "rattle" => Ok(IntegratorKind::Rattle),
            "rk4" => Ok(IntegratorKind::Rk4),
            other => Err(format!(
                "expected one of hamel, sv, rattle, rk4; got `{other}`"
            )),
        }
    }
}

fn parse_mode(s: &str) -> Result<SolverMode, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "fixed-point" | "fixed_point" | "fixedpoint" => Ok(SolverMode::FixedPoint),
        "newton" => Ok(SolverMode::Newton),
        other => Err(format!("expected fixed-point or newton; got `{other}`")),
    }
}

fn mode_name(mode: SolverMode) -> &'static str {
    match mode {
        SolverMode::FixedPoint => "fixed-point",
        SolverMode::Newton => "newton",
    }
}

/// Fully validated scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioConfig {
    pub integrator: IntegratorKind,
    pub m: f64,
    pub r: f64,
    pub g: f64,
    pub h: f64,
    pub steps: usize,
    pub omega0: Vector3,
    pub gamma0: Vector3,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub solver: SolverMode,
    pub compensated: bool,
    pub out: PathBuf,
    /// Final time for convergence studies.
    pub t_final: Option<f64>,
}

impl ScenarioConfig {
    pub fn params(&self) -> PendulumParams {
        PendulumParams::new(self.m, self.r, self.g).expect("validated at construction")
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            mode: self.solver,
        }
    }

    pub fn rattle_config(&self) -> RattleConfig {
        RattleConfig {
            root_tolerance: self.tolerance,
            max_iterations: self.max_iterations,
        }
    }

    pub fn initial_body_state(&self) -> BodyState {
        BodyState::new(self.gamma0, self.omega0).expect("validated at construction")
    }

    /// Renders the configuration in the file schema accepted by
    /// [`parse_config`].
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        let vec = |v: Vector3| format!("{}, {}, {}", v[0], v[1], v[2]);
        let _ = writeln!(out, "integrator = {}", self.integrator);
        let _ = writeln!(out, "m = {}", self.m);
        let _ = writeln!(out, "r = {}", self.r);
        let _ = writeln!(out, "g = {}", self.g);
        let _ = writeln!(out, "h = {}", self.h);
        let _ = writeln!(out, "steps = {}", self.steps);
        let _ = writeln!(out, "omega0 = {}", vec(self.omega0));
        let _ = writeln!(out, "gamma0 = {}", vec(self.gamma0));
        let _ = writeln!(out, "tolerance = {}", self.tolerance);
        let _ = writeln!(out, "max_iterations = {}", self.max_iterations);
        let _ = writeln!(out, "solver = {}", mode_name(self.solver));
        let _ = writeln!(out, "compensated = {}", self.compensated);
        let _ = writeln!(out, "out = {}", self.out.display());
        if let Some(t) = self.t_final {
            let _ = writeln!(out, "t_final = {t}");
        }
        out
    }
}

/// One layer of configuration; unset fields defer to lower layers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigLayer {
    pub integrator: Option<IntegratorKind>,
    pub m: Option<f64>,
    pub r: Option<f64>,
    pub g: Option<f64>,
    pub h: Option<f64>,
    pub steps: Option<usize>,
    pub omega0: Option<Vector3>,
    pub gamma0: Option<Vector3>,
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
    pub solver: Option<SolverMode>,
    pub compensated: Option<bool>,
    pub out: Option<PathBuf>,
    pub t_final: Option<f64>,
}

const REQUIRED_KEYS: [&str; 6] = ["m", "r", "h", "steps", "omega0", "gamma0"];

impl ConfigLayer {
    /// Named scenario presets.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let base = ConfigLayer {
            m: Some(1.0),
            r: Some(9.8),
            g: Some(9.8),
            h: Some(0.2),
            steps: Some(10_000),
            ..Default::default()
        };
        match name {
            "paper-fig1" => Ok(ConfigLayer {
                omega0: Some(Vector3::new(0.6, 0.0, 0.0)),
                gamma0: Some(Vector3::new(0.3, 0.2, -0.932738)),
                ..base
            }),
            // Starts above the equator and crosses it.
            "equator-cross" => Ok(ConfigLayer {
                omega0: Some(Vector3::new(0.9, 0.0, 0.0)),
                gamma0: Some(Vector3::new(0.6, 0.0, 0.8)),
                ..base
            }),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    /// Overlays `top` onto `self`; fields set in `top` win.
    pub fn merge(self, top: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            integrator: top.integrator.or(self.integrator),
            m: top.m.or(self.m),
            r: top.r.or(self.r),
            g: top.g.or(self.g),
            h: top.h.or(self.h),
            steps: top.steps.or(self.steps),
            omega0: top.omega0.or(self.omega0),
            gamma0: top.gamma0.or(self.gamma0),
            tolerance: top.tolerance.or(self.tolerance),
            max_iterations: top.max_iterations.or(self.max_iterations),
            solver: top.solver.or(self.solver),
            compensated: top.compensated.or(self.compensated),
            out: top.out.or(self.out),
            t_final: top.t_final.or(self.t_final),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut layer = ConfigLayer::default();
        for (index, raw) in text.lines().enumerate() {
            let line_no = index + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let err = |message: String| ConfigError::Parse {
                line: line_no,
                message: format!("`{key}`: {message}"),
            };
            match key {
                "integrator" => layer.integrator = Some(value.parse().map_err(err)?),
                "m" => layer.m = Some(parse_f64(value).map_err(err)?),
                "r" => layer.r = Some(parse_f64(value).map_err(err)?),
                "g" => layer.g = Some(parse_f64(value).map_err(err)?),
                "h" => layer.h = Some(parse_f64(value).map_err(err)?),
                "steps" => layer.steps = Some(parse_usize(value).map_err(err)?),
                "omega0" => layer.omega0 = Some(parse_vector(value).map_err(err)?),
                "gamma0" => layer.gamma0 = Some(parse_vector(value).map_err(err)?),
                "tolerance" => layer.tolerance = Some(parse_f64(value).map_err(err)?),
                "max_iterations" => layer.max_iterations = Some(parse_usize(value).map_err(err)?),
                "solver" => layer.solver = Some(parse_mode(value).map_err(err)?),
                "compensated" => layer.compensated = Some(parse_bool(value).map_err(err)?),
                "out" => layer.out = Some(PathBuf::from(value)),
                "t_final" => layer.t_final = Some(parse_f64(value).map_err(err)?),
                other => {
                    return Err(ConfigError::Parse {
                        line: line_no,
                        message: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        Ok(layer)
    }

    /// Applies defaults and validates.
    pub fn build(self) -> Result<ScenarioConfig, ConfigError> {
        let present = [
            self.m.is_some(),
            self.r.is_some(),
            self.h.is_some(),
            self.steps.is_some(),
            self.omega0.is_some(),
            self.gamma0.is_some(),
        ];
        let missing: Vec<&'static str> = REQUIRED_KEYS
            .iter()
            .zip(present)
            .filter(|(_, p)| !p)
            .map(|(k, _)| *k)
            .collect();
        if !missing.is_empty() {
            return Err(ConfigError::Missing(missing));
        }

        let defaults = SolverConfig::default();
        let cfg = ScenarioConfig {
            integrator: self.integrator.unwrap_or(IntegratorKind::Hamel),
            m: self.m.unwrap_or_default(),
            r: self.r.unwrap_or_default(),
            g: self.g.unwrap_or(9.8),
            h: self.h.unwrap_or_default(),
            steps: self.steps.unwrap_or_default(),
            omega0: self.omega0.unwrap_or_default(),
            gamma0: self.gamma0.unwrap_or_default(),
            tolerance: self.tolerance.unwrap_or(defaults.tolerance),
            max_iterations: self.max_iterations.unwrap_or(defaults.max_iterations),
            solver: self.solver.unwrap_or(defaults.mode),
            compensated: self.compensated.unwrap_or(false),
            out: self.out.unwrap_or_else(|| PathBuf::from(".")),
            t_final: self.t_final,
        };
        validate(&cfg)?;
        Ok(cfg)
    }
}

fn invalid(key: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        message: message.into(),
    }
}

fn validate(cfg: &ScenarioConfig) -> Result<(), ConfigError> {
    let positive = |key: &'static str, v: f64| {
        if v.is_finite() && v > 0.0 {
            Ok(())
        } else {
            Err(invalid(key, format!("must be positive, got {v}")))
        }
    };
    positive("m", cfg.m)?;
    positive("r", cfg.r)?;
    positive("h", cfg.h)?;
    positive("tolerance", cfg.tolerance)?;
    if !(cfg.g.is_finite() && cfg.g >= 0.0) {
        return Err(invalid("g", format!("must be non-negative, got {}", cfg.g)));
    }
    if let Some(t) = cfg.t_final {
        positive("t_final", t)?;
    }
    if cfg.max_iterations == 0 {
        return Err(invalid("max_iterations", "must be at least 1"));
    }
    if !cfg.omega0.is_finite() {
        return Err(invalid("omega0", "components must be finite"));
    }
    if cfg.omega0[2] != 0.0 {
        return Err(invalid("omega0", "third component must be 0"));
    }
    if !cfg.gamma0.is_finite() {
        return Err(invalid("gamma0", "components must be finite"));
    }
    let norm = cfg.gamma0.norm();
    if (norm - 1.0).abs() > GAMMA_ADMISSION_TOL {
        return Err(invalid(
            "gamma0",
            format!("norm {norm} is not within {GAMMA_ADMISSION_TOL:e} of 1"),
        ));
    }
    Ok(())
}

fn parse_f64(s: &str) -> Result<f64, String> {
    s.parse::<f64>()
        .map_err(|e| format!("`{s}` is not a number ({e})"))
}

fn parse_usize(s: &str) -> Result<usize, String> {
    s.parse::<usize>()
        .map_err(|e| format!("`{s}` is not a non-negative integer ({e})"))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("`{s}` is not a boolean")),
    }
}

pub fn parse_vector(s: &str) -> Result<Vector3, String> {
    let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!(
            "expected three comma-separated components, got `{s}`"
        ));
    }
    let mut v = [0.0; 3];
    for (slot, part) in v.iter_mut().zip(parts) {
        *slot = parse_f64(part)?;
    }
    Ok(Vector3(v))
}

/// Parses and validates a standalone configuration file.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    ConfigLayer::parse(text)?.build()
}

/// Per-run solver statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationStats {
    pub steps: usize,
    pub min_iterations: usize,
    pub max_iterations: usize,
    pub mean_iterations: f64,
    pub max_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum TerminalState {
    Body { gamma: Vector3, omega: Vector3 },
    Embedded { x: Vector3, p: Vector3 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub scenario: ScenarioConfig,
    pub rows: usize,
    pub terminal_time: f64,
    pub terminal_state: TerminalState,
    pub initial_energy: f64,
    pub initial_momentum: f64,
    pub max_norm_error: f64,
    pub max_energy_error: f64,
    pub max_momentum_error: f64,
    pub mean_energy: f64,
    pub mean_momentum: f64,
    /// Pearson correlation of the norm and energy error columns.
    pub norm_energy_correlation: Option<f64>,
    pub solver: IterationStats,
    /// Wall-clock time; kept out of the JSON so repeated runs are
    /// byte-identical.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

/// Formats a double with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Uniform interface over the four integrators for the streaming runner.
trait Stepper {
    type State: Observables + Copy;

    fn initial(&self) -> Result<Self::State, Error>;
    fn advance(&self, s: &Self::State) -> Result<(Self::State, usize, f64), Error>;
    fn columns(s: &Self::State) -> Vec<f64>;
    fn terminal(s: &Self::State) -> TerminalState;
    fn header() -> &'static str;
    fn t0(&self) -> f64 {
        0.0
    }
}

struct HamelStepper {
    params: PendulumParams,
    cfg: SolverConfig,
    gamma0: Vector3,
    omega0: Vector3,
    h: f64,
}

impl Stepper for HamelStepper {
    type State = HalfStepState;

    fn initial(&self) -> Result<HalfStepState, Error> {
        hamel::init_state(&self.params, self.gamma0, self.omega0, self.h, &self.cfg)
    }

    fn advance(&self, s: &HalfStepState) -> Result<(HalfStepState, usize, f64), Error> {
        let next = hamel::step(&self.params, s, &self.cfg)?;
        Ok((next, next.iterations(), next.residual()))
    }

    fn columns(s: &HalfStepState) -> Vec<f64> {
        let (g, w) = (s.gamma_half(), s.omega_mid());
        vec![g[0], g[1], g[2], w[0], w[1]]
    }

    fn terminal(s: &HalfStepState) -> TerminalState {
        TerminalState::Body {
            gamma: s.gamma_half(),
            omega: s.omega_mid(),
        }
    }

    fn header() -> &'static str {
        BODY_HEADER
    }

    fn t0(&self) -> f64 {
        0.5 * self.h
    }
}

struct Rk4Stepper {
    params: PendulumParams,
    start: BodyState,
    h: f64,
}

impl Stepper for Rk4Stepper {
    type State = BodyState;

    fn initial(&self) -> Result<BodyState, Error> {
        Ok(self.start)
    }

    fn advance(&self, s: &BodyState) -> Result<(BodyState, usize, f64), Error> {
        Ok((rk4_step(&self.params, s, self.h), 0, 0.0))
    }

    fn columns(s: &BodyState) -> Vec<f64> {
        let (g, w) = (s.gamma(), s.omega());
        vec![g[0], g[1], g[2], w[0], w[1]]
    }

    fn terminal(s: &BodyState) -> TerminalState {
        TerminalState::Body {
            gamma: s.gamma(),
            omega: s.omega(),
        }
    }

    fn header() -> &'static str {
        BODY_HEADER
    }
}

struct EmbeddedStepper {
    params: PendulumParams,
    start: EmbeddedState,
    h: f64,
    kind: IntegratorKind,
    solver: SolverConfig,
    rattle: RattleConfig,
}

impl Stepper for EmbeddedStepper {
    type State = EmbeddedState;

    fn initial(&self) -> Result<EmbeddedState, Error> {
        Ok(self.start)
    }

    fn advance(&self, s: &EmbeddedState) -> Result<(EmbeddedState, usize, f64), Error> {
        if self.kind == IntegratorKind::Rattle {
            let r = rattle_step_report(&self.params, s, self.h, &self.rattle)?;
            let phi = crate::model::constraint(r.state.x, self.params.length()).abs();
            Ok((r.state, r.iterations, phi))
        } else {
            let r = sv_step_report(&self.params, s, self.h, &self.solver)?;
            Ok((r.state, r.iterations, r.residual))
        }
    }

    fn columns(s: &EmbeddedState) -> Vec<f64> {
        vec![s.x[0], s.x[1], s.x[2], s.p[0], s.p[1], s.p[2]]
    }

    fn terminal(s: &EmbeddedState) -> TerminalState {
        TerminalState::Embedded { x: s.x, p: s.p }
    }

    fn header() -> &'static str {
        EMBEDDED_HEADER
    }
}

/// Runs the scenario, writing the trajectory CSV and the JSON summary under
/// `cfg.out`. On a solver failure the rows produced so far are flushed and
/// the failing step is reported.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunSummary, HarnessError> {
    let params = cfg.params();
    let start = cfg.initial_body_state();
    match cfg.integrator {
        IntegratorKind::Hamel => stream(
            cfg,
            &HamelStepper {
                params,
                cfg: cfg.solver_config(),
                gamma0: cfg.gamma0,
                omega0: cfg.omega0,
                h: cfg.h,
            },
        ),
        IntegratorKind::Rk4 => stream(
            cfg,
            &Rk4Stepper {
                params,
                start,
                h: cfg.h,
            },
        ),
        kind @ (IntegratorKind::Sv | IntegratorKind::Rattle) => stream(
            cfg,
            &EmbeddedStepper {
                params,
                start: embed(&params, &start),
                h: cfg.h,
                kind,
                solver: cfg.solver_config(),
                rattle: cfg.rattle_config(),
            },
        ),
    }
}

fn stream<S: Stepper>(cfg: &ScenarioConfig, stepper: &S) -> Result<RunSummary, HarnessError> {
    let started = Instant::now();
    let params = cfg.params();
    fs::create_dir_all(&cfg.out)
        .map_err(HarnessError::io(format!("creating {}", cfg.out.display())))?;
    let csv_path = cfg.out.join(TRAJECTORY_FILE);
    let file = File::create(&csv_path)
        .map_err(HarnessError::io(format!("creating {}", csv_path.display())))?;
    let mut writer = BufWriter::new(file);
    let io_err = || HarnessError::io(format!("writing {}", csv_path.display()));

    writeln!(writer, "{}", S::header()).map_err(io_err())?;

    let first = stepper
        .initial()
        .map_err(|source| HarnessError::Solver { step: 0, source })?;
    let e0 = first.energy(&params);
    let j0 = first.momentum(&params);

    let grid = TimeGrid {
        t0: stepper.t0(),
        h: cfg.h,
        compensated: cfg.compensated,
    };
    let mut clock = grid.clock();
    let mut energy_sum = Accumulator::new(cfg.compensated);
    let mut momentum_sum = Accumulator::new(cfg.compensated);
    let mut norm_errors = Vec::with_capacity(cfg.steps + 1);
    let mut energy_errors = Vec::with_capacity(cfg.steps + 1);
    let (mut max_norm, mut max_energy, mut max_momentum) = (0.0_f64, 0.0_f64, 0.0_f64);
    let mut stats = IterationStats {
        steps: 0,
        min_iterations: usize::MAX,
        max_iterations: 0,
        mean_iterations: 0.0,
        max_residual: 0.0,
    };
    let mut total_iterations = 0usize;

    let mut current = first;
    let mut step = 0usize;
    loop {
        let energy = current.energy(&params);
        let momentum = current.momentum(&params);
        let norm_err = current.norm_error(&first, &params);
        let energy_err = (energy - e0).abs();
        let momentum_err = (momentum - j0).abs();
        max_norm = max_norm.max(norm_err);
        max_energy = max_energy.max(energy_err);
        max_momentum = max_momentum.max(momentum_err);
        energy_sum.add(energy);
        momentum_sum.add(momentum);
        norm_errors.push(norm_err);
        energy_errors.push(energy_err);

        let mut row = format!("{step},{}", fmt_f64(clock.now()));
        for v in S::columns(&current).into_iter().chain([
            norm_err,
            energy,
            energy_err,
            momentum,
            momentum_err,
        ]) {
            row.push(',');
            row.push_str(&fmt_f64(v));
        }
        writeln!(writer, "{row}").map_err(io_err())?;

        if step == cfg.steps {
            break;
        }
        match stepper.advance(&current) {
            Ok((next, iterations, residual)) => {
                stats.steps += 1;
                stats.min_iterations = stats.min_iterations.min(iterations);
                stats.max_iterations = stats.max_iterations.max(iterations);
                stats.max_residual = stats.max_residual.max(residual);
                total_iterations += iterations;
                current = next;
                step += 1;
                clock.tick();
            }
            Err(source) => {
                writer.flush().map_err(io_err())?;
                return Err(HarnessError::Solver {
                    step: step + 1,
                    source,
                });
            }
        }
    }
    writer.flush().map_err(io_err())?;

    if stats.steps == 0 {
        stats.min_iterations = 0;
    } else {
        stats.mean_iterations = total_iterations as f64 / stats.steps as f64;
    }
    let rows = step + 1;
    let summary = RunSummary {
        scenario: cfg.clone(),
        rows,
        terminal_time: clock.now(),
        terminal_state: S::terminal(&current),
        initial_energy: e0,
        initial_momentum: j0,
        max_norm_error: max_norm,
        max_energy_error: max_energy,
        max_momentum_error: max_momentum,
        mean_energy: energy_sum.value() / rows as f64,
        mean_momentum: momentum_sum.value() / rows as f64,
        norm_energy_correlation: crate::diagnostics::correlation(&norm_errors, &energy_errors),
        solver: stats,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&cfg.out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Io {
        context: format!("serializing {}", path.display()),
        source: io::Error::other(e),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(HarnessError::io(format!("writing {}", path.display())))
}

/// Number of steps of size `h` covering `t`, if `h` divides `t`.
fn steps_for(t: f64, h: f64) -> Option<usize> {
    let n = (t / h).round();
    (n >= 1.0 && (n * h - t).abs() <= 1e-9 * t).then_some(n as usize)
}

/// Shared inputs of a convergence study.
#[derive(Debug, Clone, Copy)]
pub struct StudySetup {
    pub params: PendulumParams,
    pub start: BodyState,
    pub solver: SolverConfig,
    pub rattle: RattleConfig,
}

/// Terminal-state error of `kind` at step size `h` over `[0, t]` against the
/// RK4 reference. Body-frame integrators are compared on `(Ω¹, Ω², Γ)`,
/// embedded ones on `(x, p)`.
pub fn terminal_error(
    kind: IntegratorKind,
    setup: &StudySetup,
    h: f64,
    t: f64,
    reference: &Reference,
) -> Result<f64, Error> {
    let StudySetup {
        params,
        start,
        solver,
        rattle,
    } = setup;
    let n = steps_for(t, h)
        .ok_or_else(|| Error::invalid("h", format!("{h} does not divide the final time {t}")))?;
    match (kind, reference) {
        (IntegratorKind::Hamel, Reference::Body(exact)) => {
            let init = hamel::init_state(params, start.gamma(), start.omega(), h, solver)?;
            let traj = hamel::run(params, &init, n, solver)?;
            let node = node_average(&traj[n - 1], &traj[n]);
            Ok(body_distance(&node, &exact.components()))
        }
        (IntegratorKind::Rk4, Reference::Body(exact)) => {
            let mut s = *start;
            for _ in 0..n {
                s = rk4_step(params, &s, h);
            }
            Ok(body_distance(&s.components(), &exact.components()))
        }
        (IntegratorKind::Sv | IntegratorKind::Rattle, Reference::Embedded(exact)) => {
            let mut s = embed(params, start);
            for i in 0..n {
                s = match kind {
                    IntegratorKind::Sv => sv_step(params, &s, h, solver),
                    _ => rattle_step(params, &s, h, rattle),
                }
                .map_err(|e| e.at_step(i + 1))?;
            }
            let dx = s.x - exact.x;
            let dp = s.p - exact.p;
            Ok((dx.norm_squared() + dp.norm_squared()).sqrt())
        }
        _ => Err(Error::invalid(
            "reference",
            "does not match the integrator's state space",
        )),
    }
}

/// Exact-flow stand-in at the final time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reference {
    Body(BodyState),
    Embedded(EmbeddedState),
}

/// RK4 with step [`REFERENCE_STEP`] (rounded to divide `t`) in the state
/// space of `kind`.
pub fn reference_solution(
    kind: IntegratorKind,
    params: &PendulumParams,
    start: &BodyState,
    t: f64,
) -> Reference {
    let n = (t / REFERENCE_STEP).round().max(1.0) as usize;
    let dt = t / n as f64;
    if kind.is_embedded() {
        let mut s = embed(params, start);
        for _ in 0..n {
            s = rk4_embedded_step(params, &s, dt);
        }
        Reference::Embedded(s)
    } else {
        let mut s = *start;
        for _ in 0..n {
            s = rk4_step(params, &s, dt);
        }
        Reference::Body(s)
    }
}

/// Observed orders of `cfg.integrator` over `step_sizes`; per-h runs execute
/// on separate threads.
pub fn convergence_study(
    cfg: &ScenarioConfig,
    step_sizes: &[f64],
) -> Result<ConvergenceReport, HarnessError> {
    if step_sizes.len() < 2 {
        return Err(ConfigError::Usage("convergence needs at least two step sizes".into()).into());
    }
    let t = cfg.t_final.unwrap_or(DEFAULT_CONVERGENCE_TIME);
    for &h in step_sizes {
        if !(h.is_finite() && h > 0.0) {
            return Err(invalid("convergence", format!("step size {h} must be positive")).into());
        }
        if steps_for(t, h).is_none() {
            return Err(invalid(
                "convergence",
                format!("step size {h} does not divide t_final = {t}"),
            )
            .into());
        }
    }
    let setup = StudySetup {
        params: cfg.params(),
        start: cfg.initial_body_state(),
        solver: cfg.solver_config(),
        rattle: cfg.rattle_config(),
    };
    let reference = reference_solution(cfg.integrator, &setup.params, &setup.start, t);

    let results: Vec<Result<f64, Error>> = std::thread::scope(|scope| {
        let handles: Vec<_> = step_sizes
            .iter()
            .map(|&h| {
                let (setup, reference) = (&setup, &reference);
                scope.spawn(move || terminal_error(cfg.integrator, setup, h, t, reference))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("convergence worker panicked"))
            .collect()
    });

    let mut errors = Vec::with_capacity(results.len());
    for result in results {
        let e = result.map_err(|source| match source {
            Error::StepFailed { step, source } => HarnessError::Solver {
                step,
                source: *source,
            },
            other => HarnessError::Solver {
                step: 0,
                source: other,
            },
        })?;
        errors.push(e);
    }
    ConvergenceReport::new(cfg.integrator.name(), t, step_sizes.to_vec(), errors)
        .map_err(|e| invalid("convergence", e.to_string()).into())
}

/// Runs [`convergence_study`] and writes the report under `cfg.out`.
pub fn convergence_command(
    cfg: &ScenarioConfig,
    step_sizes: &[f64],
) -> Result<ConvergenceReport, HarnessError> {
    let report = convergence_study(cfg, step_sizes)?;
    fs::create_dir_all(&cfg.out)
        .map_err(HarnessError::io(format!("creating {}", cfg.out.display())))?;
    write_json(&cfg.out.join(CONVERGENCE_FILE), &report)?;
    Ok(report)
}

/// Parses `0.05,0.025,...`.
pub fn parse_step_list(s: &str) -> Result<Vec<f64>, ConfigError> {
    let values = s
        .split(',')
        .map(|p| parse_f64(p.trim()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|m| invalid("convergence", m))?;
    if values.len() < 2 {
        return Err(ConfigError::Usage(
            "--convergence needs at least two step sizes, e.g. 0.05,0.025".into(),
        ));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fig1_cfg() -> ScenarioConfig {
        ConfigLayer::preset("paper-fig1").unwrap().build().unwrap()
    }

    #[test]
    fn fig1_preset_values() {
        let c = fig1_cfg();
        assert_eq!((c.m, c.r, c.g, c.h, c.steps), (1.0, 9.8, 9.8, 0.2, 10_000));
        assert_eq!(c.omega0, Vector3::new(0.6, 0.0, 0.0));
        assert_eq!(c.gamma0, Vector3::new(0.3, 0.2, -0.932738));
        assert_eq!(c.integrator, IntegratorKind::Hamel);
        assert!(ConfigLayer::preset("nope").is_err());
    }

    #[test]
    fn empty_input_lists_required_keys() {
        let err = parse_config("").unwrap_err();
        assert_eq!(err, ConfigError::Missing(REQUIRED_KEYS.to_vec()));
        assert!(err.to_string().contains("gamma0"));
    }

    #[test]
    fn non_unit_gamma_is_rejected() {
        let text = "m=1\nr=1\nh=0.1\nsteps=1\nomega0=0,0,0\ngamma0=1,1,1\n";
        assert!(matches!(
            parse_config(text),
            Err(ConfigError::Invalid { key: "gamma0", .. })
        ));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ConfigLayer::parse("m = 1\n\n# c\nr 9.8\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 4, .. }));
        let err = ConfigLayer::parse("m = 1\nmass = 2\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }));
        let err = ConfigLayer::parse("h = abc").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));
    }

    #[test]
    fn validation_names_offending_key() {
        let base = "m=1\nr=9.8\nh=0.2\nsteps=1\nomega0=0.6,0,0\ngamma0=0,0,-1\n";
        let cases = [
            ("m=-1\n", "m"),
            ("h=0\n", "h"),
            ("g=-9.8\n", "g"),
            ("omega0=0,0,1\n", "omega0"),
            ("tolerance=0\n", "tolerance"),
            ("max_iterations=0\n", "max_iterations"),
        ];
        for (extra, key) in cases {
            let text = format!("{base}{extra}");
            match parse_config(&text) {
                Err(ConfigError::Invalid { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{extra}: {other:?}"),
            }
        }
    }

    #[test]
    fn crlf_and_comments_are_tolerated() {
        let text = "m = 1 # kg\r\nr = 9.8\r\nh = 0.2\r\nsteps = 3\r\nomega0 = (0.6, 0, 0)\r\ngamma0 = 0, 0, -1\r\n";
        let c = parse_config(text).unwrap();
        assert_eq!(c.steps, 3);
        assert_eq!(c.g, 9.8);
        assert_eq!(c.omega0, Vector3::new(0.6, 0.0, 0.0));
    }

    #[test]
    fn layers_override_in_order() {
        let preset = ConfigLayer::preset("paper-fig1").unwrap();
        let file = ConfigLayer::parse("h = 0.1\nsteps = 5\n").unwrap();
        let flags = ConfigLayer {
            steps: Some(7),
            ..Default::default()
        };
        let c = preset.merge(file).merge(flags).build().unwrap();
        assert_eq!(c.h, 0.1);
        assert_eq!(c.steps, 7);
        assert_eq!(c.r, 9.8);
    }

    #[test]
    fn step_list_parsing() {
        assert_eq!(parse_step_list("0.05, 0.025").unwrap(), vec![0.05, 0.025]);
        assert!(matches!(
            parse_step_list("0.05"),
            Err(ConfigError::Usage(_))
        ));
        assert!(parse_step_list("0.05,x").is_err());
    }

    #[test]
    fn seventeen_digit_format_round_trips() {
        for v in [0.1, -72.29295752, 1e-300, 6.02214076e23, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
    }

    fn config_strategy() -> impl Strategy<Value = ScenarioConfig> {
        (
            prop_oneof![
                Just(IntegratorKind::Hamel),
                Just(IntegratorKind::Sv),
                Just(IntegratorKind::Rattle),
                Just(IntegratorKind::Rk4)
            ],
            1e-3..1e3f64,
            1e-3..1e3f64,
            0.0..20.0f64,
            1e-4..1.0f64,
            0usize..100_000,
            (-5.0..5.0f64, -5.0..5.0f64),
            (0.0..std::f64::consts::PI, -3.0..3.0f64),
            (1e-16..1e-2f64, 1usize..200, any::<bool>(), any::<bool>()),
            proptest::option::of(1e-3..1e3f64),
        )
            .prop_map(
                |(
                    integrator,
                    m,
                    r,
                    g,
                    h,
                    steps,
                    (w1, w2),
                    (th, ph),
                    (tol, iters, newton, comp),
                    t_final,
                )| {
                    ScenarioConfig {
                        integrator,
                        m,
                        r,
                        g,
                        h,
                        steps,
                        omega0: Vector3::new(w1, w2, 0.0),
                        gamma0: Vector3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()),
                        tolerance: tol,
                        max_iterations: iters,
                        solver: if newton {
                            SolverMode::Newton
                        } else {
                            SolverMode::FixedPoint
                        },
                        compensated: comp,
                        out: PathBuf::from("runs/out"),
                        t_final,
                    }
                },
            )
    }

    proptest! {
        #[test]
        fn config_text_round_trips(cfg in config_strategy()) {
            let parsed = parse_config(&cfg.to_config_text()).unwrap();
            prop_assert_eq!(parsed, cfg);
        }
    }
}
