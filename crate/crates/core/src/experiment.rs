//! Experiment configuration, seeded runs, sweeps and their artifacts.
//!
//! A run executes one experiment per seed and writes
//!
//! * `epochs.csv`: one row per epoch and run
//! * `runs/<run_id>.json`: per-run summary with a config echo
//! * `aggregate.json`: medians and success rates per grid cell
//!
//! A sweep additionally writes `scaling_report.json` and, on request,
//! `charts/queries.svg` and `charts/mistakes.svg`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::baselines::{self, DEFAULT_HOLDOUT};
use crate::chart::{self, Series};
use crate::environment::{AgentModel, EnvConfig, Environment, NoiseKind, NoiseModel};
use crate::error::{Error, Result};
use crate::evaluation::{self, ErrorReport, ScalingFormula};
use crate::exec::Exec;
use crate::geometry::{self, dot};
use crate::learner::{self, BandLogForm, InitOutcome, LearnerOptions, ScheduleConstants};
use crate::rng::{streams, SimRng};
use crate::stats;
use crate::trace::{LearnerKind, RunTrace, Totals, CSV_HEADER};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "STRATPERC_OUT";
pub const DEFAULT_OUT_DIR: &str = "stratperc-out";

pub const QUERY_FIT_THRESHOLD: f64 = 0.85;
pub const DRAW_FIT_THRESHOLD: f64 = 0.8;
pub const MISTAKE_FIT_THRESHOLD: f64 = 0.7;
/// Largest log-log slope of queries against `ln(1/ε)` still counted as linear growth.
pub const MAX_LOG_GROWTH_EXPONENT: f64 = 1.5;
/// Smallest median share of draws the passive learner must label.
pub const PASSIVE_LABEL_FRACTION: f64 = 0.4;
/// Smallest log-log slope of passive queries against `1/ε`.
pub const PASSIVE_MIN_EXPONENT: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Start from `v0`, or from a direction orthogonal to the truth.
    #[default]
    GivenV0,
    /// Run the two-sided initialization first.
    MasterInit,
}

/// Axes of a sweep. Empty lists fall back to the scalar setting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub d: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub nu: Vec<f64>,
    pub learner: Vec<LearnerKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub d: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub nu: f64,
    pub noise_kind: NoiseKind,
    pub cost: f64,
    pub c_m: f64,
    pub c_b: f64,
    pub log_form: BandLogForm,
    pub seeds: Vec<u64>,
    pub learner: LearnerKind,
    pub init: InitMode,
    pub v0: Option<Vec<f64>>,
    /// Truth direction; drawn per seed when absent.
    pub u: Option<Vec<f64>>,
    pub draw_cap_factor: f64,
    pub draw_cap: Option<u64>,
    pub init_draw_cap: Option<u64>,
    /// Monte Carlo draws for the error report; 0 disables it.
    pub mc_samples: u64,
    /// Warn when ν exceeds the noise level the guarantees are stated for.
    pub theorem_regime: bool,
    pub nu_const: f64,
    pub passive_max_rounds: u64,
    pub holdout_size: usize,
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: 0,
            d: 5,
            epsilon: 0.05,
            delta: 0.1,
            nu: 0.0,
            noise_kind: NoiseKind::Realizable,
            cost: 2.0,
            c_m: ScheduleConstants::DEFAULT_C_M,
            c_b: ScheduleConstants::DEFAULT_C_B,
            log_form: BandLogForm::Theorem,
            seeds: vec![0, 1, 2],
            learner: LearnerKind::ActiveStrategic,
            init: InitMode::GivenV0,
            v0: None,
            u: None,
            draw_cap_factor: 100.0,
            draw_cap: None,
            init_draw_cap: None,
            mc_samples: 100_000,
            theorem_regime: true,
            nu_const: 0.125,
            passive_max_rounds: 2_000_000,
            holdout_size: DEFAULT_HOLDOUT,
            out_dir: None,
            grid: None,
        }
    }
}

fn pick<T: Clone>(axis: &[T], default: T) -> Vec<T> {
    if axis.is_empty() {
        vec![default]
    } else {
        axis.to_vec()
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("{field}: {msg}"))
}

fn check_vector(field: &str, v: &Option<Vec<f64>>, d: usize) -> Result<()> {
    if let Some(v) = v {
        if v.len() != d {
            return Err(invalid(
                field,
                format!("expected {d} components, got {}", v.len()),
            ));
        }
        if v.iter().any(|x| !x.is_finite()) || geometry::norm(v) <= geometry::ZERO_NORM {
            return Err(invalid(field, "must be a finite nonzero vector"));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// A valid configuration with every default filled in.
    pub fn new() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn constants(&self) -> ScheduleConstants {
        ScheduleConstants {
            c_m: self.c_m,
            c_b: self.c_b,
            log_form: self.log_form,
        }
    }

    pub fn options(&self) -> LearnerOptions {
        LearnerOptions {
            draw_cap_factor: self.draw_cap_factor,
            draw_cap: self.draw_cap,
            init_draw_cap: self.init_draw_cap,
            record_rounds: false,
        }
    }

    /// Noise level `ν_max = nu_const·ε / (ln d + ln ln(1/ε) + ln(1/δ))`.
    pub fn nu_max(&self) -> f64 {
        let denom = (self.d as f64).ln() + (1.0 / self.epsilon).ln().ln() + (1.0 / self.delta).ln();
        self.nu_const * self.epsilon / denom
    }

    pub fn in_theorem_regime(&self) -> bool {
        self.nu <= self.nu_max()
    }

    /// Check this configuration and every cell of its grid.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(invalid("seeds", "seeds must be distinct"));
        }
        if let Some(g) = &self.grid {
            if g.d.is_empty() && g.epsilon.is_empty() && g.nu.is_empty() && g.learner.is_empty() {
                return Err(invalid("grid", "at least one axis must be given"));
            }
        }
        for cell in self.cells() {
            cell.validate_cell()?;
        }
        Ok(())
    }

    fn validate_cell(&self) -> Result<()> {
        if self.d < 2 {
            return Err(invalid("d", format!("must be at least 2, got {}", self.d)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 0.5) {
            return Err(invalid(
                "epsilon",
                format!("must lie in (0, 1/2], got {}", self.epsilon),
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(invalid(
                "delta",
                format!("must lie in (0, 1), got {}", self.delta),
            ));
        }
        if !(self.nu >= 0.0 && self.nu < 0.5) {
            return Err(invalid(
                "nu",
                format!("must lie in [0, 1/2), got {}", self.nu),
            ));
        }
        if self.noise_kind == NoiseKind::Realizable && self.nu != 0.0 {
            return Err(invalid("nu", "must be 0 when noise_kind is realizable"));
        }
        if !(self.cost > 0.0 && self.cost.is_finite()) {
            return Err(invalid(
                "cost",
                format!("must be positive, got {}", self.cost),
            ));
        }
        if !(self.c_m > 0.0 && self.c_m.is_finite()) {
            return Err(invalid(
                "c_m",
                format!("must be positive, got {}", self.c_m),
            ));
        }
        if !(self.c_b > 0.0 && self.c_b.is_finite()) {
            return Err(invalid(
                "c_b",
                format!("must be positive, got {}", self.c_b),
            ));
        }
        if !(self.draw_cap_factor > 0.0) {
            return Err(invalid("draw_cap_factor", "must be positive"));
        }
        if self.mc_samples != 0 && self.mc_samples < 1000 {
            return Err(invalid("mc_samples", "must be 0 or at least 1000"));
        }
        if !(self.nu_const > 0.0) {
            return Err(invalid("nu_const", "must be positive"));
        }
        if self.learner == LearnerKind::PassiveStrategic && self.holdout_size == 0 {
            return Err(invalid("holdout_size", "must be positive"));
        }
        check_vector("v0", &self.v0, self.d)?;
        check_vector("u", &self.u, self.d)?;
        if self.learner != LearnerKind::PassiveStrategic {
            learner::make_schedule(self.d, self.epsilon, self.delta, self.constants())
                .map_err(|e| invalid("c_b", e))?;
        }
        if self.init == InitMode::MasterInit {
            learner::make_schedule(self.d, 1.0 / 16.0, self.delta / 3.0, self.constants())
                .map_err(|e| invalid("c_b", e))?;
        }
        Ok(())
    }

    /// Grid cells in a fixed order: learner, then d, then ε, then ν.
    pub fn cells(&self) -> Vec<ExperimentConfig> {
        let g = self.grid.clone().unwrap_or_default();
        let learners = pick(&g.learner, self.learner);
        let ds = pick(&g.d, self.d);
        let eps = pick(&g.epsilon, self.epsilon);
        let nus = pick(&g.nu, self.nu);
        let mut cells = Vec::new();
        for &learner in &learners {
            for &d in &ds {
                for &epsilon in &eps {
                    for &nu in &nus {
                        cells.push(ExperimentConfig {
                            learner,
                            d,
                            epsilon,
                            nu,
                            grid: None,
                            ..self.clone()
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InitSummary {
    pub shortcut: bool,
    pub vote_queries: u64,
    pub vote_draws: u64,
    pub plus_disagreements: u64,
    pub minus_disagreements: u64,
    pub angle_plus: f64,
    pub angle_minus: f64,
    pub angle: f64,
    pub labels: u64,
    pub draws: u64,
}

impl InitSummary {
    fn new(out: &InitOutcome, env: &Environment) -> Self {
        Self {
            shortcut: out.shortcut,
            vote_queries: out.vote_queries,
            vote_draws: out.vote_draws,
            plus_disagreements: out.plus_disagreements,
            minus_disagreements: out.minus_disagreements,
            angle_plus: env.angle_to_truth(&out.v_plus),
            angle_minus: env.angle_to_truth(&out.v_minus),
            angle: env.angle_to_truth(&out.v),
            labels: out.plus_trace.totals.labels + out.minus_trace.totals.labels + out.vote_queries,
            draws: out.plus_trace.totals.draws + out.minus_trace.totals.draws + out.vote_draws,
        }
    }
}

/// Per-run JSON summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub cell: usize,
    pub seed: u64,
    pub learner: LearnerKind,
    /// The cell's configuration restricted to this seed.
    pub config: ExperimentConfig,
    pub u: Vec<f64>,
    pub v0: Vec<f64>,
    pub v: Vec<f64>,
    pub theta_start: f64,
    pub final_angle: f64,
    pub excess_error: f64,
    pub success: bool,
    /// Whether every epoch ended within `π/2^{k+1}` of the truth.
    pub contraction: Option<bool>,
    pub nu_max: f64,
    pub in_theorem_regime: bool,
    pub epochs: usize,
    pub totals: Totals,
    pub error_report: Option<ErrorReport>,
    pub init: Option<InitSummary>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub summary: RunSummary,
    pub trace: RunTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub run_id: String,
    pub cell: usize,
    pub seed: u64,
    pub error: String,
    pub draw_budget_exceeded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellAggregate {
    pub cell: usize,
    pub learner: LearnerKind,
    pub d: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub nu: f64,
    pub noise_kind: NoiseKind,
    pub runs: usize,
    pub failures: usize,
    pub success_rate: f64,
    pub contraction_rate: Option<f64>,
    pub init_shortcut_rate: Option<f64>,
    pub median_final_angle: f64,
    pub median_excess_error: f64,
    pub median_labels: f64,
    pub median_draws: f64,
    pub median_mistakes: f64,
    pub median_additional_mistakes: f64,
    pub impure_queries: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub schema_version: u32,
    pub runs: usize,
    pub cells: Vec<CellAggregate>,
    pub failures: Vec<Failure>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitCell {
    pub d: usize,
    pub epsilon: f64,
    pub predictor: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitOutcome {
    pub formula: ScalingFormula,
    pub threshold: f64,
    /// `"ok"` or `"insufficient-data"`.
    pub status: String,
    pub constant: Option<f64>,
    pub r_squared: Option<f64>,
    pub grid_points: usize,
    pub passed: Option<bool>,
    pub message: Option<String>,
    /// Diagnostic `median ≈ a + b·predictor` fit on the same cells.
    pub affine: Option<AffineFit>,
    pub cells: Vec<FitCell>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AffineFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

/// Growth of median queries with `ln(1/ε)` at one dimension.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogGrowth {
    pub d: usize,
    pub points: usize,
    /// Slope of `ln(queries)` against `ln ln(1/ε)`.
    pub exponent: f64,
    pub passed: bool,
}

/// Passive label usage at one dimension.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PassiveContrast {
    pub d: usize,
    pub points: usize,
    /// Median over cells of `queries / draws`.
    pub label_fraction: f64,
    /// Slope of `ln(queries)` against `ln(1/ε)`.
    pub query_exponent: f64,
    /// Slope of `ln(draws)` against `ln(1/ε)`.
    pub draw_exponent: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LearnerScaling {
    pub learner: LearnerKind,
    pub nu: f64,
    pub fits: Vec<FitOutcome>,
    pub log_growth: Vec<LogGrowth>,
    pub passive_contrast: Vec<PassiveContrast>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingReport {
    pub schema_version: u32,
    pub learners: Vec<LearnerScaling>,
}

impl ScalingReport {
    /// Fit for `formula` of the first group run with `learner`.
    pub fn fit(&self, learner: LearnerKind, formula: ScalingFormula) -> Option<&FitOutcome> {
        self.learners
            .iter()
            .filter(|l| l.learner == learner)
            .flat_map(|l| l.fits.iter())
            .find(|f| f.formula == formula)
    }

    pub fn group(&self, learner: LearnerKind) -> Option<&LearnerScaling> {
        self.learners.iter().find(|l| l.learner == learner)
    }
}

/// Everything produced by [`execute`].
#[derive(Clone, Debug)]
pub struct Report {
    pub results: Vec<RunResult>,
    pub failures: Vec<Failure>,
    pub aggregate: Aggregate,
    pub scaling: Option<ScalingReport>,
}

impl Report {
    /// 0 on success, 3 if any run hit its draw budget, 1 for other run errors.
    pub fn exit_code(&self) -> i32 {
        if self.failures.iter().any(|f| f.draw_budget_exceeded) {
            3
        } else if self.failures.is_empty() {
            0
        } else {
            1
        }
    }

    pub fn traces(&self) -> Vec<RunTrace> {
        self.results.iter().map(|r| r.trace.clone()).collect()
    }
}

/// Process exit code for an error that stopped a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::DrawBudgetExceeded { .. } => 3,
        Error::Io(_) | Error::InsufficientData(_) => 1,
        _ => 2,
    }
}

/// Start direction at angle `π/2` from `u`, drawn from the seed's start stream.
pub fn default_start(u: &[f64], seed: u64) -> Result<Vec<f64>> {
    let mut rng = SimRng::stream(seed, streams::START);
    let u = geometry::normalize(u)?;
    loop {
        let g = geometry::sample_unit_sphere(u.len(), &mut rng);
        let s = dot(&g, &u);
        let p: Vec<f64> = g.iter().zip(&u).map(|(a, b)| a - s * b).collect();
        if geometry::norm(&p) > 1e-6 {
            return geometry::normalize(&p);
        }
    }
}

/// Truth direction of a run: the configured `u` or a draw from the seed's truth stream.
pub fn truth_for(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<f64>> {
    match &cfg.u {
        Some(u) => geometry::normalize(u),
        None => Ok(geometry::sample_unit_sphere(
            cfg.d,
            &mut SimRng::stream(seed, streams::TRUTH),
        )),
    }
}

/// Environment a run of `cfg` with `seed` plays against.
pub fn env_config(cfg: &ExperimentConfig, seed: u64) -> Result<EnvConfig> {
    let u = truth_for(cfg, seed)?;
    let noise = match cfg.noise_kind {
        NoiseKind::Realizable => NoiseModel::realizable(),
        kind => NoiseModel::new(kind, cfg.nu, cfg.d)?,
    };
    let agents = match cfg.learner {
        LearnerKind::NonstrategicActive => AgentModel::Truthful,
        _ => AgentModel::Strategic,
    };
    EnvConfig::new(u, cfg.cost, noise, agents, seed)
}

fn contraction_held(trace: &RunTrace) -> bool {
    trace
        .epochs
        .iter()
        .all(|e| e.theta_after <= PI / 2f64.powi(e.k as i32 + 1))
}

/// One seeded run of a single cell.
pub fn run_single(
    cfg: &ExperimentConfig,
    cell: usize,
    seed: u64,
    run_id: &str,
    exec: Exec,
) -> Result<RunResult> {
    let env_cfg = env_config(cfg, seed)?;
    let u = env_cfg.u.normal().to_vec();
    let mut env = Environment::new(env_cfg.clone());
    let opts = cfg.options();
    let constants = cfg.constants();
    let (v0, init) = match cfg.init {
        InitMode::GivenV0 => {
            let v0 = match &cfg.v0 {
                Some(v) => geometry::normalize(v)?,
                None => default_start(&u, seed)?,
            };
            (v0, None)
        }
        InitMode::MasterInit => {
            let out = learner::initialize(&mut env, cfg.delta, constants, cfg.cost, &opts)?;
            let summary = InitSummary::new(&out, &env);
            (out.v, Some(summary))
        }
    };
    let theta_start = env.angle_to_truth(&v0);
    let (v, trace) = match cfg.learner {
        LearnerKind::ActiveStrategic => {
            let schedule = learner::make_schedule(cfg.d, cfg.epsilon, cfg.delta, constants)?;
            learner::active_strategic_perceptron(
                &mut env,
                &v0,
                cfg.epsilon,
                cfg.delta,
                &schedule,
                cfg.cost,
                &opts,
            )?
        }
        LearnerKind::PassiveStrategic => baselines::passive_strategic_perceptron(
            &mut env,
            &v0,
            cfg.epsilon,
            cfg.cost,
            cfg.passive_max_rounds,
            cfg.holdout_size,
        )?,
        LearnerKind::NonstrategicActive => {
            let schedule = learner::make_schedule(cfg.d, cfg.epsilon, cfg.delta, constants)?;
            baselines::nonstrategic_active_perceptron(
                &mut env,
                &v0,
                cfg.epsilon,
                cfg.delta,
                &schedule,
                &opts,
            )?
        }
    };
    let final_angle = env.angle_to_truth(&v);
    let excess_error = final_angle / PI;
    let error_report = if cfg.mc_samples > 0 {
        let mut rng = SimRng::stream(seed, streams::EVALUATION);
        Some(evaluation::mc_error(
            &v,
            &env_cfg,
            cfg.mc_samples,
            &mut rng,
            exec,
        )?)
    } else {
        None
    };
    let contraction = match cfg.learner {
        LearnerKind::PassiveStrategic => None,
        _ => Some(contraction_held(&trace)),
    };
    let echo = ExperimentConfig {
        seeds: vec![seed],
        out_dir: None,
        grid: None,
        ..cfg.clone()
    };
    info!(
        "{run_id}: learner={} d={} eps={} labels={} draws={} final angle={final_angle:.3e}",
        cfg.learner, cfg.d, cfg.epsilon, trace.totals.labels, trace.totals.draws
    );
    Ok(RunResult {
        summary: RunSummary {
            run_id: run_id.to_string(),
            cell,
            seed,
            learner: cfg.learner,
            config: echo,
            u,
            v0,
            v,
            theta_start,
            final_angle,
            excess_error,
            success: excess_error <= cfg.epsilon,
            contraction,
            nu_max: cfg.nu_max(),
            in_theorem_regime: cfg.in_theorem_regime(),
            epochs: trace.epochs.len(),
            totals: trace.totals,
            error_report,
            init,
        },
        trace,
    })
}

fn run_id(sweep: bool, cell: usize, seed: u64) -> String {
    if sweep {
        format!("c{cell:03}-s{seed}")
    } else {
        format!("s{seed}")
    }
}

/// Run every cell and seed of `config`. Single runs use only the scalar
/// settings; sweeps expand the grid and fit the scaling forms.
///
/// Run-level errors are collected in [`Report::failures`]; only an invalid
/// configuration fails the whole call.
pub fn execute(config: &ExperimentConfig, sweep: bool, exec: Exec) -> Result<Report> {
    config.validate()?;
    let cells = if sweep {
        config.cells()
    } else {
        vec![ExperimentConfig {
            grid: None,
            ..config.clone()
        }]
    };
    for cell in &cells {
        if cell.theorem_regime
            && cell.learner == LearnerKind::ActiveStrategic
            && !cell.in_theorem_regime()
        {
            warn!(
                "nu = {} exceeds the theorem regime bound {:.3e} (d = {}, epsilon = {})",
                cell.nu,
                cell.nu_max(),
                cell.d,
                cell.epsilon
            );
        }
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| config.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let outcomes = exec.map(&jobs, |&(c, seed)| {
        let id = run_id(sweep, c, seed);
        let out = run_single(&cells[c], c, seed, &id, exec);
        (id, out)
    });
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (&(cell, seed), (id, out)) in jobs.iter().zip(outcomes) {
        match out {
            Ok(r) => results.push(r),
            Err(e) => {
                warn!("{id}: {e}");
                failures.push(Failure {
                    run_id: id,
                    cell,
                    seed,
                    draw_budget_exceeded: matches!(e, Error::DrawBudgetExceeded { .. }),
                    error: e.to_string(),
                })
            }
        }
    }
    let aggregate = aggregate(&cells, &results, &failures);
    let scaling = sweep.then(|| scaling_report(&results));
    Ok(Report {
        results,
        failures,
        aggregate,
        scaling,
    })
}

fn median_of(rs: &[&RunResult], f: impl Fn(&RunResult) -> f64) -> f64 {
    if rs.is_empty() {
        return f64::NAN;
    }
    stats::median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>())
}

fn rate(rs: &[&RunResult], f: impl Fn(&RunResult) -> Option<bool>) -> Option<f64> {
    let flags: Vec<bool> = rs.iter().filter_map(|r| f(r)).collect();
    if flags.is_empty() {
        return None;
    }
    Some(flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
}

fn aggregate(cells: &[ExperimentConfig], results: &[RunResult], failures: &[Failure]) -> Aggregate {
    let cells = cells
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let rs: Vec<&RunResult> = results.iter().filter(|r| r.summary.cell == i).collect();
            let failed = failures.iter().filter(|f| f.cell == i).count();
            let runs = rs.len() + failed;
            let successes = rs.iter().filter(|r| r.summary.success).count();
            CellAggregate {
                cell: i,
                learner: cfg.learner,
                d: cfg.d,
                epsilon: cfg.epsilon,
                delta: cfg.delta,
                nu: cfg.nu,
                noise_kind: cfg.noise_kind,
                runs,
                failures: failed,
                success_rate: successes as f64 / runs.max(1) as f64,
                contraction_rate: rate(&rs, |r| r.summary.contraction),
                init_shortcut_rate: rate(&rs, |r| r.summary.init.as_ref().map(|i| i.shortcut)),
                median_final_angle: median_of(&rs, |r| r.summary.final_angle),
                median_excess_error: median_of(&rs, |r| r.summary.excess_error),
                median_labels: median_of(&rs, |r| r.summary.totals.labels as f64),
                median_draws: median_of(&rs, |r| r.summary.totals.draws as f64),
                median_mistakes: median_of(&rs, |r| r.summary.totals.mistakes as f64),
                median_additional_mistakes: median_of(&rs, |r| {
                    r.summary.totals.additional_mistakes as f64
                }),
                impure_queries: rs.iter().map(|r| r.summary.totals.impure_queries).sum(),
            }
        })
        .collect();
    Aggregate {
        schema_version: SCHEMA_VERSION,
        runs: results.len() + failures.len(),
        cells,
        failures: failures.to_vec(),
    }
}

fn fit_outcome(traces: &[RunTrace], formula: ScalingFormula, threshold: f64) -> FitOutcome {
    match evaluation::fit_scaling(traces, formula) {
        Ok(fit) => FitOutcome {
            affine: {
                let x: Vec<f64> = fit.cells.iter().map(|c| c.2).collect();
                let y: Vec<f64> = fit.cells.iter().map(|c| c.3).collect();
                let l = stats::linear_fit(&x, &y);
                Some(AffineFit {
                    intercept: l.intercept,
                    slope: l.slope,
                    r_squared: l.r_squared,
                })
            },
            formula,
            threshold,
            status: "ok".into(),
            constant: Some(fit.constant),
            r_squared: Some(fit.r_squared),
            grid_points: fit.grid_points,
            passed: Some(fit.r_squared >= threshold),
            message: None,
            cells: fit
                .cells
                .iter()
                .map(|&(d, epsilon, predictor, median)| FitCell {
                    d,
                    epsilon,
                    predictor,
                    median,
                })
                .collect(),
        },
        Err(e) => FitOutcome {
            formula,
            threshold,
            status: "insufficient-data".into(),
            constant: None,
            r_squared: None,
            grid_points: 0,
            passed: None,
            message: Some(e.to_string()),
            affine: None,
            cells: Vec::new(),
        },
    }
}

/// Median of `f` per `(d, ε)` cell, keyed by `d` then ascending `1/ε`.
fn medians_by_d(
    traces: &[RunTrace],
    f: impl Fn(&RunTrace) -> f64,
) -> BTreeMap<usize, Vec<(f64, f64)>> {
    let mut cells: BTreeMap<(usize, u64), Vec<f64>> = BTreeMap::new();
    for t in traces {
        cells
            .entry((t.d, t.epsilon.to_bits()))
            .or_default()
            .push(f(t));
    }
    let mut out: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for ((d, e), v) in cells {
        out.entry(d)
            .or_default()
            .push((1.0 / f64::from_bits(e), stats::median(&v)));
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

fn log_slope(points: &[(f64, f64)], x: impl Fn(f64) -> f64) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| x(p.0).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.max(1.0).ln()).collect();
    stats::linear_fit(&xs, &ys).slope
}

fn scaling_group(learner: LearnerKind, nu: f64, traces: &[RunTrace]) -> LearnerScaling {
    let mut group = LearnerScaling {
        learner,
        nu,
        fits: Vec::new(),
        log_growth: Vec::new(),
        passive_contrast: Vec::new(),
    };
    match learner {
        LearnerKind::PassiveStrategic => {
            let queries = medians_by_d(traces, |t| t.totals.labels as f64);
            let draws = medians_by_d(traces, |t| t.totals.draws as f64);
            let fractions = medians_by_d(traces, |t| {
                t.totals.labels as f64 / t.totals.draws.max(1) as f64
            });
            for (d, q) in &queries {
                if q.len() < 2 {
                    continue;
                }
                let fr: Vec<f64> = fractions[d].iter().map(|p| p.1).collect();
                let label_fraction = stats::median(&fr);
                let query_exponent = log_slope(q, |inv_eps| inv_eps);
                let draw_exponent = log_slope(&draws[d], |inv_eps| inv_eps);
                group.passive_contrast.push(PassiveContrast {
                    d: *d,
                    points: q.len(),
                    label_fraction,
                    query_exponent,
                    draw_exponent,
                    passed: label_fraction >= PASSIVE_LABEL_FRACTION
                        && query_exponent >= PASSIVE_MIN_EXPONENT,
                });
            }
        }
        _ => {
            group.fits = vec![
                fit_outcome(traces, ScalingFormula::Queries, QUERY_FIT_THRESHOLD),
                fit_outcome(traces, ScalingFormula::Draws, DRAW_FIT_THRESHOLD),
                fit_outcome(traces, ScalingFormula::Mistakes, MISTAKE_FIT_THRESHOLD),
            ];
            for (d, q) in medians_by_d(traces, |t| t.totals.labels as f64) {
                if q.len() < 2 {
                    continue;
                }
                let exponent = log_slope(&q, f64::ln);
                group.log_growth.push(LogGrowth {
                    d,
                    points: q.len(),
                    exponent,
                    passed: exponent <= MAX_LOG_GROWTH_EXPONENT,
                });
            }
        }
    }
    group
}

/// Scaling fits per learner and noise level.
pub fn scaling_report(results: &[RunResult]) -> ScalingReport {
    let mut groups: BTreeMap<(LearnerKind, u64), Vec<RunTrace>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.summary.learner, r.summary.config.nu.to_bits()))
            .or_default()
            .push(r.trace.clone());
    }
    ScalingReport {
        schema_version: SCHEMA_VERSION,
        learners: groups
            .iter()
            .map(|(&(learner, nu), traces)| scaling_group(learner, f64::from_bits(nu), traces))
            .collect(),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    s.push('\n');
    Ok(s)
}

fn series_label(cfg: &ExperimentConfig, with_nu: bool) -> String {
    if with_nu {
        format!("{} d={} nu={}", cfg.learner, cfg.d, cfg.nu)
    } else {
        format!("{} d={}", cfg.learner, cfg.d)
    }
}

fn charts(report: &Report) -> (String, String) {
    let with_nu = report
        .results
        .iter()
        .any(|r| r.summary.config.nu.to_bits() != report.results[0].summary.config.nu.to_bits());
    let mut queries: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    let mut mistakes: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let smallest_eps = report
        .results
        .iter()
        .map(|r| r.summary.config.epsilon)
        .fold(f64::INFINITY, f64::min);
    for r in &report.results {
        let cfg = &r.summary.config;
        let label = series_label(cfg, with_nu);
        let x = (1.0 / cfg.epsilon).ln();
        queries
            .entry(label.clone())
            .or_default()
            .entry(x.to_bits())
            .or_default()
            .push(r.summary.totals.labels as f64);
        if cfg.epsilon == smallest_eps {
            for e in &r.trace.epochs {
                mistakes
                    .entry(label.clone())
                    .or_default()
                    .entry(e.k)
                    .or_default()
                    .push(e.mistakes_k as f64);
            }
        }
    }
    let q_series: Vec<Series> = queries
        .into_iter()
        .map(|(label, pts)| Series {
            label,
            points: pts
                .into_iter()
                .map(|(x, v)| (f64::from_bits(x), stats::median(&v)))
                .collect(),
        })
        .collect();
    let m_series: Vec<Series> = mistakes
        .into_iter()
        .map(|(label, pts)| Series {
            label,
            points: pts
                .into_iter()
                .map(|(k, v)| (k as f64, stats::median(&v)))
                .collect(),
        })
        .collect();
    (
        chart::line_chart(
            "Median label queries",
            "ln(1/epsilon)",
            "queries",
            &q_series,
        ),
        chart::line_chart(
            &format!("Median mistakes per epoch (epsilon = {smallest_eps})"),
            "epoch k",
            "mistakes",
            &m_series,
        ),
    )
}

/// Artifact files of `report` keyed by path relative to the output directory.
pub fn render_artifacts(report: &Report, svg: bool) -> Result<BTreeMap<PathBuf, String>> {
    let mut files = BTreeMap::new();
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &report.results {
        csv.push_str(&r.trace.csv_rows(&r.summary.run_id));
    }
    files.insert(PathBuf::from("epochs.csv"), csv);
    for r in &report.results {
        let path = Path::new("runs").join(format!("{}.json", r.summary.run_id));
        files.insert(path, to_json(&r.summary)?);
    }
    files.insert(PathBuf::from("aggregate.json"), to_json(&report.aggregate)?);
    if let Some(scaling) = &report.scaling {
        files.insert(PathBuf::from("scaling_report.json"), to_json(scaling)?);
        if svg && !report.results.is_empty() {
            let (q, m) = charts(report);
            files.insert(Path::new("charts").join("queries.svg"), q);
            files.insert(Path::new("charts").join("mistakes.svg"), m);
        }
    }
    Ok(files)
}

/// Write the artifacts of `report` below `out`.
pub fn write_artifacts(report: &Report, out: &Path, svg: bool) -> Result<()> {
    for (rel, body) in render_artifacts(report, svg)? {
        let path = out.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, body)?;
    }
    Ok(())
}

/// Execute the scalar configuration once per seed and write its artifacts.
pub fn run(config: &ExperimentConfig, out: &Path, exec: Exec) -> Result<Report> {
    let report = execute(config, false, exec)?;
    write_artifacts(&report, out, false)?;
    Ok(report)
}

/// Execute the grid and write run artifacts plus the scaling report.
pub fn sweep(config: &ExperimentConfig, out: &Path, exec: Exec, svg: bool) -> Result<Report> {
    let report = execute(config, true, exec)?;
    write_artifacts(&report, out, svg)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            d: 3,
            epsilon: 0.25,
            seeds: vec![1, 2],
            mc_samples: 0,
            ..ExperimentConfig::new()
        }
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = ExperimentConfig::from_toml_str("schema_version = 1\nd = 4\nepsilon = 0.125\n")
            .unwrap();
        assert_eq!(cfg.d, 4);
        assert_eq!(cfg.c_b, ScheduleConstants::DEFAULT_C_B);
        assert_eq!(cfg.learner, LearnerKind::ActiveStrategic);
        let cfg = ExperimentConfig::from_toml_str(
            "schema_version = 1\nlearner = \"passive-strategic\"\nnoise_kind = \"random-flip\"\nnu = 0.01\ninit = \"master-init\"\n[grid]\nd = [3, 4]\n",
        )
        .unwrap();
        assert_eq!(cfg.learner, LearnerKind::PassiveStrategic);
        assert_eq!(cfg.noise_kind, NoiseKind::RandomFlip);
        assert_eq!(cfg.init, InitMode::MasterInit);
        assert_eq!(cfg.cells().len(), 2);
    }

    #[test]
    fn field_level_validation() {
        let err = |s: &str| match ExperimentConfig::from_toml_str(s) {
            Err(Error::InvalidConfig(m)) => m,
            other => panic!("expected InvalidConfig, got {other:?}"),
        };
        assert!(err("d = 3\n").contains("schema_version"));
        assert!(err("schema_version = 1\nepsilon = 0.7\n").starts_with("epsilon"));
        assert!(err("schema_version = 1\nnu = 0.1\n").starts_with("nu"));
        assert!(err("schema_version = 1\nv0 = [1.0, 0.0]\n").starts_with("v0"));
        assert!(err("schema_version = 1\nseeds = [1, 1]\n").starts_with("seeds"));
        assert!(err("schema_version = 1\nc_b = 50.0\n").starts_with("c_b"));
        assert!(err("schema_version = 1\nbogus = 3\n").contains("bogus"));
        assert!(err("schema_version = 1\n[grid]\nd = [1]\n").starts_with("d"));
    }

    #[test]
    fn regime_bound() {
        let cfg = ExperimentConfig {
            d: 5,
            epsilon: 0.05,
            delta: 0.1,
            ..ExperimentConfig::new()
        };
        let denom = 5f64.ln() + 20f64.ln().ln() + 10f64.ln();
        assert!((cfg.nu_max() - 0.125 * 0.05 / denom).abs() < 1e-15);
        assert!(cfg.in_theorem_regime());
    }

    #[test]
    fn cells_are_ordered_cross_product() {
        let cfg = ExperimentConfig {
            grid: Some(Grid {
                d: vec![2, 3],
                epsilon: vec![0.25, 0.125],
                nu: vec![],
                learner: vec![],
            }),
            ..small()
        };
        let cells = cfg.cells();
        let keys: Vec<(usize, f64)> = cells.iter().map(|c| (c.d, c.epsilon)).collect();
        assert_eq!(keys, vec![(2, 0.25), (2, 0.125), (3, 0.25), (3, 0.125)]);
        assert!(cells.iter().all(|c| c.grid.is_none()));
    }

    #[test]
    fn default_start_is_orthogonal() {
        let u = vec![0.6, 0.8, 0.0];
        let v = default_start(&u, 9).unwrap();
        assert!((geometry::norm(&v) - 1.0).abs() < 1e-12);
        assert!(dot(&u, &v).abs() < 1e-12);
        assert_eq!(v, default_start(&u, 9).unwrap());
    }

    #[test]
    fn run_accounting_and_echo() {
        let report = execute(&small(), false, Exec::Sequential).unwrap();
        assert_eq!(report.exit_code(), 0);
        assert_eq!(report.results.len(), 2);
        let s = &report.results[0].summary;
        assert_eq!(s.run_id, "s1");
        assert_eq!(s.config.seeds, vec![1]);
        assert_eq!(s.epochs, learner::epoch_count(0.25));
        assert!((s.theta_start - PI / 2.0).abs() < 1e-9);
        let again = run_single(&s.config, 0, 1, "s1", Exec::Sequential).unwrap();
        assert_eq!(again.summary, *s);
        assert!(report.scaling.is_none());
        assert_eq!(report.aggregate.cells.len(), 1);
        assert_eq!(report.aggregate.cells[0].runs, 2);
    }

    #[test]
    fn draw_budget_failures_are_reported() {
        let cfg = ExperimentConfig {
            draw_cap: Some(1),
            ..small()
        };
        let report = execute(&cfg, false, Exec::Sequential).unwrap();
        assert_eq!(report.failures.len(), 2);
        assert_eq!(report.exit_code(), 3);
        assert_eq!(report.aggregate.cells[0].failures, 2);
    }

    #[test]
    fn single_cell_sweep_flags_insufficient_data() {
        let report = execute(&small(), true, Exec::Sequential).unwrap();
        let scaling = report.scaling.unwrap();
        let fit = scaling
            .fit(LearnerKind::ActiveStrategic, ScalingFormula::Queries)
            .unwrap();
        assert_eq!(fit.status, "insufficient-data");
        assert_eq!(fit.passed, None);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), 2);
        assert_eq!(
            exit_code(&Error::DrawBudgetExceeded {
                epoch: Some(1),
                draws: 5,
                cap: 5
            }),
            3
        );
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 1);
    }
}
