//! Property suites behind `stratperc verify` and the acceptance tests.
//!
//! Every check is numbered after the acceptance criterion it covers:
//!
//! * `lemmas`: 1 best response, 2 prediction equivalence, 4 coupling, 5 closed-form error
//! * `theorem`: 3 query purity, 6 epoch contraction, 7 end-to-end error,
//!   8–10 scaling of queries, draws and mistakes, 12 determinism
//! * `init`: 11 initialization

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use crate::environment::{self, Environment, Hypothesis, Label, NoiseKind};
use crate::error::{Error, Result};
use crate::evaluation::{self, ScalingFormula};
use crate::exec::Exec;
use crate::experiment::{self, ExperimentConfig, Grid, InitMode, Report, RunResult};
use crate::geometry::{self, dot};
use crate::learner::{self, ScheduleConstants};
use crate::rng::SimRng;
use crate::stats::{self, SIGNIFICANCE};
use crate::trace::LearnerKind;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Check {
    fn new(id: u32, name: &'static str, passed: bool, detail: String, start: Instant) -> Self {
        Self {
            id,
            name,
            passed,
            detail,
            elapsed: start.elapsed(),
        }
    }

    fn failed(id: u32, name: &'static str, err: &Error, start: Instant) -> Self {
        Self::new(id, name, false, format!("error: {err}"), start)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:>2} {:<28} {:>7.1}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

/// Pass/fail table, one line per check.
pub fn table(checks: &[Check]) -> String {
    let mut out = String::new();
    for c in checks {
        out.push_str(&c.to_string());
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Lemmas,
    Theorem,
    Init,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Lemmas, Suite::Theorem, Suite::Init];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Lemmas => "lemmas",
            Suite::Theorem => "theorem",
            Suite::Init => "init",
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown suite '{s}' (expected lemmas, theorem or init)"
                ))
            })
    }
}

pub fn run_suite(suite: Suite, exec: Exec) -> Vec<Check> {
    match suite {
        Suite::Lemmas => vec![
            best_response_optimality(),
            prediction_equivalence(),
            coupling(),
            closed_form_error(exec),
        ],
        Suite::Theorem => theorem_suite(exec),
        Suite::Init => vec![initialization(exec)],
    }
}

/// Every criterion, ordered by id.
pub fn run_all(exec: Exec) -> Vec<Check> {
    let mut checks: Vec<Check> = Suite::ALL
        .into_iter()
        .flat_map(|s| run_suite(s, exec))
        .collect();
    checks.sort_by_key(|c| c.id);
    checks
}

/// Criterion 1: the closed-form response beats a brute-force grid of reports.
pub fn best_response_optimality() -> Check {
    let start = Instant::now();
    let mut rng = SimRng::new(1001);
    let mut worst = f64::NEG_INFINITY;
    let mut candidates = 0u64;
    for i in 0..500 {
        let d = 2 + i % 3;
        let c = 0.5 + 4.5 * rng.uniform();
        let v = geometry::sample_unit_sphere(d, &mut rng);
        let z = geometry::sample_unit_ball(d, &mut rng);
        let h = match Hypothesis::deployed(v.clone(), c) {
            Ok(h) => h,
            Err(e) => return Check::failed(1, "best-response optimality", &e, start),
        };
        let best = match environment::best_response(&z, &h, c) {
            Ok(obs) => environment::utility(&z, &obs.x, &h, c),
            Err(e) => return Check::failed(1, "best-response optimality", &e, start),
        };
        let r = 1.0 / c;
        let steps = (10_000f64).powf(1.0 / d as f64).ceil() as usize;
        let mut idx = vec![0usize; d];
        let mut cand = vec![0.0; d];
        loop {
            for j in 0..d {
                cand[j] = z[j] - r + 2.0 * r * idx[j] as f64 / (steps - 1) as f64;
            }
            worst = worst.max(environment::utility(&z, &cand, &h, c) - best);
            candidates += 1;
            let mut j = 0;
            while j < d {
                idx[j] += 1;
                if idx[j] < steps {
                    break;
                }
                idx[j] = 0;
                j += 1;
            }
            if j == d {
                break;
            }
        }
        let gap = (h.threshold() - dot(&v, &z)).max(0.0);
        let proj: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + gap * b).collect();
        worst = worst.max(environment::utility(&z, &proj, &h, c) - best);
        candidates += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    Check::new(
        1,
        "best-response optimality",
        worst <= 1e-9 && elapsed < 30.0,
        format!("500 instances, {candidates} candidates, largest candidate advantage {worst:.2e}"),
        start,
    )
}

/// Criterion 2: the strategic rule on best responses equals `sign(v·z)`.
pub fn prediction_equivalence() -> Check {
    let start = Instant::now();
    let mut rng = SimRng::new(1002);
    let mut exceptions = 0u64;
    for _ in 0..100_000 {
        let d = 2 + (rng.next_u64() % 9) as usize;
        let c = 0.25 + 7.75 * rng.uniform();
        let v = geometry::sample_unit_sphere(d, &mut rng);
        let z = geometry::sample_unit_ball(d, &mut rng);
        let ok = Hypothesis::deployed(v.clone(), c)
            .and_then(|h| environment::best_response(&z, &h, c).map(|obs| h.classify(&obs.x)))
            .map(|p| p == Label::of_margin(dot(&v, &z)))
            .unwrap_or(false);
        exceptions += (!ok) as u64;
    }
    let elapsed = start.elapsed().as_secs_f64();
    Check::new(
        2,
        "prediction equivalence",
        exceptions == 0 && elapsed < 10.0,
        format!("100000 triples, {exceptions} exceptions"),
        start,
    )
}

/// Criterion 4: normalized band-conditioned ball draws match band-conditioned
/// sphere draws along `w` and along a fixed random direction.
pub fn coupling() -> Check {
    let start = Instant::now();
    let n = 10_000;
    let b = 0.3;
    let mut lowest = f64::INFINITY;
    let mut failures = Vec::new();
    for d in [2usize, 5, 10] {
        let mut rng = SimRng::new(1004 + d as u64);
        let w = geometry::sample_unit_sphere(d, &mut rng);
        let probe = geometry::sample_unit_sphere(d, &mut rng);
        let in_band = |x: &[f64]| learner::in_band(&w, x, b).unwrap_or(false);
        let mut ball = Vec::with_capacity(n);
        while ball.len() < n {
            let z = geometry::sample_unit_ball(d, &mut rng);
            if in_band(&z) {
                ball.push(geometry::normalize(&z).unwrap_or(z));
            }
        }
        let mut sphere = Vec::with_capacity(n);
        while sphere.len() < n {
            let x = geometry::sample_unit_sphere(d, &mut rng);
            if in_band(&x) {
                sphere.push(x);
            }
        }
        for (name, dir) in [("w", &w), ("probe", &probe)] {
            let a: Vec<f64> = ball.iter().map(|x| dot(dir, x)).collect();
            let s: Vec<f64> = sphere.iter().map(|x| dot(dir, x)).collect();
            let outcome = stats::ks_two_sample(&a, &s);
            lowest = lowest.min(outcome.p_value);
            if !outcome.passes(SIGNIFICANCE) {
                failures.push(format!("d={d}/{name} p={:.4}", outcome.p_value));
            }
        }
    }
    Check::new(
        4,
        "coupling",
        failures.is_empty(),
        format!(
            "6 KS tests at 1%, smallest p = {lowest:.4}{}",
            fmt_failures(&failures)
        ),
        start,
    )
}

fn fmt_failures(f: &[String]) -> String {
    if f.is_empty() {
        String::new()
    } else {
        format!("; failed: {}", f.join(", "))
    }
}

/// Criterion 5: Monte Carlo disagreement agrees with `θ/π` within 4σ.
pub fn closed_form_error(exec: Exec) -> Check {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut max_z: f64 = 0.0;
    for d in [3usize, 6] {
        let mut rng = SimRng::new(1005 + d as u64);
        for i in 0..20 {
            let u = geometry::sample_unit_sphere(d, &mut rng);
            let v = geometry::sample_unit_sphere(d, &mut rng);
            let cfg = match environment::EnvConfig::new(
                u,
                2.0,
                environment::NoiseModel::realizable(),
                environment::AgentModel::Strategic,
                rng.next_u64(),
            ) {
                Ok(c) => c,
                Err(e) => return Check::failed(5, "closed-form error", &e, start),
            };
            match evaluation::mc_error(&v, &cfg, 1_000_000, &mut rng, exec) {
                Ok(r) => {
                    let se = stats::binomial_se(r.excess_error_closed_form, r.n_samples);
                    let z = (r.excess_error_mc - r.excess_error_closed_form).abs() / se.max(1e-300);
                    max_z = max_z.max(z);
                    if z > stats::MEAN_SIGMAS {
                        failures.push(format!("d={d} pair {i}: {z:.2}σ"));
                    }
                }
                Err(e) => return Check::failed(5, "closed-form error", &e, start),
            }
        }
    }
    Check::new(
        5,
        "closed-form error",
        failures.is_empty(),
        format!(
            "40 pairs x 1e6 draws, largest deviation {max_z:.2}σ{}",
            fmt_failures(&failures)
        ),
        start,
    )
}

fn base_config(d: usize, epsilon: f64, seeds: u64) -> ExperimentConfig {
    ExperimentConfig {
        d,
        epsilon,
        delta: 0.1,
        seeds: (0..seeds).collect(),
        mc_samples: 0,
        ..ExperimentConfig::new()
    }
}

fn failure_note(report: &Report) -> String {
    if report.failures.is_empty() {
        String::new()
    } else {
        format!(
            "; {} runs failed: {}",
            report.failures.len(),
            report.failures[0].error
        )
    }
}

/// Criterion 6: every epoch ends within `π/2^{k+1}` in at least 90% of 50 runs.
pub fn epoch_contraction(exec: Exec) -> (Check, Vec<RunResult>) {
    let start = Instant::now();
    let cfg = base_config(5, 0.05, 50);
    let report = match experiment::execute(&cfg, false, exec) {
        Ok(r) => r,
        Err(e) => return (Check::failed(6, "epoch contraction", &e, start), Vec::new()),
    };
    let held = report
        .results
        .iter()
        .filter(|r| r.summary.contraction == Some(true))
        .count();
    let rate = held as f64 / 50.0;
    let elapsed = start.elapsed().as_secs_f64();
    let check = Check::new(
        6,
        "epoch contraction",
        rate >= 0.9 && elapsed < 300.0,
        format!(
            "d=5, k0=5: all epochs contracted in {held}/50 runs{}",
            failure_note(&report)
        ),
        start,
    );
    (check, report.results)
}

/// Criterion 7: final excess error at most ε in at least 90% of 30 runs,
/// realizable and with random flips at half the regime bound.
pub fn end_to_end(exec: Exec) -> (Check, Vec<RunResult>) {
    let start = Instant::now();
    let realizable = base_config(5, 0.05, 30);
    let noisy = ExperimentConfig {
        noise_kind: NoiseKind::RandomFlip,
        nu: 0.5 * realizable.nu_max(),
        ..realizable.clone()
    };
    let mut results = Vec::new();
    let mut parts = Vec::new();
    let mut passed = true;
    for (name, cfg) in [("realizable", &realizable), ("random-flip", &noisy)] {
        let report = match experiment::execute(cfg, false, exec) {
            Ok(r) => r,
            Err(e) => return (Check::failed(7, "end-to-end error", &e, start), results),
        };
        let ok = report.results.iter().filter(|r| r.summary.success).count();
        passed &= ok as f64 >= 0.9 * 30.0;
        parts.push(format!(
            "{name} (nu={:.2e}) {ok}/30{}",
            cfg.nu,
            failure_note(&report)
        ));
        results.extend(report.results);
    }
    let check = Check::new(7, "end-to-end error", passed, parts.join(", "), start);
    (check, results)
}

/// The realizable sweep shared by criteria 8 to 10.
pub fn scaling_sweep_config() -> ExperimentConfig {
    ExperimentConfig {
        grid: Some(Grid {
            d: vec![3, 5, 8],
            epsilon: (3..=7).map(|k| 0.5f64.powi(k)).collect(),
            nu: Vec::new(),
            learner: vec![LearnerKind::ActiveStrategic, LearnerKind::PassiveStrategic],
        }),
        ..base_config(5, 0.05, 10)
    }
}

fn fit_line(report: &Report, formula: ScalingFormula) -> (Option<bool>, String) {
    let Some(fit) = report
        .scaling
        .as_ref()
        .and_then(|s| s.fit(LearnerKind::ActiveStrategic, formula))
    else {
        return (None, "no fit".into());
    };
    match (fit.r_squared, fit.constant) {
        (Some(r2), Some(c)) => {
            let affine = fit
                .affine
                .map(|a| {
                    format!(
                        "; affine R² = {:.3}, intercept {:.3e}",
                        a.r_squared, a.intercept
                    )
                })
                .unwrap_or_default();
            (
                fit.passed,
                format!(
                    "R² = {r2:.3} (C = {c:.3}, {} cells, need {}){affine}",
                    fit.grid_points, fit.threshold
                ),
            )
        }
        _ => (None, fit.message.clone().unwrap_or_default()),
    }
}

/// Criterion 8: total queries follow the `d·ln(1/ε)·L` form, grow at most
/// linearly in `ln(1/ε)`, and the passive learner labels a constant share of
/// its draws.
pub fn query_scaling(report: &Report, start: Instant) -> Check {
    let (fit_ok, fit_detail) = fit_line(report, ScalingFormula::Queries);
    let scaling = report.scaling.as_ref();
    let growth = scaling
        .and_then(|s| s.group(LearnerKind::ActiveStrategic))
        .map(|g| g.log_growth.clone())
        .unwrap_or_default();
    let passive = scaling
        .and_then(|s| s.group(LearnerKind::PassiveStrategic))
        .map(|g| g.passive_contrast.clone())
        .unwrap_or_default();
    let growth_ok = !growth.is_empty() && growth.iter().all(|g| g.passed);
    let passive_ok = !passive.is_empty() && passive.iter().all(|p| p.passed);
    let exps: Vec<String> = growth
        .iter()
        .map(|g| format!("{:.2}", g.exponent))
        .collect();
    let pas: Vec<String> = passive
        .iter()
        .map(|p| format!("{:.2}/{:.2}", p.label_fraction, p.query_exponent))
        .collect();
    Check::new(
        8,
        "label-complexity scaling",
        fit_ok == Some(true) && growth_ok && passive_ok && report.failures.is_empty(),
        format!(
            "{fit_detail}; ln(1/eps) exponents [{}]; passive label share/exponent [{}]{}",
            exps.join(", "),
            pas.join(", "),
            failure_note(report)
        ),
        start,
    )
}

/// Criterion 9: total draws follow the `d·L²·(1/ε)·ln(1/ε)` form.
pub fn draw_scaling(report: &Report, start: Instant) -> Check {
    let (ok, detail) = fit_line(report, ScalingFormula::Draws);
    Check::new(9, "unlabeled-draw scaling", ok == Some(true), detail, start)
}

/// Criterion 10: the per-epoch mistake rate falls by 1.5x from the first to
/// the last epoch in at least 80% of runs, and additional mistakes follow the
/// `d·ln(1/ε)·L²` form.
pub fn mistake_scaling(report: &Report, start: Instant) -> Check {
    let (fit_ok, fit_detail) = fit_line(report, ScalingFormula::Mistakes);
    let active: Vec<&RunResult> = report
        .results
        .iter()
        .filter(|r| r.summary.learner == LearnerKind::ActiveStrategic)
        .collect();
    let dropped = active
        .iter()
        .filter(|r| {
            let (Some(first), Some(last)) = (r.trace.epochs.first(), r.trace.epochs.last()) else {
                return false;
            };
            let rate = |m: u64, n: u64| m as f64 / n.max(1) as f64;
            rate(first.mistakes_k, first.draws_k) >= 1.5 * rate(last.mistakes_k, last.draws_k)
        })
        .count();
    let share = dropped as f64 / active.len().max(1) as f64;
    Check::new(
        10,
        "mistake bound",
        fit_ok == Some(true) && share >= 0.8,
        format!(
            "rate drop >= 1.5x in {dropped}/{} runs; {fit_detail}",
            active.len()
        ),
        start,
    )
}

/// Criterion 3: no queried observation was manipulated, checked through the
/// environment's purity counter on `results` and bit-for-bit on logged queries.
pub fn query_purity(results: &[&RunResult], extra_impure: u64, start: Instant) -> Check {
    let queries: u64 = results.iter().map(|r| r.summary.totals.labels).sum();
    let impure: u64 = results
        .iter()
        .map(|r| r.summary.totals.impure_queries)
        .sum::<u64>()
        + extra_impure;
    let mut logged = 0u64;
    let mut mismatched = 0u64;
    for seed in 0..5 {
        let cfg = base_config(5, 0.05, 1);
        let env_cfg = match experiment::env_config(&cfg, seed) {
            Ok(c) => c,
            Err(e) => return Check::failed(3, "query purity", &e, start),
        };
        let mut env = Environment::new(env_cfg.clone());
        env.record_queries();
        let run = experiment::default_start(env_cfg.u.normal(), seed).and_then(|v0| {
            let schedule = learner::make_schedule(5, 0.05, 0.1, ScheduleConstants::default())?;
            learner::active_strategic_perceptron(
                &mut env,
                &v0,
                0.05,
                0.1,
                &schedule,
                cfg.cost,
                &cfg.options(),
            )
        });
        if let Err(e) = run {
            return Check::failed(3, "query purity", &e, start);
        }
        for q in env.take_query_log() {
            logged += 1;
            let same = !q.manipulated
                && q.x
                    .iter()
                    .zip(&q.z)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            mismatched += (!same) as u64;
        }
    }
    Check::new(
        3,
        "query purity",
        impure == 0 && mismatched == 0 && queries > 0,
        format!("{impure} impure of {queries} counted queries; {mismatched} of {logged} logged queries differ from z"),
        start,
    )
}

/// Criterion 12: artifacts are byte-identical across repeats and across
/// sequential and parallel execution.
pub fn determinism(exec: Exec) -> Check {
    let start = Instant::now();
    let cfg = ExperimentConfig {
        seeds: vec![3, 4, 5],
        mc_samples: 20_000,
        init: InitMode::MasterInit,
        grid: Some(Grid {
            d: vec![3, 4],
            epsilon: vec![0.125, 0.0625],
            nu: Vec::new(),
            learner: Vec::new(),
        }),
        ..base_config(3, 0.125, 3)
    };
    let render = |exec: Exec| {
        experiment::execute(&cfg, true, exec).and_then(|r| experiment::render_artifacts(&r, true))
    };
    let (a, b, c) = match (render(exec), render(exec), render(Exec::Sequential)) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (Err(e), _, _) | (_, Err(e), _) | (_, _, Err(e)) => {
            return Check::failed(12, "determinism", &e, start)
        }
    };
    let bytes: usize = a.values().map(|s| s.len()).sum();
    Check::new(
        12,
        "determinism",
        a == b && a == c,
        format!(
            "{} files, {bytes} bytes; repeat identical: {}, sequential identical: {}",
            a.len(),
            a == b,
            a == c
        ),
        start,
    )
}

fn theorem_suite(exec: Exec) -> Vec<Check> {
    let (c6, r6) = epoch_contraction(exec);
    let (c7, r7) = end_to_end(exec);
    let start = Instant::now();
    let sweep = experiment::execute(&scaling_sweep_config(), true, exec);
    let (c8, c9, c10, r8) = match sweep {
        Ok(report) => (
            query_scaling(&report, start),
            draw_scaling(&report, start),
            mistake_scaling(&report, start),
            report.results,
        ),
        Err(e) => (
            Check::failed(8, "label-complexity scaling", &e, start),
            Check::failed(9, "unlabeled-draw scaling", &e, start),
            Check::failed(10, "mistake bound", &e, start),
            Vec::new(),
        ),
    };
    let purity_start = Instant::now();
    let all: Vec<&RunResult> = r6.iter().chain(&r7).chain(&r8).collect();
    let c3 = query_purity(&all, 0, purity_start);
    let c12 = determinism(exec);
    vec![c3, c6, c7, c8, c9, c10, c12]
}

/// Criterion 11: initialization lands within `π/4` in at least 90% of 30 runs
/// and spends exactly the vote budget whenever the shortcut does not fire.
pub fn initialization(exec: Exec) -> Check {
    let start = Instant::now();
    let cfg = base_config(4, 0.05, 30);
    let budget = learner::vote_sample_size(cfg.delta);
    let seeds: Vec<u64> = cfg.seeds.clone();
    let outcomes = exec.map(&seeds, |&seed| -> Result<(f64, bool, u64, u64)> {
        let env_cfg = experiment::env_config(&cfg, seed)?;
        let mut env = Environment::new(env_cfg);
        let out = learner::initialize(
            &mut env,
            cfg.delta,
            cfg.constants(),
            cfg.cost,
            &cfg.options(),
        )?;
        Ok((
            env.angle_to_truth(&out.v),
            out.shortcut,
            out.vote_queries,
            env.counters().impure_queries,
        ))
    });
    let mut within = 0;
    let mut shortcuts = 0;
    let mut bad_budget = 0;
    let mut impure = 0;
    for o in outcomes {
        match o {
            Ok((angle, shortcut, votes, imp)) => {
                within += (angle <= PI / 4.0) as usize;
                shortcuts += shortcut as usize;
                let expected = if shortcut { 0 } else { budget };
                bad_budget += (votes != expected) as usize;
                impure += imp;
            }
            Err(e) => return Check::failed(11, "initialization", &e, start),
        }
    }
    Check::new(
        11,
        "initialization",
        within as f64 >= 0.9 * 30.0 && bad_budget == 0 && impure == 0,
        format!(
            "d=4: within pi/4 in {within}/30, shortcut in {shortcuts}/30, vote budget {budget} violated {bad_budget} times, {impure} impure queries"
        ),
        start,
    )
}
