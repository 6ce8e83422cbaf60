//! Error measurement, mistake accounting and scaling fits.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::Serialize;

use crate::environment::{self, EnvConfig, Hypothesis, Label};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{self, dot};
use crate::rng::SimRng;
use crate::stats;
use crate::trace::RunTrace;

/// Prediction bookkeeping against the revealed label and the ideal rule `u`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MistakeLedger {
    pub predictions: u64,
    pub alg_mistakes: u64,
    pub u_mistakes: u64,
    pub disagreements_with_u: u64,
}

impl MistakeLedger {
    #[inline]
    pub fn record(&mut self, predicted: Label, y: Label, u_label: Label) {
        self.predictions += 1;
        self.alg_mistakes += (predicted != y) as u64;
        self.u_mistakes += (u_label != y) as u64;
        self.disagreements_with_u += (predicted != u_label) as u64;
    }

    /// Mistakes beyond those `u` makes on the same stream.
    pub fn additional(&self) -> i64 {
        self.alg_mistakes as i64 - self.u_mistakes as i64
    }

    pub fn since(&self, earlier: &MistakeLedger) -> MistakeLedger {
        MistakeLedger {
            predictions: self.predictions - earlier.predictions,
            alg_mistakes: self.alg_mistakes - earlier.alg_mistakes,
            u_mistakes: self.u_mistakes - earlier.u_mistakes,
            disagreements_with_u: self.disagreements_with_u - earlier.disagreements_with_u,
        }
    }
}

/// Disagreement mass of two homogeneous halfspaces under the uniform ball: `θ/π`.
pub fn excess_error(v: &[f64], u: &[f64]) -> Result<f64> {
    Ok(geometry::angle(v, u)? / PI)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub theta: f64,
    pub excess_error_closed_form: f64,
    /// Monte Carlo disagreement rate with `u` on true features.
    pub excess_error_mc: f64,
    pub standard_error: f64,
    pub n_samples: u64,
    /// Monte Carlo `P[prediction ≠ y]` on true features.
    pub error_rate: f64,
    /// Same, but classifying best responses to `(v, 1/c)`.
    pub error_rate_strategic: f64,
    /// Draws on which the two prediction paths differ (zero for best-responding agents).
    pub path_mismatches: u64,
    /// `|mc - closed form| ≤ 4 standard errors`.
    pub consistent: bool,
}

const MC_CHUNK: u64 = 1 << 16;

#[derive(Default)]
struct McCounts {
    disagree: u64,
    errors: u64,
    errors_strategic: u64,
    mismatches: u64,
}

/// Estimate the error of `v` on fresh draws from `env`, along both the
/// true-feature path and the strategic path.
pub fn mc_error(
    v: &[f64],
    env: &EnvConfig,
    n: u64,
    rng: &mut SimRng,
    exec: Exec,
) -> Result<ErrorReport> {
    if n < 1000 {
        return Err(Error::InsufficientData(format!(
            "mc_error needs n ≥ 1000, got {n}"
        )));
    }
    let v = geometry::normalize(v)?;
    let ideal = Hypothesis::homogeneous(v.clone())?;
    let deployed = Hypothesis::deployed(v.clone(), env.c)?;
    let base = rng.next_u64();
    let chunks = n.div_ceil(MC_CHUNK) as usize;
    let parts = exec.map_range(chunks, |i| {
        let mut r = SimRng::stream(base, i as u64);
        let len = MC_CHUNK.min(n - i as u64 * MC_CHUNK);
        let mut c = McCounts::default();
        for _ in 0..len {
            let (ex, obs) = environment::draw_example(env, &deployed, &mut r);
            let pred = ideal.classify(&ex.z);
            let pred_strategic = deployed.classify(&obs.x);
            let u_label = Label::of_margin(dot(env.u.normal(), &ex.z));
            c.disagree += (pred != u_label) as u64;
            c.errors += (pred != ex.y) as u64;
            c.errors_strategic += (pred_strategic != ex.y) as u64;
            c.mismatches += (pred != pred_strategic) as u64;
        }
        c
    });
    let total = parts.into_iter().fold(McCounts::default(), |mut a, c| {
        a.disagree += c.disagree;
        a.errors += c.errors;
        a.errors_strategic += c.errors_strategic;
        a.mismatches += c.mismatches;
        a
    });
    let theta = geometry::angle(&v, env.u.normal())?;
    let closed = theta / PI;
    let mc = total.disagree as f64 / n as f64;
    let se = stats::binomial_se(mc, n);
    let tolerance = stats::MEAN_SIGMAS * se.max(stats::binomial_se(closed, n));
    Ok(ErrorReport {
        theta,
        excess_error_closed_form: closed,
        excess_error_mc: mc,
        standard_error: se,
        n_samples: n,
        error_rate: total.errors as f64 / n as f64,
        error_rate_strategic: total.errors_strategic as f64 / n as f64,
        path_mismatches: total.mismatches,
        consistent: (mc - closed).abs() <= tolerance,
    })
}

/// Growth forms of the run totals being checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingFormula {
    /// `d·ln(1/ε)·L` against total label queries.
    Queries,
    /// `d·L²·(1/ε)·ln(1/ε)` against total unlabeled draws.
    Draws,
    /// `d·ln(1/ε)·L²` against additional mistakes.
    Mistakes,
}

impl ScalingFormula {
    /// `L = ln d + ln(1/δ) + ln ln(1/ε)`.
    pub fn log_factor(d: usize, epsilon: f64, delta: f64) -> f64 {
        (d as f64).ln() + (1.0 / delta).ln() + (1.0 / epsilon).ln().ln()
    }

    pub fn predictor(self, d: usize, epsilon: f64, delta: f64) -> f64 {
        let l = Self::log_factor(d, epsilon, delta);
        let df = d as f64;
        let log_eps = (1.0 / epsilon).ln();
        match self {
            ScalingFormula::Queries => df * log_eps * l,
            ScalingFormula::Draws => df * l * l * log_eps / epsilon,
            ScalingFormula::Mistakes => df * log_eps * l * l,
        }
    }

    pub fn observed(self, trace: &RunTrace) -> f64 {
        match self {
            ScalingFormula::Queries => trace.totals.labels as f64,
            ScalingFormula::Draws => trace.totals.draws as f64,
            ScalingFormula::Mistakes => trace.totals.additional_mistakes as f64,
        }
    }
}

pub const MIN_GRID_POINTS: usize = 6;
pub const MIN_SEEDS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingFit {
    pub formula: ScalingFormula,
    pub constant: f64,
    pub r_squared: f64,
    pub grid_points: usize,
    /// `(d, ε, predictor, median observed)` per grid cell.
    pub cells: Vec<(usize, f64, f64, f64)>,
}

/// Least squares through the origin, `y ≈ C·x`. Returns `(C, R²)`.
pub fn fit_through_origin(x: &[f64], y: &[f64]) -> (f64, f64) {
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let c = sxy / sxx;
    (c, stats::r_squared(y, x.iter().map(|a| c * a)))
}

/// Fit the medians of each `(d, ε, δ)` cell against `formula`.
pub fn fit_scaling(traces: &[RunTrace], formula: ScalingFormula) -> Result<ScalingFit> {
    let mut cells: BTreeMap<(usize, u64, u64), Vec<f64>> = BTreeMap::new();
    for t in traces {
        cells
            .entry((t.d, t.epsilon.to_bits(), t.delta.to_bits()))
            .or_default()
            .push(formula.observed(t));
    }
    if cells.len() < MIN_GRID_POINTS {
        return Err(Error::InsufficientData(format!(
            "{} grid points, need at least {MIN_GRID_POINTS}",
            cells.len()
        )));
    }
    if let Some(v) = cells.values().find(|v| v.len() < MIN_SEEDS) {
        return Err(Error::InsufficientData(format!(
            "a grid point has {} seeds, need at least {MIN_SEEDS}",
            v.len()
        )));
    }
    let rows: Vec<(usize, f64, f64, f64)> = cells
        .iter()
        .map(|(&(d, e, dl), v)| {
            let eps = f64::from_bits(e);
            (
                d,
                eps,
                formula.predictor(d, eps, f64::from_bits(dl)),
                stats::median(v),
            )
        })
        .collect();
    let x: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.3).collect();
    let (constant, r_squared) = fit_through_origin(&x, &y);
    Ok(ScalingFit {
        formula,
        constant,
        r_squared,
        grid_points: rows.len(),
        cells: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{AgentModel, NoiseKind, NoiseModel};
    use crate::trace::{LearnerKind, Totals};

    #[test]
    fn closed_form_examples() {
        let u = geometry::unit_vector(3, 0);
        assert_eq!(excess_error(&u, &u).unwrap(), 0.0);
        assert!((excess_error(&geometry::unit_vector(3, 1), &u).unwrap() - 0.5).abs() < 1e-15);
        assert!(excess_error(&[0.0; 3], &u).is_err());
    }

    #[test]
    fn closed_form_matches_monte_carlo_disagreement() {
        let d = 6;
        let mut rng = SimRng::new(31);
        let u = geometry::sample_unit_sphere(d, &mut rng);
        let v = geometry::sample_unit_sphere(d, &mut rng);
        let n = 1_000_000u64;
        let dis = (0..n)
            .filter(|_| {
                let z = geometry::sample_unit_ball(d, &mut rng);
                Label::of_margin(dot(&u, &z)) != Label::of_margin(dot(&v, &z))
            })
            .count() as f64;
        let p = excess_error(&v, &u).unwrap();
        assert!(stats::within_binomial(dis / n as f64, p, n, 4.0));
    }

    #[test]
    fn ledger_additional_bounded_by_disagreements() {
        use Label::*;
        let mut l = MistakeLedger::default();
        for (p, y, u) in [
            (Positive, Positive, Positive),
            (Negative, Positive, Positive),
            (Positive, Negative, Positive),
            (Negative, Negative, Positive),
        ] {
            l.record(p, y, u);
        }
        assert_eq!(l.alg_mistakes, 2);
        assert_eq!(l.u_mistakes, 2);
        assert_eq!(l.disagreements_with_u, 2);
        assert!(l.additional() <= l.disagreements_with_u as i64);
    }

    #[test]
    fn mc_error_realizable_truth_is_exact() {
        let cfg = EnvConfig::realizable(4, 2.0, 1).unwrap();
        let mut rng = SimRng::new(2);
        let rep = mc_error(cfg.u.normal(), &cfg, 20_000, &mut rng, Exec::Parallel).unwrap();
        assert_eq!(rep.excess_error_mc, 0.0);
        assert_eq!(rep.error_rate, 0.0);
        assert_eq!(rep.error_rate_strategic, 0.0);
        assert!(rep.consistent);
        assert!(mc_error(cfg.u.normal(), &cfg, 10, &mut rng, Exec::Parallel).is_err());
    }

    #[test]
    fn mc_error_sees_flip_rate() {
        let d = 3;
        let noise = NoiseModel::new(NoiseKind::RandomFlip, 0.1, d).unwrap();
        let cfg = EnvConfig::new(
            geometry::unit_vector(d, 0),
            2.0,
            noise,
            AgentModel::Strategic,
            3,
        )
        .unwrap();
        let mut rng = SimRng::new(4);
        let n = 200_000;
        let rep = mc_error(cfg.u.normal(), &cfg, n, &mut rng, Exec::Parallel).unwrap();
        assert!(stats::within_binomial(rep.error_rate, 0.1, n, 3.0));
        assert_eq!(rep.error_rate, rep.error_rate_strategic);
    }

    #[test]
    fn mc_error_paths_agree_and_modes_agree() {
        let d = 5;
        let cfg = EnvConfig::realizable(d, 1.5, 5).unwrap();
        let mut r = SimRng::new(6);
        let v = geometry::sample_unit_sphere(d, &mut r);
        let a = mc_error(&v, &cfg, 100_000, &mut SimRng::new(7), Exec::Parallel).unwrap();
        let b = mc_error(&v, &cfg, 100_000, &mut SimRng::new(7), Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.path_mismatches, 0);
        assert_eq!(a.error_rate, a.error_rate_strategic);
        assert!(a.consistent);
    }

    #[test]
    fn mc_error_is_unbiased_over_repeats() {
        let d = 3;
        let cfg = EnvConfig::realizable(d, 2.0, 8).unwrap();
        let v = geometry::normalize(&[1.0, 1.0, 0.0]).unwrap();
        let p = excess_error(&v, cfg.u.normal()).unwrap();
        let reps = 40;
        let n = 5_000u64;
        let mut rng = SimRng::new(9);
        let mean = (0..reps)
            .map(|_| {
                mc_error(&v, &cfg, n, &mut rng, Exec::Sequential)
                    .unwrap()
                    .excess_error_mc
            })
            .sum::<f64>()
            / reps as f64;
        assert!(stats::within_binomial(mean, p, n * reps, 4.0));
    }

    fn synthetic(formula: ScalingFormula, constant: f64) -> Vec<RunTrace> {
        let mut out = Vec::new();
        for d in [3, 5, 8] {
            for e in [0.125, 0.0625] {
                for _ in 0..MIN_SEEDS {
                    let mut t = RunTrace::new(LearnerKind::ActiveStrategic, d, e, 0.1);
                    let v = constant * formula.predictor(d, e, 0.1);
                    t.totals = Totals {
                        labels: v.round() as u64,
                        draws: v.round() as u64,
                        additional_mistakes: v.round() as i64,
                        ..Default::default()
                    };
                    out.push(t);
                }
            }
        }
        out
    }

    #[test]
    fn scaling_fit_recovers_constant() {
        // totals built exactly from the formula, scaled up so rounding is negligible
        for f in [
            ScalingFormula::Queries,
            ScalingFormula::Draws,
            ScalingFormula::Mistakes,
        ] {
            let traces = synthetic(f, 3.0e6);
            let fit = fit_scaling(&traces, f).unwrap();
            assert!(
                (fit.constant / 1.0e6 - 3.0).abs() < 1e-6,
                "{f:?}: {}",
                fit.constant
            );
            assert!((fit.r_squared - 1.0).abs() < 1e-9);
            assert_eq!(fit.grid_points, 6);
        }
    }

    #[test]
    fn scaling_fit_needs_data() {
        let mut traces = synthetic(ScalingFormula::Queries, 3.0);
        traces.retain(|t| t.d != 8);
        assert!(matches!(
            fit_scaling(&traces, ScalingFormula::Queries),
            Err(Error::InsufficientData(_))
        ));
        let mut traces = synthetic(ScalingFormula::Queries, 3.0);
        traces.pop();
        assert!(matches!(
            fit_scaling(&traces, ScalingFormula::Queries),
            Err(Error::InsufficientData(_))
        ));
    }
}
