//! Reference learners for label and mistake comparisons.

use std::time::Instant;

use crate::environment::{AgentModel, Environment, Hypothesis, Label};
use crate::error::{Error, Result};
use crate::geometry::{self, dot, norm};
use crate::learner::{self, EpochSchedule, LearnerOptions};
use crate::rng::{streams, SimRng};
use crate::trace::{EpochRecord, LearnerKind, RunTrace, Totals};

pub const DEFAULT_HOLDOUT: usize = 10_000;

/// Held-out true feature vectors for the passive learner's stopping rule.
struct Holdout {
    points: Vec<Vec<f64>>,
    truth: Vec<Label>,
}

impl Holdout {
    fn new(env: &Environment, size: usize) -> Self {
        let mut rng = SimRng::stream(env.config().seed, streams::HOLDOUT);
        let points: Vec<Vec<f64>> = (0..size)
            .map(|_| geometry::sample_unit_ball(env.dim(), &mut rng))
            .collect();
        let truth = points
            .iter()
            .map(|z| Label::of_margin(dot(env.truth().normal(), z)))
            .collect();
        Self { points, truth }
    }

    fn excess_error(&self, v: &[f64]) -> f64 {
        if self.points.is_empty() {
            return f64::INFINITY;
        }
        let wrong = self
            .points
            .iter()
            .zip(&self.truth)
            .filter(|(z, t)| Label::of_margin(dot(v, z)) != **t)
            .count();
        wrong as f64 / self.points.len() as f64
    }
}

/// Passive comparator: labels every negatively classified observation and
/// reflects on the misclassified ones. Stops after `max_rounds` draws or once
/// the held-out disagreement with the truth is at most `epsilon`.
pub fn passive_strategic_perceptron(
    env: &mut Environment,
    v0: &[f64],
    epsilon: f64,
    c: f64,
    max_rounds: u64,
    holdout_size: usize,
) -> Result<(Vec<f64>, RunTrace)> {
    if !(c > 0.0) {
        return Err(Error::InvalidCost(c));
    }
    if (norm(v0) - 1.0).abs() > 1e-6 || v0.len() != env.dim() {
        return Err(Error::PreconditionViolated(
            "v0 must be a unit vector".into(),
        ));
    }
    let clock = Instant::now();
    let holdout = Holdout::new(env, holdout_size);
    let start = env.counters();
    let theta_before = env.angle_to_truth(v0);
    let mut w = v0.to_vec();
    let mut updates = 0u64;
    let mut deployed = Hypothesis::deployed(w.clone(), c)?;
    let mut estimate = holdout.excess_error(&w);
    let mut rounds = 0u64;
    while rounds < max_rounds && estimate > epsilon {
        rounds += 1;
        let x = env.observe(&deployed)?;
        let pred = learner::predict(&deployed, x);
        let x_hat = if pred == Label::Negative {
            Some(geometry::normalize(x)?)
        } else {
            None
        };
        env.report_prediction(pred);
        let Some(x_hat) = x_hat else { continue };
        if env.query_label()? == Label::Positive {
            w = learner::reflect_update(&w, &x_hat)?;
            geometry::normalize_in_place(&mut w)?;
            updates += 1;
            deployed = Hypothesis::deployed(w.clone(), c)?;
            estimate = holdout.excess_error(&w);
        }
    }
    let delta = env.counters().since(&start);
    let mut record = EpochRecord::from_counters(1, &delta);
    record.theta_before = theta_before;
    record.theta_after = env.angle_to_truth(&w);
    record.m_k = delta.queries;
    record.b_k = 0.0;
    record.updates_k = updates;
    let mut trace = RunTrace::new(LearnerKind::PassiveStrategic, env.dim(), epsilon, f64::NAN);
    trace.epochs.push(record);
    trace.totals = Totals::from_counters(&delta, updates);
    trace.wall_clock = clock.elapsed();
    Ok((w, trace))
}

/// The non-strategic margin-based learner: same control flow, threshold 0,
/// truthful agents.
pub fn nonstrategic_active_perceptron(
    env: &mut Environment,
    v0: &[f64],
    epsilon: f64,
    delta: f64,
    schedule: &EpochSchedule,
    opts: &LearnerOptions,
) -> Result<(Vec<f64>, RunTrace)> {
    if env.config().agents != AgentModel::Truthful {
        return Err(Error::InvalidConfig(
            "the non-strategic learner needs an environment of truthful agents".into(),
        ));
    }
    let (v, mut trace) = learner::outer_loop(env, v0, epsilon, delta, schedule, 0.0, opts)?;
    trace.learner = LearnerKind::NonstrategicActive;
    Ok((v, trace))
}
