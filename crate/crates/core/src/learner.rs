//! The active strategic Perceptron.
//!
//! The outer loop runs `k0 = ⌈log2(1/ε)⌉` epochs. Epoch `k` hands the current
//! hypothesis to the inner loop with angle bound `π/2^k`, confidence
//! `δ/(k(k+1))`, `m_k` label queries and band width `b_k`. The inner loop
//! deploys `(w, 1/c)`, skips observations until one falls in the negative-side
//! band `-b ≤ w·x̂ ≤ -b/2`, queries its label and reflects `w` across `x̂` when
//! the label is positive. Band points are classified negative, so their agents
//! never manipulate and every labeled point is a true feature vector.

use std::f64::consts::{FRAC_PI_2, PI};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::environment::{Environment, Hypothesis, Label, UNIT_TOL};
use crate::error::{Error, Result};
use crate::geometry::{self, dot, norm};
use crate::trace::{EpochRecord, LearnerKind, RoundRecord, RunTrace, Totals};

/// Which confidence enters the log factor of the band width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandLogForm {
    /// `ln(k·m_k/δ_k)`.
    #[default]
    Theorem,
    /// `ln(m_k/δ_k)`.
    Lemma,
}

/// Leading constants of the epoch schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConstants {
    pub c_m: f64,
    pub c_b: f64,
    #[serde(default)]
    pub log_form: BandLogForm,
}

impl ScheduleConstants {
    /// Smallest constants (with `c_m = 4`) whose epochs halve the angle in at
    /// least 95% of 100 realizable runs at `d = 5`.
    pub const DEFAULT_C_M: f64 = 4.0;
    pub const DEFAULT_C_B: f64 = 1.5;
}

impl Default for ScheduleConstants {
    fn default() -> Self {
        Self {
            c_m: Self::DEFAULT_C_M,
            c_b: Self::DEFAULT_C_B,
            log_form: BandLogForm::Theorem,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochParams {
    pub k: usize,
    pub m: u64,
    pub b: f64,
    pub delta_k: f64,
    pub theta_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSchedule {
    pub constants: ScheduleConstants,
    pub d: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub k0: usize,
    pub epochs: Vec<EpochParams>,
}

/// `⌈log2(1/ε)⌉`.
pub fn epoch_count(epsilon: f64) -> usize {
    (1.0 / epsilon).log2().ceil().max(1.0) as usize
}

/// `m_k = ⌈C_m·d·(ln d + ln(k/δ_k))⌉` with `δ_k = δ/(k(k+1))`.
pub fn iterations(d: usize, delta: f64, k: usize, c_m: f64) -> u64 {
    let dk = delta / (k * (k + 1)) as f64;
    let df = d as f64;
    ((c_m * df * (df.ln() + (k as f64 / dk).ln())).ceil() as u64).max(1)
}

/// `b_k = C_b·2^{-k} / (√d · ln(·))`, with the log argument chosen by `form`.
pub fn band_width(d: usize, delta: f64, k: usize, m: u64, constants: &ScheduleConstants) -> f64 {
    let dk = delta / (k * (k + 1)) as f64;
    let arg = match constants.log_form {
        BandLogForm::Theorem => k as f64 * m as f64 / dk,
        BandLogForm::Lemma => m as f64 / dk,
    };
    constants.c_b * 0.5f64.powi(k as i32) / ((d as f64).sqrt() * arg.ln())
}

pub fn make_schedule(
    d: usize,
    epsilon: f64,
    delta: f64,
    constants: ScheduleConstants,
) -> Result<EpochSchedule> {
    geometry::check_dimension(d)?;
    if !(epsilon > 0.0 && epsilon <= 0.5) {
        return Err(Error::InvalidConfig(format!(
            "epsilon must lie in (0, 1/2], got {epsilon}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if !(constants.c_m > 0.0 && constants.c_b > 0.0) {
        return Err(Error::InvalidConfig(
            "schedule constants must be positive".into(),
        ));
    }
    let k0 = epoch_count(epsilon);
    let mut epochs = Vec::with_capacity(k0);
    for k in 1..=k0 {
        let m = iterations(d, delta, k, constants.c_m);
        let b = band_width(d, delta, k, m, &constants);
        if !(b > 0.0 && b < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "band width b_{k} = {b} is outside (0, 1); shrink c_b"
            )));
        }
        epochs.push(EpochParams {
            k,
            m,
            b,
            delta_k: delta / (k * (k + 1)) as f64,
            theta_bound: PI / 2f64.powi(k as i32),
        });
    }
    Ok(EpochSchedule {
        constants,
        d,
        epsilon,
        delta,
        k0,
        epochs,
    })
}

#[inline]
pub fn predict(h: &Hypothesis, x: &[f64]) -> Label {
    h.classify(x)
}

/// `-b ≤ w·x̂ ≤ -b/2`.
pub fn in_band(w: &[f64], x: &[f64], b: f64) -> Result<bool> {
    let n = norm(x);
    if !(n >= geometry::ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    let s = dot(w, x) / n;
    Ok(s >= -b && s <= -0.5 * b)
}

/// Reflect `w` across the hyperplane orthogonal to `x̂`: `w - 2(w·x̂)x̂`.
pub fn reflect_update(w: &[f64], x_hat: &[f64]) -> Result<Vec<f64>> {
    if (norm(w) - 1.0).abs() > UNIT_TOL || (norm(x_hat) - 1.0).abs() > UNIT_TOL {
        return Err(Error::PreconditionViolated(
            "reflection needs unit vectors".into(),
        ));
    }
    let s = dot(w, x_hat);
    if s >= 0.0 {
        return Err(Error::PreconditionViolated(format!(
            "reflection is only applied when w·x̂ < 0, got {s}"
        )));
    }
    Ok(w.iter()
        .zip(x_hat)
        .map(|(wi, xi)| wi - 2.0 * s * xi)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerOptions {
    /// Per-round draw cap as a multiple of `1 / band_fraction(b, d)`.
    pub draw_cap_factor: f64,
    /// Absolute per-round draw cap; overrides the factor when set.
    pub draw_cap: Option<u64>,
    /// Draw cap of the disagreement-collection phase of [`initialize`].
    pub init_draw_cap: Option<u64>,
    /// Keep a [`RoundRecord`] for every label query.
    pub record_rounds: bool,
}

impl Default for LearnerOptions {
    fn default() -> Self {
        Self {
            draw_cap_factor: 100.0,
            draw_cap: None,
            init_draw_cap: None,
            record_rounds: false,
        }
    }
}

impl LearnerOptions {
    pub fn round_cap(&self, b: f64, d: usize) -> Result<u64> {
        if let Some(cap) = self.draw_cap {
            return Ok(cap.max(1));
        }
        Ok((self.draw_cap_factor / geometry::band_fraction(b, d)?).ceil() as u64)
    }
}

/// Result of one inner-loop invocation.
#[derive(Clone, Debug)]
pub struct InnerRun {
    pub w: Vec<f64>,
    pub record: EpochRecord,
    pub rounds: Vec<RoundRecord>,
}

/// One epoch: `m` label-query rounds in the band of width `b`, deploying
/// `(w_t, threshold)` to the agents.
#[allow(clippy::too_many_arguments)]
pub fn inner_loop(
    env: &mut Environment,
    w0: &[f64],
    theta: f64,
    delta: f64,
    m: u64,
    b: f64,
    threshold: f64,
    opts: &LearnerOptions,
) -> Result<InnerRun> {
    let d = env.dim();
    if w0.len() != d || (norm(w0) - 1.0).abs() > 1e-6 {
        return Err(Error::PreconditionViolated(
            "w0 must be a unit vector of the environment's dimension".into(),
        ));
    }
    if !(theta > 0.0 && theta <= FRAC_PI_2 + 1e-12) {
        return Err(Error::PreconditionViolated(format!(
            "angle bound must lie in (0, π/2], got {theta}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::PreconditionViolated(format!(
            "confidence must lie in (0, 1), got {delta}"
        )));
    }
    if !(b > 0.0 && b < 1.0) {
        return Err(Error::InvalidBand(b));
    }
    let cap = opts.round_cap(b, d)?;
    let start = env.counters();
    let theta_before = env.angle_to_truth(w0);
    let mut w = w0.to_vec();
    let mut x_hat = vec![0.0; d];
    let mut updates = 0u64;
    let mut rounds = Vec::new();

    for _ in 0..m {
        let deployed = Hypothesis::new(w.clone(), threshold)?;
        let mut draws = 0u64;
        loop {
            if draws >= cap {
                return Err(Error::DrawBudgetExceeded {
                    epoch: None,
                    draws,
                    cap,
                });
            }
            draws += 1;
            let x = env.observe(&deployed)?;
            let pred = predict(&deployed, x);
            let hit = in_band(&w, x, b)?;
            if hit {
                let n = norm(x);
                x_hat.iter_mut().zip(x).for_each(|(h, xi)| *h = xi / n);
            }
            env.report_prediction(pred);
            if hit {
                break;
            }
        }
        let y = env.query_label()?;
        let margin_before = dot(&w, &x_hat);
        let updated = y == Label::Positive;
        if updated {
            w = reflect_update(&w, &x_hat)?;
            geometry::normalize_in_place(&mut w)?;
            updates += 1;
        }
        if opts.record_rounds {
            rounds.push(RoundRecord {
                epoch: 0,
                x_hat: x_hat.clone(),
                margin_before,
                margin_after: dot(&w, &x_hat),
                label: y,
                updated,
                norm_after: norm(&w),
            });
        }
    }

    let mut record = EpochRecord::from_counters(0, &env.counters().since(&start));
    record.theta_before = theta_before;
    record.theta_after = env.angle_to_truth(&w);
    record.m_k = m;
    record.b_k = b;
    record.updates_k = updates;
    Ok(InnerRun { w, record, rounds })
}

/// All epochs of the schedule starting from `v0`.
pub fn outer_loop(
    env: &mut Environment,
    v0: &[f64],
    epsilon: f64,
    delta: f64,
    schedule: &EpochSchedule,
    threshold: f64,
    opts: &LearnerOptions,
) -> Result<(Vec<f64>, RunTrace)> {
    if (norm(v0) - 1.0).abs() > 1e-6 {
        return Err(Error::PreconditionViolated(
            "v0 must be a unit vector".into(),
        ));
    }
    if schedule.epsilon != epsilon || schedule.delta != delta || schedule.d != env.dim() {
        return Err(Error::InvalidConfig(
            "schedule was built for a different (d, ε, δ)".into(),
        ));
    }
    let clock = Instant::now();
    let start = env.counters();
    let mut trace = RunTrace::new(LearnerKind::ActiveStrategic, schedule.d, epsilon, delta);
    let mut v = v0.to_vec();
    for p in &schedule.epochs {
        let run = inner_loop(env, &v, p.theta_bound, p.delta_k, p.m, p.b, threshold, opts)
            .map_err(|e| e.in_epoch(p.k))?;
        v = run.w;
        let mut record = run.record;
        record.k = p.k;
        trace.epochs.push(record);
        trace.rounds.extend(run.rounds.into_iter().map(|mut r| {
            r.epoch = p.k;
            r
        }));
    }
    let updates = trace.epochs.iter().map(|e| e.updates_k).sum();
    trace.totals = Totals::from_counters(&env.counters().since(&start), updates);
    trace.wall_clock = clock.elapsed();
    Ok((v, trace))
}

/// The strategic learner: deploys `(v, 1/c)`.
pub fn active_strategic_perceptron(
    env: &mut Environment,
    v0: &[f64],
    epsilon: f64,
    delta: f64,
    schedule: &EpochSchedule,
    c: f64,
    opts: &LearnerOptions,
) -> Result<(Vec<f64>, RunTrace)> {
    if !(c > 0.0) {
        return Err(Error::InvalidCost(c));
    }
    outer_loop(env, v0, epsilon, delta, schedule, 1.0 / c, opts)
}

/// Label budget of the disagreement vote: `⌈8 ln(6/δ)⌉`.
pub fn vote_sample_size(delta: f64) -> u64 {
    (8.0 * (6.0 / delta).ln()).ceil() as u64
}

/// Angle below which the two candidate runs are taken to agree.
pub const AGREEMENT_ANGLE: f64 = PI / 20.0;

#[derive(Clone, Debug, Serialize)]
pub struct InitOutcome {
    pub v: Vec<f64>,
    pub v_plus: Vec<f64>,
    pub v_minus: Vec<f64>,
    pub shortcut: bool,
    pub vote_queries: u64,
    pub vote_draws: u64,
    pub plus_disagreements: u64,
    pub minus_disagreements: u64,
    pub plus_trace: RunTrace,
    pub minus_trace: RunTrace,
}

/// Find a starting hypothesis within `π/4` of the truth.
///
/// Runs the learner to target error 1/16 from `e1` and from `-e1`. If the two
/// answers agree it keeps `v+`. Otherwise it deploys the constant-negative
/// rule, labels `⌈8 ln(6/δ)⌉` points where the candidates disagree, and keeps
/// the candidate with fewer disagreements with those labels (`v+` on ties).
pub fn initialize(
    env: &mut Environment,
    delta: f64,
    constants: ScheduleConstants,
    c: f64,
    opts: &LearnerOptions,
) -> Result<InitOutcome> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let d = env.dim();
    let epsilon = 1.0 / 16.0;
    let sub_delta = delta / 3.0;
    let schedule = make_schedule(d, epsilon, sub_delta, constants)?;
    let e1 = geometry::unit_vector(d, 0);
    let minus_e1 = geometry::scale(&e1, -1.0);
    let (v_plus, plus_trace) =
        active_strategic_perceptron(env, &e1, epsilon, sub_delta, &schedule, c, opts)?;
    let (v_minus, minus_trace) =
        active_strategic_perceptron(env, &minus_e1, epsilon, sub_delta, &schedule, c, opts)?;

    let mut outcome = InitOutcome {
        v: v_plus.clone(),
        v_plus,
        v_minus,
        shortcut: false,
        vote_queries: 0,
        vote_draws: 0,
        plus_disagreements: 0,
        minus_disagreements: 0,
        plus_trace,
        minus_trace,
    };
    let gap = geometry::angle(&outcome.v_minus, &outcome.v_plus)?;
    if gap <= AGREEMENT_ANGLE {
        outcome.shortcut = true;
        return Ok(outcome);
    }

    let needed = vote_sample_size(delta);
    let cap = opts
        .init_draw_cap
        .unwrap_or_else(|| (100.0 * needed as f64 / (gap / PI)).ceil() as u64);
    let silent = Hypothesis::constant_negative(d);
    while outcome.vote_queries < needed {
        if outcome.vote_draws >= cap {
            return Err(Error::DrawBudgetExceeded {
                epoch: None,
                draws: outcome.vote_draws,
                cap,
            });
        }
        outcome.vote_draws += 1;
        let x = env.observe(&silent)?;
        let plus = Label::of_margin(dot(&outcome.v_plus, x));
        let minus = Label::of_margin(dot(&outcome.v_minus, x));
        env.report_prediction(Label::Negative);
        if plus != minus {
            let y = env.query_label()?;
            outcome.vote_queries += 1;
            outcome.plus_disagreements += (plus != y) as u64;
            outcome.minus_disagreements += (minus != y) as u64;
        }
    }
    if outcome.plus_disagreements > outcome.minus_disagreements {
        outcome.v = outcome.v_minus.clone();
    }
    Ok(outcome)
}
