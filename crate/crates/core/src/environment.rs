//! Strategic agents, noisy ground truth and the example stream.
//!
//! The [`Environment`] is the simulator side of the online protocol. A learner
//! deploys a [`Hypothesis`], observes the (possibly manipulated) report `x`,
//! announces its prediction and may ask for the label. The true features `z`
//! never leave the environment except through diagnostics.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::MistakeLedger;
use crate::geometry::{self, dot, norm};
use crate::rng::{streams, SimRng};

/// Tolerance on the unit length of hypothesis normals.
pub const UNIT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    /// `sign(m)` with `sign(0) = +1`.
    #[inline]
    pub fn of_margin(m: f64) -> Label {
        if m >= 0.0 {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    #[inline]
    pub fn flipped(self) -> Label {
        match self {
            Label::Negative => Label::Positive,
            Label::Positive => Label::Negative,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Label::Negative => -1,
            Label::Positive => 1,
        }
    }
}

/// Halfspace `normal·x ≥ threshold` with a unit normal.
///
/// Ideal rules (the ground truth `u`) use threshold 0, deployed rules use
/// `1/c`. A threshold of `+∞` is the constant-negative rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    normal: Vec<f64>,
    threshold: f64,
}

impl Hypothesis {
    pub fn new(normal: Vec<f64>, threshold: f64) -> Result<Self> {
        geometry::check_dimension(normal.len())?;
        if (norm(&normal) - 1.0).abs() > UNIT_TOL || normal.iter().any(|v| !v.is_finite()) {
            return Err(Error::PreconditionViolated(format!(
                "hypothesis normal must be unit length, got norm {}",
                norm(&normal)
            )));
        }
        if threshold.is_nan() || threshold < 0.0 {
            return Err(Error::PreconditionViolated(format!(
                "threshold must be non-negative, got {threshold}"
            )));
        }
        Ok(Self { normal, threshold })
    }

    pub fn homogeneous(normal: Vec<f64>) -> Result<Self> {
        Self::new(normal, 0.0)
    }

    /// The strategic deployment `normal·x ≥ 1/c`.
    pub fn deployed(normal: Vec<f64>, c: f64) -> Result<Self> {
        check_cost(c)?;
        Self::new(normal, 1.0 / c)
    }

    /// Predicts negative on everything, so no agent gains from moving.
    pub fn constant_negative(d: usize) -> Self {
        Self {
            normal: geometry::unit_vector(d, 0),
            threshold: f64::INFINITY,
        }
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn dim(&self) -> usize {
        self.normal.len()
    }

    pub fn is_constant_negative(&self) -> bool {
        self.threshold == f64::INFINITY
    }

    #[inline]
    pub fn classify(&self, x: &[f64]) -> Label {
        if dot(&self.normal, x) >= self.threshold {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

fn check_cost(c: f64) -> Result<()> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidCost(c));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrueExample {
    pub z: Vec<f64>,
    pub y: Label,
}

/// What the learner sees. `manipulated` is simulator-private.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub manipulated: bool,
}

/// Utility of reporting `x` with true features `z`: value minus `c·‖x - z‖`.
pub fn utility(z: &[f64], x: &[f64], deployed: &Hypothesis, c: f64) -> f64 {
    let value = match deployed.classify(x) {
        Label::Positive => 1.0,
        Label::Negative => 0.0,
    };
    let dist = z
        .iter()
        .zip(x)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    value - c * dist
}

/// Writes the best response into `out` and reports whether the agent moved.
///
/// An agent below the threshold moves straight along the normal onto it when
/// the cost `c·(τ - normal·z)` is at most the value 1 of a positive
/// classification. For `τ = 1/c` this is exactly `normal·z ≥ 0`.
fn best_response_into(z: &[f64], deployed: &Hypothesis, c: f64, out: &mut [f64]) -> bool {
    out.copy_from_slice(z);
    let tau = deployed.threshold;
    if tau == f64::INFINITY {
        return false;
    }
    let n = &deployed.normal;
    let s = dot(n, z);
    if s >= tau || s < tau - 1.0 / c {
        return false;
    }
    let mut step = tau - s;
    loop {
        for ((o, zi), ni) in out.iter_mut().zip(z).zip(n) {
            *o = zi + step * ni;
        }
        // rounding must not leave the report a hair below the threshold
        if dot(n, out) >= tau {
            return true;
        }
        step += step.abs() * 4.0 * f64::EPSILON + f64::MIN_POSITIVE;
    }
}

/// Utility-maximizing report of an agent with true features `z`.
pub fn best_response(z: &[f64], deployed: &Hypothesis, c: f64) -> Result<Observation> {
    check_cost(c)?;
    if z.len() != deployed.dim() {
        return Err(Error::PreconditionViolated("dimension mismatch".into()));
    }
    let mut x = vec![0.0; z.len()];
    let manipulated = best_response_into(z, deployed, c, &mut x);
    Ok(Observation { x, manipulated })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    Realizable,
    RandomFlip,
    BoundaryBandFlip,
}

/// A concrete ν-bounded labeling adversary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub nu: f64,
    /// Half-width of the flipped slab `|u·z| ≤ r`; zero unless the kind is
    /// [`NoiseKind::BoundaryBandFlip`].
    pub band_radius: f64,
}

impl NoiseModel {
    pub fn realizable() -> Self {
        Self {
            kind: NoiseKind::Realizable,
            nu: 0.0,
            band_radius: 0.0,
        }
    }

    pub fn new(kind: NoiseKind, nu: f64, d: usize) -> Result<Self> {
        match kind {
            NoiseKind::Realizable if nu != 0.0 => Err(Error::InvalidConfig(format!(
                "realizable noise requires nu = 0, got {nu}"
            ))),
            NoiseKind::Realizable => Ok(Self::realizable()),
            NoiseKind::RandomFlip if !(0.0..=1.0).contains(&nu) => Err(Error::InvalidConfig(
                format!("random-flip nu must lie in [0, 1], got {nu}"),
            )),
            NoiseKind::RandomFlip => Ok(Self {
                kind,
                nu,
                band_radius: 0.0,
            }),
            NoiseKind::BoundaryBandFlip => Ok(Self {
                kind,
                nu,
                band_radius: calibrate_band_radius(nu, d)?,
            }),
        }
    }
}

/// Radius `r` with `P[|u·Z| ≤ r] = ν` for `Z` uniform in the ball.
pub fn calibrate_band_radius(nu: f64, d: usize) -> Result<f64> {
    geometry::check_dimension(d)?;
    if !(0.0..0.5).contains(&nu) {
        return Err(Error::InvalidConfig(format!(
            "boundary-band nu must lie in [0, 0.5), got {nu}"
        )));
    }
    if nu == 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if geometry::ball_projection_mass(-mid, mid, d) < nu {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Label of `z` under the truth `u` and the noise model.
///
/// Exactly one uniform is consumed per call whatever the noise kind, so runs
/// that differ only in their noise see the same feature stream.
pub fn label(z: &[f64], u: &Hypothesis, noise: &NoiseModel, rng: &mut SimRng) -> Label {
    let margin = dot(u.normal(), z);
    let clean = Label::of_margin(margin);
    let coin = rng.uniform();
    let flip = match noise.kind {
        NoiseKind::Realizable => false,
        NoiseKind::RandomFlip => coin < noise.nu,
        NoiseKind::BoundaryBandFlip => margin.abs() <= noise.band_radius,
    };
    if flip {
        clean.flipped()
    } else {
        clean
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentModel {
    /// Agents best-respond to the deployed rule.
    Strategic,
    /// Agents always report `x = z`.
    Truthful,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnvConfig {
    pub d: usize,
    pub u: Hypothesis,
    pub c: f64,
    pub noise: NoiseModel,
    pub agents: AgentModel,
    pub seed: u64,
}

impl EnvConfig {
    pub fn new(
        u: Vec<f64>,
        c: f64,
        noise: NoiseModel,
        agents: AgentModel,
        seed: u64,
    ) -> Result<Self> {
        check_cost(c)?;
        let u = Hypothesis::homogeneous(u)?;
        Ok(Self {
            d: u.dim(),
            u,
            c,
            noise,
            agents,
            seed,
        })
    }

    /// Realizable strategic environment with truth `e1`.
    pub fn realizable(d: usize, c: f64, seed: u64) -> Result<Self> {
        geometry::check_dimension(d)?;
        Self::new(
            geometry::unit_vector(d, 0),
            c,
            NoiseModel::realizable(),
            AgentModel::Strategic,
            seed,
        )
    }

    pub fn with_agents(mut self, agents: AgentModel) -> Self {
        self.agents = agents;
        self
    }

    /// Threshold a learner should deploy against these agents.
    pub fn deploy_threshold(&self) -> f64 {
        match self.agents {
            AgentModel::Strategic => 1.0 / self.c,
            AgentModel::Truthful => 0.0,
        }
    }
}

fn respond(cfg: &EnvConfig, z: &[f64], deployed: &Hypothesis, out: &mut [f64]) -> bool {
    match cfg.agents {
        AgentModel::Strategic => best_response_into(z, deployed, cfg.c, out),
        AgentModel::Truthful => {
            out.copy_from_slice(z);
            false
        }
    }
}

/// One fresh example: `z` uniform in the ball, its label, and the agent's report.
pub fn draw_example(
    cfg: &EnvConfig,
    deployed: &Hypothesis,
    rng: &mut SimRng,
) -> (TrueExample, Observation) {
    let z = geometry::sample_unit_ball(cfg.d, rng);
    let y = label(&z, &cfg.u, &cfg.noise, rng);
    let mut x = vec![0.0; cfg.d];
    let manipulated = respond(cfg, &z, deployed, &mut x);
    (TrueExample { z, y }, Observation { x, manipulated })
}

/// Running totals kept by the simulator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Counters {
    pub draws: u64,
    pub queries: u64,
    /// Queries answered for an observation whose report differs from `z`.
    pub impure_queries: u64,
    pub ledger: MistakeLedger,
    /// `Σ P[deployed disagrees with u]` over draws: the expected disagreement count.
    pub expected_disagreement: f64,
    /// Binomial variance of the disagreement count, `Σ p(1-p)`.
    pub disagreement_variance: f64,
}

impl Counters {
    pub fn since(&self, earlier: &Counters) -> Counters {
        Counters {
            draws: self.draws - earlier.draws,
            queries: self.queries - earlier.queries,
            impure_queries: self.impure_queries - earlier.impure_queries,
            ledger: self.ledger.since(&earlier.ledger),
            expected_disagreement: self.expected_disagreement - earlier.expected_disagreement,
            disagreement_variance: self.disagreement_variance - earlier.disagreement_variance,
        }
    }
}

/// A labeled query as seen by the simulator.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryRecord {
    pub t: u64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub manipulated: bool,
    pub y: Label,
}

struct PendingRow {
    t: u64,
    y: Label,
    manipulated: bool,
    predicted: Option<Label>,
}

pub struct Environment {
    cfg: EnvConfig,
    rng: SimRng,
    z: Vec<f64>,
    x: Vec<f64>,
    y: Label,
    u_label: Label,
    manipulated: bool,
    current: Option<u64>,
    predicted: bool,
    counters: Counters,
    angle_cache: Option<(Vec<f64>, f64, f64)>,
    query_log: Option<Vec<QueryRecord>>,
    trace: Option<Box<dyn Write + Send>>,
    pending: Option<PendingRow>,
}

impl Environment {
    pub fn new(cfg: EnvConfig) -> Self {
        let d = cfg.d;
        let rng = SimRng::stream(cfg.seed, streams::ENVIRONMENT);
        Self {
            cfg,
            rng,
            z: vec![0.0; d],
            x: vec![0.0; d],
            y: Label::Negative,
            u_label: Label::Negative,
            manipulated: false,
            current: None,
            predicted: false,
            counters: Counters::default(),
            angle_cache: None,
            query_log: None,
            trace: None,
            pending: None,
        }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.d
    }

    pub fn truth(&self) -> &Hypothesis {
        &self.cfg.u
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    /// Angle between `v` and the ground truth (diagnostic).
    pub fn angle_to_truth(&self, v: &[f64]) -> f64 {
        geometry::angle(v, self.cfg.u.normal()).unwrap_or(f64::NAN)
    }

    pub fn record_queries(&mut self) {
        self.query_log.get_or_insert_with(Vec::new);
    }

    pub fn take_query_log(&mut self) -> Vec<QueryRecord> {
        self.query_log.take().unwrap_or_default()
    }

    /// Stream one CSV row per draw (`t, z.., x.., y, manipulated, predicted`).
    pub fn trace_to(&mut self, mut out: Box<dyn Write + Send>) -> Result<()> {
        let d = self.cfg.d;
        let mut header = String::from("t");
        (0..d).for_each(|i| header.push_str(&format!(",z{i}")));
        (0..d).for_each(|i| header.push_str(&format!(",x{i}")));
        header.push_str(",y,manipulated,predicted\n");
        out.write_all(header.as_bytes())?;
        self.trace = Some(out);
        Ok(())
    }

    /// Flush the last pending trace row and release the writer.
    pub fn finish_trace(&mut self) -> Result<()> {
        self.flush_row()?;
        if let Some(mut w) = self.trace.take() {
            w.flush()?;
        }
        Ok(())
    }

    fn flush_row(&mut self) -> Result<()> {
        let (Some(row), Some(w)) = (self.pending.take(), self.trace.as_mut()) else {
            return Ok(());
        };
        let mut line = row.t.to_string();
        for v in self.z.iter().chain(&self.x) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        let predicted = row
            .predicted
            .map(|p| p.as_i8().to_string())
            .unwrap_or_default();
        line.push_str(&format!(
            ",{},{},{}\n",
            row.y.as_i8(),
            row.manipulated,
            predicted
        ));
        w.write_all(line.as_bytes())?;
        Ok(())
    }

    fn disagreement_probability(&mut self, deployed: &Hypothesis) -> f64 {
        if deployed.is_constant_negative() {
            return 0.5;
        }
        if let Some((v, p, _)) = &self.angle_cache {
            if v.as_slice() == deployed.normal() {
                return *p;
            }
        }
        let p = self.angle_to_truth(deployed.normal()) / PI;
        self.angle_cache = Some((deployed.normal().to_vec(), p, p * (1.0 - p)));
        p
    }

    /// Draw a fresh agent, let it respond to `deployed` and return its report.
    pub fn observe(&mut self, deployed: &Hypothesis) -> Result<&[f64]> {
        if deployed.dim() != self.cfg.d {
            return Err(Error::PreconditionViolated("dimension mismatch".into()));
        }
        if self.trace.is_some() {
            self.flush_row()?;
        }
        geometry::sample_unit_ball_into(&mut self.z, &mut self.rng);
        self.y = label(&self.z, &self.cfg.u, &self.cfg.noise, &mut self.rng);
        self.u_label = Label::of_margin(dot(self.cfg.u.normal(), &self.z));
        self.manipulated = respond(&self.cfg, &self.z, deployed, &mut self.x);
        let t = self.counters.draws;
        self.counters.draws += 1;
        self.current = Some(t);
        self.predicted = false;
        let p = self.disagreement_probability(deployed);
        self.counters.expected_disagreement += p;
        self.counters.disagreement_variance += p * (1.0 - p);
        if self.trace.is_some() {
            self.pending = Some(PendingRow {
                t,
                y: self.y,
                manipulated: self.manipulated,
                predicted: None,
            });
        }
        Ok(&self.x)
    }

    /// Score the learner's prediction on the current observation. Only the
    /// first prediction per observation counts.
    pub fn report_prediction(&mut self, predicted: Label) {
        if self.current.is_none() || self.predicted {
            return;
        }
        self.predicted = true;
        self.counters.ledger.record(predicted, self.y, self.u_label);
        if let Some(row) = self.pending.as_mut() {
            row.predicted = Some(predicted);
        }
    }

    /// Ask the oracle for the label of the current observation.
    pub fn query_label(&mut self) -> Result<Label> {
        let Some(t) = self.current else {
            return Err(Error::PreconditionViolated(
                "no observation to label".into(),
            ));
        };
        self.counters.queries += 1;
        let pure = !self.manipulated && self.x == self.z;
        if !pure {
            self.counters.impure_queries += 1;
        }
        if let Some(log) = self.query_log.as_mut() {
            log.push(QueryRecord {
                t,
                x: self.x.clone(),
                z: self.z.clone(),
                manipulated: self.manipulated,
                y: self.y,
            });
        }
        Ok(self.y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;

    fn rand_unit(d: usize, rng: &mut SimRng) -> Vec<f64> {
        geometry::sample_unit_sphere(d, rng)
    }

    #[test]
    fn manipulating_agent_lands_on_threshold() {
        let h = Hypothesis::deployed(vec![1.0, 0.0], 2.0).unwrap();
        let obs = best_response(&[0.3, 0.4], &h, 2.0).unwrap();
        assert!(obs.manipulated);
        assert!((obs.x[0] - 0.5).abs() < 1e-15 && obs.x[1] == 0.4);
        assert_eq!(h.classify(&obs.x), Label::Positive);
        assert!((utility(&[0.3, 0.4], &obs.x, &h, 2.0) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn negative_side_agent_stays() {
        let h = Hypothesis::deployed(vec![1.0, 0.0], 2.0).unwrap();
        let z = [-0.1, 0.2];
        let obs = best_response(&z, &h, 2.0).unwrap();
        assert!(!obs.manipulated);
        assert_eq!(obs.x, z);
        assert_eq!(h.classify(&obs.x), Label::Negative);
    }

    #[test]
    fn far_positive_agent_stays_and_invalid_cost_rejected() {
        let h = Hypothesis::deployed(vec![0.0, 1.0], 4.0).unwrap();
        let obs = best_response(&[0.0, 0.5], &h, 4.0).unwrap();
        assert!(!obs.manipulated);
        assert!(matches!(
            best_response(&[0.0, 0.5], &h, 0.0),
            Err(Error::InvalidCost(_))
        ));
        assert!(matches!(
            best_response(&[0.0, 0.5], &h, -1.0),
            Err(Error::InvalidCost(_))
        ));
    }

    #[test]
    fn agent_exactly_on_homogeneous_boundary_moves() {
        let h = Hypothesis::deployed(vec![1.0, 0.0], 3.0).unwrap();
        let obs = best_response(&[0.0, 0.7], &h, 3.0).unwrap();
        assert!(obs.manipulated);
        assert_eq!(h.classify(&obs.x), Label::Positive);
    }

    #[test]
    fn best_response_beats_brute_force_grid() {
        // oracle: score every point of a grid inside the affordable ball
        let mut rng = SimRng::new(11);
        for _ in 0..60 {
            let d = 2 + (rng.next_u64() % 2) as usize;
            let c = 1.1 + 3.9 * rng.uniform();
            let v = rand_unit(d, &mut rng);
            let h = Hypothesis::deployed(v, c).unwrap();
            let z = geometry::sample_unit_ball(d, &mut rng);
            let obs = best_response(&z, &h, c).unwrap();
            let best = utility(&z, &obs.x, &h, c);
            let r = 1.0 / c;
            let steps = if d == 2 { 60 } else { 16 };
            let mut idx = vec![0usize; d];
            loop {
                let cand: Vec<f64> = (0..d)
                    .map(|i| z[i] - r + 2.0 * r * idx[i] as f64 / (steps - 1) as f64)
                    .collect();
                assert!(utility(&z, &cand, &h, c) <= best + 1e-9);
                let mut i = 0;
                while i < d {
                    idx[i] += 1;
                    if idx[i] < steps {
                        break;
                    }
                    idx[i] = 0;
                    i += 1;
                }
                if i == d {
                    break;
                }
            }
        }
    }

    #[test]
    fn strategic_rule_matches_homogeneous_rule() {
        let mut rng = SimRng::new(12);
        for _ in 0..20_000 {
            let d = 2 + (rng.next_u64() % 6) as usize;
            let c = 0.5 + 5.0 * rng.uniform();
            let v = rand_unit(d, &mut rng);
            let z = geometry::sample_unit_ball(d, &mut rng);
            let h = Hypothesis::deployed(v.clone(), c).unwrap();
            let obs = best_response(&z, &h, c).unwrap();
            assert_eq!(h.classify(&obs.x), Label::of_margin(dot(&v, &z)));
            if obs.manipulated {
                assert!((dot(&v, &obs.x) - 1.0 / c).abs() < 1e-12);
                let t = dot(&v, &obs.x) - dot(&v, &z);
                assert!(t >= 0.0);
                for i in 0..d {
                    assert!((obs.x[i] - z[i] - t * v[i]).abs() < 1e-12);
                }
            } else {
                assert_eq!(obs.x, z);
            }
        }
    }

    #[test]
    fn realizable_labels() {
        let cfg = EnvConfig::realizable(2, 2.0, 0).unwrap();
        let mut rng = SimRng::new(1);
        assert_eq!(
            label(&[0.2, 0.1], &cfg.u, &cfg.noise, &mut rng),
            Label::Positive
        );
        assert_eq!(
            label(&[0.0, 0.1], &cfg.u, &cfg.noise, &mut rng),
            Label::Positive
        );
        assert_eq!(
            label(&[-0.2, 0.1], &cfg.u, &cfg.noise, &mut rng),
            Label::Negative
        );
    }

    #[test]
    fn zero_rate_flips_match_realizable() {
        let u = Hypothesis::homogeneous(geometry::unit_vector(3, 0)).unwrap();
        let clean = NoiseModel::realizable();
        let flips = NoiseModel::new(NoiseKind::RandomFlip, 0.0, 3).unwrap();
        let mut zr = SimRng::new(4);
        let (mut r1, mut r2) = (SimRng::new(5), SimRng::new(5));
        for _ in 0..10_000 {
            let z = geometry::sample_unit_ball(3, &mut zr);
            assert_eq!(
                label(&z, &u, &clean, &mut r1),
                label(&z, &u, &flips, &mut r2)
            );
        }
    }

    #[test]
    fn random_flip_rate() {
        let d = 4;
        let u = Hypothesis::homogeneous(geometry::unit_vector(d, 0)).unwrap();
        let noise = NoiseModel::new(NoiseKind::RandomFlip, 0.1, d).unwrap();
        let mut rng = SimRng::new(6);
        let n = 100_000u64;
        let flips = (0..n)
            .filter(|_| {
                let z = geometry::sample_unit_ball(d, &mut rng);
                label(&z, &u, &noise, &mut rng) != Label::of_margin(z[0])
            })
            .count() as f64;
        assert!(stats::within_binomial(flips / n as f64, 0.1, n, 3.0));
    }

    #[test]
    fn band_radius_calibration() {
        assert_eq!(calibrate_band_radius(0.0, 3).unwrap(), 0.0);
        let mut prev = 0.0;
        for nu in [0.01, 0.05, 0.1, 0.2, 0.4] {
            let r = calibrate_band_radius(nu, 5).unwrap();
            assert!(r > prev);
            assert!((geometry::ball_projection_mass(-r, r, 5) - nu).abs() < 1e-6);
            prev = r;
        }
        assert!(calibrate_band_radius(0.5, 3).is_err());
        assert!(matches!(
            NoiseModel::new(NoiseKind::Realizable, 0.1, 3),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn band_radius_monte_carlo_mass() {
        let d = 3;
        let r = calibrate_band_radius(0.05, d).unwrap();
        // for d = 3 the ball projection has density 3(1 - t²)/4
        assert!(((3.0 * r - r.powi(3)) / 2.0 - 0.05).abs() < 1e-9);
        let mut rng = SimRng::new(7);
        let n = 1_000_000u64;
        let hits = (0..n)
            .filter(|_| geometry::sample_unit_ball(d, &mut rng)[0].abs() <= r)
            .count() as f64;
        assert!(stats::within_binomial(hits / n as f64, 0.05, n, 3.0));
    }

    #[test]
    fn noise_budget_holds_for_both_adversaries() {
        let d = 5;
        let n = 100_000u64;
        for (kind, nu) in [
            (NoiseKind::RandomFlip, 0.05),
            (NoiseKind::BoundaryBandFlip, 0.05),
        ] {
            let noise = NoiseModel::new(kind, nu, d).unwrap();
            let cfg = EnvConfig::new(
                geometry::unit_vector(d, 1),
                2.0,
                noise,
                AgentModel::Strategic,
                8,
            )
            .unwrap();
            let mut rng = SimRng::new(9);
            let h = Hypothesis::deployed(geometry::unit_vector(d, 0), 2.0).unwrap();
            let bad = (0..n)
                .filter(|_| {
                    let (ex, _) = draw_example(&cfg, &h, &mut rng);
                    ex.y != Label::of_margin(dot(cfg.u.normal(), &ex.z))
                })
                .count() as f64;
            let rate = bad / n as f64;
            assert!(
                rate <= nu + 3.0 * stats::binomial_se(nu, n),
                "{kind:?}: {rate}"
            );
        }
    }

    #[test]
    fn constant_negative_rule_freezes_agents() {
        let cfg = EnvConfig::realizable(3, 0.5, 1).unwrap();
        let h = Hypothesis::constant_negative(3);
        let mut rng = SimRng::new(10);
        for _ in 0..5000 {
            let (ex, obs) = draw_example(&cfg, &h, &mut rng);
            assert!(!obs.manipulated);
            assert_eq!(obs.x, ex.z);
        }
    }

    #[test]
    fn draws_respect_manipulation_invariants() {
        let mut rng = SimRng::new(13);
        let d = 4;
        let c = 1.7;
        let cfg = EnvConfig::realizable(d, c, 2).unwrap();
        let h = Hypothesis::deployed(rand_unit(d, &mut rng), c).unwrap();
        let mut manipulated = 0;
        for _ in 0..20_000 {
            let (ex, obs) = draw_example(&cfg, &h, &mut rng);
            if h.classify(&obs.x) == Label::Negative {
                assert!(!obs.manipulated);
                assert!(obs
                    .x
                    .iter()
                    .zip(&ex.z)
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
            }
            if obs.manipulated {
                manipulated += 1;
                assert!((dot(h.normal(), &obs.x) - 1.0 / c).abs() < 1e-12);
            }
        }
        assert!(manipulated > 0);
    }

    #[test]
    fn negatives_in_band_are_uniform_ball_draws() {
        // strategic negatives in the band vs direct ball draws under the same event
        let d = 5;
        let c = 2.0;
        let b = 0.3;
        let mut rng = SimRng::new(14);
        let v = rand_unit(d, &mut rng);
        let probe = rand_unit(d, &mut rng);
        let h = Hypothesis::deployed(v.clone(), c).unwrap();
        let mut env = Environment::new(EnvConfig::realizable(d, c, 15).unwrap());
        let in_band = |x: &[f64]| {
            let s = dot(&v, x) / norm(x);
            (-b..=-0.5 * b).contains(&s)
        };
        let (mut a_norm, mut a_proj) = (Vec::new(), Vec::new());
        while a_norm.len() < 10_000 {
            let x = env.observe(&h).unwrap().to_vec();
            if h.classify(&x) == Label::Negative && in_band(&x) {
                a_norm.push(norm(&x));
                a_proj.push(dot(&probe, &x));
            }
        }
        let (mut b_norm, mut b_proj) = (Vec::new(), Vec::new());
        let mut rng2 = SimRng::new(16);
        while b_norm.len() < 10_000 {
            let z = geometry::sample_unit_ball(d, &mut rng2);
            if in_band(&z) {
                b_norm.push(norm(&z));
                b_proj.push(dot(&probe, &z));
            }
        }
        assert!(stats::ks_two_sample(&a_norm, &b_norm).passes(stats::SIGNIFICANCE));
        assert!(stats::ks_two_sample(&a_proj, &b_proj).passes(stats::SIGNIFICANCE));
    }

    #[test]
    fn environment_counts_and_purity() {
        let d = 3;
        let c = 2.0;
        let mut env = Environment::new(EnvConfig::realizable(d, c, 21).unwrap());
        env.record_queries();
        let h = Hypothesis::deployed(geometry::unit_vector(d, 1), c).unwrap();
        assert!(env.query_label().is_err());
        for _ in 0..1000 {
            let x = env.observe(&h).unwrap().to_vec();
            let p = h.classify(&x);
            env.report_prediction(p);
            env.report_prediction(p.flipped());
            if p == Label::Negative {
                env.query_label().unwrap();
            }
        }
        let k = env.counters();
        assert_eq!(k.draws, 1000);
        assert_eq!(k.ledger.predictions, 1000);
        assert_eq!(k.impure_queries, 0);
        let log = env.take_query_log();
        assert_eq!(log.len() as u64, k.queries);
        assert!(log.iter().all(|q| !q.manipulated && q.x == q.z));
        // deployed e2 against truth e1: disagreement probability 1/2 per draw
        assert!((k.expected_disagreement - 500.0).abs() < 1e-9);
    }

    #[test]
    fn trace_rows() {
        use std::sync::{Arc, Mutex};
        #[derive(Clone, Default)]
        struct Sink(Arc<Mutex<Vec<u8>>>);
        impl Write for Sink {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(buf);
                Ok(buf.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let sink = Sink::default();
        let mut env = Environment::new(EnvConfig::realizable(2, 2.0, 3).unwrap());
        env.trace_to(Box::new(sink.clone())).unwrap();
        let h = Hypothesis::deployed(vec![1.0, 0.0], 2.0).unwrap();
        for i in 0..5 {
            let x = env.observe(&h).unwrap().to_vec();
            if i % 2 == 0 {
                env.report_prediction(h.classify(&x));
            }
        }
        env.finish_trace().unwrap();
        let text = String::from_utf8(sink.0.lock().unwrap().clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,z0,z1,x0,x1,y,manipulated,predicted");
        assert_eq!(lines.len(), 6);
        assert!(lines[2].ends_with(','));
        assert_eq!(lines[1].split(',').count(), 8);
    }
}
