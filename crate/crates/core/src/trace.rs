//! Per-epoch accounting of a learning run and its CSV form.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::environment::{Counters, Label};

/// Exact CSV header of the per-epoch export.
pub const CSV_HEADER: &str =
    "run_id,learner,k,theta_before,theta_after,m_k,b_k,labels_k,draws_k,mistakes_k,updates_k";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerKind {
    ActiveStrategic,
    PassiveStrategic,
    NonstrategicActive,
}

impl LearnerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LearnerKind::ActiveStrategic => "active-strategic",
            LearnerKind::PassiveStrategic => "passive-strategic",
            LearnerKind::NonstrategicActive => "nonstrategic-active",
        }
    }
}

impl std::fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochRecord {
    pub k: usize,
    pub theta_before: f64,
    pub theta_after: f64,
    pub m_k: u64,
    pub b_k: f64,
    pub labels_k: u64,
    pub draws_k: u64,
    /// Predictions that disagree with the revealed label `y`.
    pub mistakes_k: u64,
    pub updates_k: u64,
    /// Mistakes minus the mistakes `u` makes on the same draws.
    pub additional_k: i64,
    pub disagreements_k: u64,
    pub expected_disagreement_k: f64,
    pub impure_queries_k: u64,
}

impl EpochRecord {
    pub(crate) fn from_counters(k: usize, delta: &Counters) -> Self {
        Self {
            k,
            labels_k: delta.queries,
            draws_k: delta.draws,
            mistakes_k: delta.ledger.alg_mistakes,
            additional_k: delta.ledger.additional(),
            disagreements_k: delta.ledger.disagreements_with_u,
            expected_disagreement_k: delta.expected_disagreement,
            impure_queries_k: delta.impure_queries,
            ..Default::default()
        }
    }
}

/// One label-query round of an inner loop, kept only when requested.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRecord {
    pub epoch: usize,
    pub x_hat: Vec<f64>,
    pub margin_before: f64,
    pub margin_after: f64,
    pub label: Label,
    pub updated: bool,
    pub norm_after: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Totals {
    pub labels: u64,
    pub draws: u64,
    pub mistakes: u64,
    pub u_mistakes: u64,
    pub additional_mistakes: i64,
    pub disagreements_with_u: u64,
    pub updates: u64,
    pub impure_queries: u64,
    pub expected_disagreement: f64,
    pub disagreement_variance: f64,
}

impl Totals {
    pub(crate) fn from_counters(delta: &Counters, updates: u64) -> Self {
        Self {
            labels: delta.queries,
            draws: delta.draws,
            mistakes: delta.ledger.alg_mistakes,
            u_mistakes: delta.ledger.u_mistakes,
            additional_mistakes: delta.ledger.additional(),
            disagreements_with_u: delta.ledger.disagreements_with_u,
            updates,
            impure_queries: delta.impure_queries,
            expected_disagreement: delta.expected_disagreement,
            disagreement_variance: delta.disagreement_variance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunTrace {
    pub learner: LearnerKind,
    pub d: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub epochs: Vec<EpochRecord>,
    pub totals: Totals,
    #[serde(skip)]
    pub rounds: Vec<RoundRecord>,
    /// Not serialized: artifacts must be reproducible byte for byte.
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl RunTrace {
    pub fn new(learner: LearnerKind, d: usize, epsilon: f64, delta: f64) -> Self {
        Self {
            learner,
            d,
            epsilon,
            delta,
            epochs: Vec::new(),
            totals: Totals::default(),
            rounds: Vec::new(),
            wall_clock: Duration::ZERO,
        }
    }

    pub fn final_angle(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.theta_after)
    }

    /// Per-epoch rows, without header.
    pub fn csv_rows(&self, run_id: &str) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "{run_id},{},{},{},{},{},{},{},{},{},{}\n",
                self.learner,
                e.k,
                e.theta_before,
                e.theta_after,
                e.m_k,
                e.b_k,
                e.labels_k,
                e.draws_k,
                e.mistakes_k,
                e.updates_k
            ));
        }
        out
    }

    /// Sum of per-epoch label, draw, mistake and update counts.
    pub fn epoch_sums(&self) -> (u64, u64, u64, u64) {
        self.epochs.iter().fold((0, 0, 0, 0), |acc, e| {
            (
                acc.0 + e.labels_k,
                acc.1 + e.draws_k,
                acc.2 + e.mistakes_k,
                acc.3 + e.updates_k,
            )
        })
    }
}
