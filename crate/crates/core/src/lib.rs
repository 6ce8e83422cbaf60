//! Active, noise-tolerant Perceptron learning against strategic agents.
//!
//! Agents with true features `z` uniform in the unit ball report a vector `x`
//! that best responds to the deployed rule `v·x ≥ 1/c`. The learner only ever
//! labels points it classifies negative, which agents never manipulate, and
//! spends its labels in a shrinking band next to its current boundary.
//!
//! * [`geometry`]: vector primitives, ball and sphere sampling, projection marginals
//! * [`environment`]: best response, ν-bounded label noise, the example stream
//! * [`learner`]: epoch schedules, inner and outer loops, initialization
//! * [`baselines`]: passive strategic and non-strategic active comparators
//! * [`evaluation`]: excess error, Monte Carlo error, mistake ledger, scaling fits
//! * [`experiment`]: configuration, runs, sweeps and artifacts
//! * [`verify`]: property suites shared by the CLI and the acceptance tests

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
mod chart;
pub mod environment;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod experiment;
pub mod geometry;
pub mod learner;
pub mod rng;
pub mod stats;
pub mod trace;
pub mod verify;

pub use error::{Error, Result};
pub use exec::Exec;
pub use rng::SimRng;
