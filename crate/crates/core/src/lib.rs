//! Pareto-efficient and fair power allocation for transactive distribution grids.
//!
//! The crate has three layers:
//!
//! * [`vecopt`], [`mgda`]: constrained vector optimization — feasible regions,
//!   Pareto tests, Fritz-John residuals, min-norm multi-gradient directions and
//!   the constrained ascent loop ([`mgda::run_alma`]).
//! * [`fairness`], [`market`], [`grid`]: the application pieces — Jain's index,
//!   prosumer agents with per-aggregator auctions, and linearized feeder
//!   constraints on a radial network.
//! * [`dso`], [`scenario`]: the bilevel driver that alternates auctions with
//!   ascent steps, plus seeded scenario generation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dso;
pub mod error;
pub mod fairness;
pub mod grid;
pub mod market;
pub mod mgda;
pub mod scenario;
pub mod vecopt;

pub use dso::{run_bilevel, BilevelOutcome, Mode};
pub use error::{Error, Result};
pub use mgda::{Status, ToleranceSet};
pub use scenario::{Instance, Scenario, SolverSettings};
pub use vecopt::LinearFeasibleRegion;
