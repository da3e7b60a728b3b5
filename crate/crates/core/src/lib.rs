//! Doubly robust policy learning for settings where treatment effects are
//! small, heterogeneous, and possibly harmful.
//!
//! The crate provides the full estimation pipeline used by the `policyforge`
//! command-line harness:
//!
//! * [`dgp`] — synthetic data generators with known propensities and known
//!   unit-level treatment effects, used for benchmarking.
//! * [`forest`] — regression forests, honest causal forests, and a
//!   cross-fitted variant that never scores a unit with a model trained on it.
//! * [`drlearner`] — augmented inverse-propensity (doubly robust) scores and a
//!   nested cross-fitting learner that turns them into effect predictions.
//! * [`bart`] — Bayesian additive regression trees (probit and Gaussian) as an
//!   alternative score engine.
//! * [`policy`] — exhaustive depth-limited policy tree search over doubly
//!   robust rewards, plug-in rules, and policy value estimators.
//! * [`metrics`] — the evaluation protocol: oracle comparisons, error metrics
//!   across repetitions, and report assembly.
//! * [`blp`] — best linear projections of scores onto covariates with
//!   heteroskedasticity-robust standard errors.
//! * [`rng`] — deterministic, hierarchically derived random streams so that
//!   every result is reproducible from a single root seed.
//! * [`data`] — the dataset container, fold assignment, and score-sign
//!   conventions shared by all estimators.
//!
//! Everything is deterministic given a root seed: parallelism never changes
//! results, and re-running any pipeline reproduces byte-identical output.

pub mod bart;
pub mod blp;
pub mod data;
pub mod dgp;
pub mod drlearner;
pub mod error;
pub mod forest;
pub mod metrics;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
