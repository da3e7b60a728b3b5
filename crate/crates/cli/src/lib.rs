//! Library half of the `policyforge` command-line harness.
//!
//! The binary is a thin argument parser over three modules:
//!
//! * [`io`] — CSV/JSON readers and writers for datasets, score sets, learned
//!   policies, advantage tables, and simulation reports. All floating-point
//!   output uses full-precision scientific notation so results round-trip
//!   exactly and repeated runs are byte-identical.
//! * [`config`] — TOML run configuration: the simulation grid, estimator
//!   settings, and their defaults.
//! * [`harness`] — the simulation driver: per-repetition data generation,
//!   score estimation, policy fitting, and evaluation, with crash isolation
//!   so one failed repetition never aborts a study.

pub mod config;
pub mod harness;
pub mod io;
