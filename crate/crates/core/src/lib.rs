//! Deterministic federated-learning simulator for benchmarking backdoor
//! attacks and robust-aggregation defenses.
//!
//! The crate is organized bottom-up:
//!
//! - [`params`] — flat parameter vectors, compensated summation, and the
//!   seeded random-stream derivation that all stochastic steps draw from.
//! - [`data`] — dataset loading (IDX image files, synthetic generators),
//!   Dirichlet/uniform client partitioning, and trigger injection.
//! - [`model`] — the MLP: exact gradients, local SGD with pluggable hooks,
//!   evaluation, and checkpoint IO.
//! - [`attacks`] — backdoor strategies built on the training hooks.
//! - [`defenses`] — robust aggregators and anomaly detection.
//! - [`engine`] — the federated round loop, client scheduling, the worker
//!   pool, and run outputs.
//! - [`metrics`] — attack/defense effectiveness summaries.
//! - [`config`] — the TOML experiment configuration and overrides.

pub mod attacks;
pub mod config;
pub mod data;
pub mod defenses;
pub mod engine;
pub mod metrics;
pub mod model;
pub mod params;
