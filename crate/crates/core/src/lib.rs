//! Privacy accounting and voting simulation for teacher ensembles with
//! per-data-point privacy budgets.
//!
//! The crate models an ensemble of teachers answering label queries through a
//! noisy-argmax release with an optional consensus gate. Every data point
//! carries its own (ε, δ) budget; three ensemble modifications (duplicating
//! teachers, letting teachers participate intermittently, and weighting
//! votes) translate heterogeneous budgets into per-group sensitivities whose
//! Rényi-DP costs are tracked exactly, query by query, until each budget is
//! exhausted.

pub mod aggregators;
pub mod engine;
pub mod erf;
pub mod error;
pub mod history;
pub mod planner;
pub mod rdp;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
