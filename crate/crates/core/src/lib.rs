//! Hierarchical time-series forecasting toolkit.
//!
//! Builds base forecasts with local and pooled (per-hierarchy and global)
//! models, reconciles them into coherent forecasts, and scores them with
//! MASE aggregates and rank-based multiple comparisons.

// Comparisons such as `!(x >= 0.0)` are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod data;
pub mod evaluation;
pub mod forecast;
pub mod forecasters;
pub mod hierarchy;
pub mod matrix;
pub mod reconciliation;
pub mod runner;
pub mod scope;
pub mod synth;

pub use error::{Error, Result};
