//! Demand-response experimentation toolkit: a consumer/tariff market
//! simulator, quantile load forecasters with tariff-aware branches, greedy
//! tariff allocation and the experiment harness that drives them.

pub mod allocator;
pub mod error;
pub mod forecaster;
pub mod harness;
pub mod market;

pub use error::{Error, Result};

/// Formats a float with 17 significant digits, which parses back to the
/// identical value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
