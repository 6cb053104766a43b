//! Sequential predictors with per-round forecast hedging.
//!
//! Each predictor is a strictly sequential state machine: round `t` depends
//! on rounds `1..t-1`. Instances are independent, so a harness can run
//! replications in parallel; rounds are never parallelized.

pub mod binary;
pub mod quantile;
pub mod vector;

pub use binary::{BinaryPredictor, Forecast};
pub use quantile::{QuantileConfig, QuantilePredictor};
pub use vector::{MatrixKernel, OutcomeBox, VectorPredictor, VPoint};

/// Hedging schedule: epsilon_t = 1 / (10 t^3 B_t).
pub(crate) fn epsilon(t: usize, b_max: f64) -> f64 {
    let t = t as f64;
    1.0 / (10.0 * t * t * t * b_max.max(1e-300))
}
