//! Kernel-based online outcome-indistinguishable prediction and
//! omniprediction.
//!
//! The crate provides:
//!
//! - a kernel catalog over (features, prediction) pairs with sum / product /
//!   scale / compose combinators ([`kernel`]),
//! - link-prediction kernels over evolving graphs ([`graph`]),
//! - sequential predictors with per-round forecast hedging for binary,
//!   quantile, and vector-valued outcomes ([`online`]),
//! - loss post-processing and the kernel builders that turn the binary
//!   predictor into an omnipredictor ([`omni`]),
//! - outcome-indistinguishability metrics, kernel calibration error, and
//!   adversarial / performative outcome simulators ([`eval`], [`sim`]),
//! - offline utilities: learning over an RKHS ball and online-to-batch
//!   conversion ([`batch`]).

pub mod batch;
pub mod dist;
pub mod error;
pub mod eval;
pub mod graph;
pub mod kernel;
pub mod omni;
pub mod online;
pub mod sim;
pub mod transcript;

pub use dist::{PredictionDistribution, VectorPrediction};
pub use error::{Error, Result};
pub use kernel::{GramMatrix, Kernel, Point};
pub use transcript::{BinaryTranscript, QuantileTranscript, VectorTranscript};
