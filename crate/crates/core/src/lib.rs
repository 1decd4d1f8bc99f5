//! Per-position multi-label forecasting over longitudinal coded event
//! streams.
//!
//! The crate trains a causal-masked transformer that predicts, at every
//! input position, the same fixed set of forecast-interval outcomes for a
//! person, alongside a bidirectional single-output reference variant and a
//! count-vector logistic-regression baseline. It also ships a synthetic
//! cohort simulator with planted hazard structure, multi-label ranking
//! metrics with bootstrap uncertainty, and trajectory analysis built on the
//! model's contextual embeddings (age-pooled similarity, neighborhood
//! change rates, sigmoid-jump attribution).
//!
//! All numeric code is generic over [`Scalar`]; production paths run in
//! [`TrainFloat`] and verification paths in [`VerifyFloat`].

pub mod cohort;
pub mod labels;
pub mod logreg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod trajectory;

pub use scalar::Scalar;

/// Precision used for training, inference and checkpoints.
pub type TrainFloat = f32;

/// Precision used for gradient verification and numerical oracles.
pub type VerifyFloat = f64;
