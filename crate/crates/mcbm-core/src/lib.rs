//! Concept bottleneck models with a variational information bottleneck.
//!
//! Everything runs on f64 CPU tensors with a per-batch gradient tape, sized
//! for synthetic datasets where exact oracles (enumeration, finite
//! differences, Monte Carlo) can verify every moving part. The crate covers
//! the full pipeline: synthetic data with ground-truth factors, four model
//! variants (vanilla, concept bottleneck, hard concept bottleneck, and the
//! minimal variant with per-concept representation priors), deterministic
//! training, concept interventions, and leakage / interpretability /
//! calibration metrics.

pub mod datagen;
pub mod diff;
pub mod error;
pub mod interventions;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
