//! Representation quality measurements: probe-based leakage scores,
//! similarity and disentanglement of latents, concept-layer calibration, and
//! exact information oracles for validating the variational bounds.

pub mod calibration;
pub mod cka;
pub mod disentangle;
pub mod info;
pub mod probe;
pub mod urr;

pub use calibration::{
    calibration_report, class_probabilities, dense_grid, CalibrationPoint, CalibrationReport,
};
pub use cka::cka;
pub use disentangle::{
    concept_probe_targets, disentanglement, ConceptLabels, DisentanglementReport,
};
pub use info::{
    conditional_upper_bound_check, discrete_mi_oracle, spearman, variational_lower_bound_check,
    BoundCheck, MiReport,
};
pub use probe::{empirical_entropy, fit_eval_probe, ProbeConfig, ProbeOutcome};
pub use urr::{concept_feature_matrix, nuisance_labels, urr};
