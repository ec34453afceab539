//! Synthetic data: the factor generative process, the four-arm spiral, and
//! bimodal latent priors, plus splitting and CSV persistence.

pub mod dataset;
pub mod factor;
pub mod mixture;
pub mod spiral;

pub use dataset::{
    read_csv, split, write_csv, Dataset, DatasetSidecar, FactorColumn, FactorValues, SplitTag,
};
pub use factor::{
    continuous_bin, embed_factor, make_factor_dataset, mixed_radix, FactorKind, FactorRole,
    FactorSpec, GenerativeConfig, LabelTable,
};
pub use mixture::{make_bimodal_prior, TwoGaussianMixture};
pub use spiral::{arm_point, make_spiral_dataset};
