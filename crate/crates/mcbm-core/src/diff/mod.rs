//! Reverse-mode differentiation core: tensors, the tape, parameters,
//! optimizers, finite-difference checking, and checkpoint IO.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::grad_check;
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState, StepScheduler};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use tape::{kl_diag_gaussians, log_sum_exp, sigmoid, softmax_in_place, Tape, Var};
pub use tensor::Tensor;
