//! Model construction and per-variant loss assembly.

mod bundle;
mod mlp;
mod spec;

pub use bundle::{
    argmax_row, binarize_probs, build_model, concat_cols, representation_target, sigmoid_all,
    softmax_rows, target_rows, Batch, BuildOptions, ConceptHead, LossComponents, LossMode,
    ModelBundle, ModelDescriptor, Predictions, Variant,
};
pub use mlp::Mlp;
pub use spec::{expand_one_vs_rest, ConceptSpec, LatentBlock, LatentLayout};
