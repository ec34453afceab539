//! Concept specifications and the latent block layout.

use serde::{Deserialize, Serialize};

use crate::datagen::FactorKind;
use crate::error::{Error, Result};

/// A concept as the model sees it. `kind` fixes the width of its latent
/// block: 1 for binary and continuous, k for a k-class concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub kind: FactorKind,
}

impl ConceptSpec {
    pub fn new(name: &str, kind: FactorKind) -> ConceptSpec {
        ConceptSpec {
            name: name.to_string(),
            kind,
        }
    }

    pub fn block_dim(&self) -> usize {
        match self.kind {
            FactorKind::Binary | FactorKind::Continuous => 1,
            FactorKind::Multiclass(k) => k,
        }
    }
}

/// Replaces every k-class concept with k binary one-vs-rest concepts; binary
/// and continuous concepts pass through. Returns the expanded specs plus, for
/// each, (source index, Some(class) when it is a one-vs-rest slice).
pub fn expand_one_vs_rest(specs: &[ConceptSpec]) -> (Vec<ConceptSpec>, Vec<(usize, Option<usize>)>) {
    let mut out = Vec::new();
    let mut sources = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        match spec.kind {
            FactorKind::Multiclass(k) => {
                for class in 0..k {
                    out.push(ConceptSpec::new(
                        &format!("{}_is{}", spec.name, class),
                        FactorKind::Binary,
                    ));
                    sources.push((i, Some(class)));
                }
            }
            _ => {
                out.push(spec.clone());
                sources.push((i, None));
            }
        }
    }
    (out, sources)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentBlock {
    pub concept_index: usize,
    pub offset: usize,
    pub block_dim: usize,
}

/// Partition of the latent vector into contiguous per-concept blocks. A
/// vanilla model has no blocks, only a width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentLayout {
    pub blocks: Vec<LatentBlock>,
    pub total_dim: usize,
}

impl LatentLayout {
    pub fn from_specs(specs: &[ConceptSpec]) -> LatentLayout {
        let mut blocks = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for (i, spec) in specs.iter().enumerate() {
            let dim = spec.block_dim();
            blocks.push(LatentBlock {
                concept_index: i,
                offset,
                block_dim: dim,
            });
            offset += dim;
        }
        LatentLayout {
            blocks,
            total_dim: offset,
        }
    }

    pub fn unstructured(total_dim: usize) -> LatentLayout {
        LatentLayout {
            blocks: Vec::new(),
            total_dim,
        }
    }

    pub fn block_range(&self, j: usize) -> Result<std::ops::Range<usize>> {
        let b = self
            .blocks
            .get(j)
            .ok_or_else(|| Error::usage(format!("no latent block {j}")))?;
        Ok(b.offset..b.offset + b.block_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixed_specs() -> Vec<ConceptSpec> {
        vec![
            ConceptSpec::new("a", FactorKind::Binary),
            ConceptSpec::new("b", FactorKind::Multiclass(4)),
            ConceptSpec::new("c", FactorKind::Continuous),
        ]
    }

    #[test]
    fn layout_covers_contiguously() {
        let layout = LatentLayout::from_specs(&mixed_specs());
        assert_eq!(layout.total_dim, 6);
        assert_eq!(layout.block_range(0).unwrap(), 0..1);
        assert_eq!(layout.block_range(1).unwrap(), 1..5);
        assert_eq!(layout.block_range(2).unwrap(), 5..6);
        assert!(layout.block_range(3).is_err());
    }

    #[test]
    fn one_vs_rest_expands_multiclass_only() {
        let (expanded, sources) = expand_one_vs_rest(&mixed_specs());
        assert_eq!(expanded.len(), 6);
        assert!(expanded
            .iter()
            .take(5)
            .all(|s| s.kind == FactorKind::Binary));
        assert_eq!(expanded[5].kind, FactorKind::Continuous);
        assert_eq!(sources[0], (0, None));
        assert_eq!(sources[1], (1, Some(0)));
        assert_eq!(sources[4], (1, Some(3)));
        assert_eq!(sources[5], (2, None));
        assert_eq!(LatentLayout::from_specs(&expanded).total_dim, 6);
    }
}
