//! Disentanglement score: how exclusively each latent coordinate tracks a
//! single generative concept.
//!
//! Every coordinate is probed against every concept with a linear classifier
//! on that coordinate alone. Baseline-adjusted probe accuracies form an
//! importance matrix; a coordinate devoted to one concept has a one-hot row
//! (entropy zero), a coordinate mixing several concepts has a flat row. The
//! score is the importance-weighted mean of `1 - normalized row entropy`.

use crate::datagen::{Dataset, FactorRole};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::metrics::probe::{fit_eval_probe, ProbeConfig};
use crate::rng::fnv1a64;

/// One discrete probe target: per-sample level indices in `0..n_levels`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptLabels {
    pub name: String,
    pub labels: Vec<usize>,
    pub n_levels: usize,
}

/// Discretized concept columns of a dataset, in declaration order.
pub fn concept_probe_targets(ds: &Dataset) -> Vec<ConceptLabels> {
    ds.columns_with_role(FactorRole::Concept)
        .into_iter()
        .map(|col| ConceptLabels {
            name: col.spec.name.clone(),
            labels: (0..ds.len())
                .map(|i| col.discretized_at(i, ds.continuous_bins))
                .collect(),
            n_levels: col.spec.cardinality(ds.continuous_bins),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DisentanglementReport {
    /// `importance[i][j]`: held-out accuracy of predicting concept `j` from
    /// latent coordinate `i` alone, rescaled so the majority baseline maps
    /// to 0 and perfect prediction to 1.
    pub importance: Vec<Vec<f64>>,
    pub score: f64,
}

pub fn disentanglement(
    z: &Tensor,
    concepts: &[ConceptLabels],
    config: &ProbeConfig,
) -> Result<DisentanglementReport> {
    let n = z.rows();
    let d = z.cols();
    if n == 0 || d == 0 {
        return Err(Error::dim(format!(
            "disentanglement needs a non-empty latent matrix, got {n}x{d}"
        )));
    }
    if concepts.len() < 2 {
        return Err(Error::usage(
            "disentanglement needs at least two concepts to measure mixing",
        ));
    }
    for c in concepts {
        if c.labels.len() != n {
            return Err(Error::dim(format!(
                "concept {} has {} labels for {} latent rows",
                c.name,
                c.labels.len(),
                n
            )));
        }
    }

    let mut importance = vec![vec![0.0; concepts.len()]; d];
    for (i, row) in importance.iter_mut().enumerate() {
        let column: Vec<f64> = (0..n).map(|r| z.row(r)[i]).collect();
        let features = Tensor::new(vec![n, 1], column.clone())?;
        for (j, concept) in concepts.iter().enumerate() {
            let stream = probe_stream(&column, concept);
            let out = fit_eval_probe(&features, &concept.labels, concept.n_levels, config, &stream)?;
            let headroom = 1.0 - out.heldout_baseline;
            if headroom > 0.0 {
                row[j] = ((out.heldout_accuracy - out.heldout_baseline) / headroom).max(0.0);
            }
        }
    }

    let total: f64 = importance.iter().flatten().sum();
    if total <= 0.0 {
        return Err(Error::undefined_metric(
            "no latent coordinate predicts any concept above its baseline",
        ));
    }
    let max_entropy = (concepts.len() as f64).ln();
    let mut score = 0.0;
    for row in &importance {
        let row_sum: f64 = row.iter().sum();
        if row_sum <= 0.0 {
            continue;
        }
        let mut entropy = 0.0;
        for &v in row {
            if v > 0.0 {
                let p = v / row_sum;
                entropy -= p * p.ln();
            }
        }
        score += (row_sum / total) * (1.0 - entropy / max_entropy);
    }
    Ok(DisentanglementReport {
        importance,
        score: score.clamp(0.0, 1.0),
    })
}

/// Stream name derived from the probe's inputs rather than coordinate
/// indices, so reordering latent columns reorders scores without changing
/// them.
fn probe_stream(column: &[f64], concept: &ConceptLabels) -> String {
    let mut bytes = Vec::with_capacity((column.len() + concept.labels.len() + 1) * 8);
    for v in column {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    for &l in &concept.labels {
        bytes.extend_from_slice(&(l as u64).to_le_bytes());
    }
    bytes.extend_from_slice(&(concept.n_levels as u64).to_le_bytes());
    format!("disent/{:016x}", fnv1a64(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use rand::Rng;

    fn labels(n: usize, levels: usize, stream: &str) -> Vec<usize> {
        let mut rng = StreamRng::new(407, stream);
        (0..n).map(|_| rng.random_range(0..levels)).collect()
    }

    fn concept(name: &str, labels: Vec<usize>, n_levels: usize) -> ConceptLabels {
        ConceptLabels {
            name: name.into(),
            labels,
            n_levels,
        }
    }

    #[test]
    fn one_hot_blocks_score_near_one() {
        let n = 900;
        let c1 = labels(n, 4, "c1");
        let c2 = labels(n, 3, "c2");
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = vec![0.0; 7];
            row[c1[i]] = 1.0;
            row[4 + c2[i]] = 1.0;
            rows.push(row);
        }
        let z = Tensor::from_rows(&rows).unwrap();
        let concepts = [concept("a", c1, 4), concept("b", c2, 3)];
        let report = disentanglement(&z, &concepts, &ProbeConfig::linear()).unwrap();
        assert!(report.score >= 0.95, "score {}", report.score);
        // Each coordinate's importance should sit entirely in its own block.
        for (i, row) in report.importance.iter().enumerate() {
            let own = if i < 4 { 0 } else { 1 };
            assert!(row[own] > 0.1, "row {i}: {row:?}");
            assert!(row[1 - own] < 0.05, "row {i}: {row:?}");
        }
    }

    #[test]
    fn fully_mixed_coordinates_score_low() {
        let n = 1000;
        let c1 = labels(n, 2, "m1");
        let c2 = labels(n, 2, "m2");
        let mut noise = StreamRng::new(11, "jitter");
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..3)
                    .map(|_| {
                        (c1[i] + c2[i]) as f64 + 0.01 * noise.random_range(-1.0..1.0)
                    })
                    .collect()
            })
            .collect();
        let z = Tensor::from_rows(&rows).unwrap();
        let concepts = [concept("a", c1, 2), concept("b", c2, 2)];
        let report = disentanglement(&z, &concepts, &ProbeConfig::linear()).unwrap();
        assert!(report.score <= 0.2, "score {}", report.score);
    }

    #[test]
    fn score_is_invariant_to_latent_column_order() {
        let n = 400;
        let c1 = labels(n, 2, "p1");
        let c2 = labels(n, 3, "p2");
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| vec![c1[i] as f64, c2[i] as f64, (c1[i] + c2[i]) as f64])
            .collect();
        let swapped: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[2], r[0], r[1]]).collect();
        let z = Tensor::from_rows(&rows).unwrap();
        let zs = Tensor::from_rows(&swapped).unwrap();
        let concepts = [concept("a", c1, 2), concept("b", c2, 3)];
        let base = disentanglement(&z, &concepts, &ProbeConfig::linear()).unwrap();
        let perm = disentanglement(&zs, &concepts, &ProbeConfig::linear()).unwrap();
        assert!((base.score - perm.score).abs() < 1e-12);
        assert_eq!(base.importance[0], perm.importance[1]);
        assert_eq!(base.importance[2], perm.importance[0]);
    }

    #[test]
    fn constant_latent_is_undefined() {
        let z = Tensor::new(vec![200, 2], vec![0.5; 400]).unwrap();
        let concepts = [
            concept("a", labels(200, 2, "u1"), 2),
            concept("b", labels(200, 2, "u2"), 2),
        ];
        let err = disentanglement(&z, &concepts, &ProbeConfig::linear()).unwrap_err();
        assert!(err.to_string().contains("baseline"), "{err}");
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let z = Tensor::new(vec![10, 2], vec![0.0; 20]).unwrap();
        let one = [concept("a", labels(10, 2, "x"), 2)];
        assert!(disentanglement(&z, &one, &ProbeConfig::linear()).is_err());
        let short = [
            concept("a", labels(4, 2, "x"), 2),
            concept("b", labels(10, 2, "y"), 2),
        ];
        assert!(disentanglement(&z, &short, &ProbeConfig::linear()).is_err());
    }

    #[test]
    fn dataset_targets_discretize_continuous_concepts() {
        let mut config = crate::datagen::GenerativeConfig::default_toy();
        config.n_samples = 64;
        let ds = crate::datagen::make_factor_dataset(&config, 5).unwrap();
        let targets = concept_probe_targets(&ds);
        assert!(!targets.is_empty());
        for t in &targets {
            assert_eq!(t.labels.len(), 64);
            assert!(!t.name.is_empty());
            assert!(t.labels.iter().all(|&l| l < t.n_levels));
        }
    }
}
