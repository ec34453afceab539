//! Small MLP probes used by the leakage and disentanglement metrics.
//!
//! A probe is fitted on one part of the data and read out on the held-out
//! rest, so the metric itself cannot leak. All randomness (split, init,
//! batch order) derives from the probe seed and a caller-supplied stream
//! name, making every metric a deterministic function of its inputs.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::diff::{OptimizerConfig, OptimizerState, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::Mlp;
use crate::rng::StreamRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden_layers: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of rows used for fitting; the rest scores the probe.
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> ProbeConfig {
        ProbeConfig {
            hidden_layers: vec![64],
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 128,
            seed: 0,
            train_fraction: 0.7,
        }
    }
}

impl ProbeConfig {
    /// Full-batch linear probe, used for single-coordinate importances.
    pub fn linear() -> ProbeConfig {
        ProbeConfig {
            hidden_layers: Vec::new(),
            epochs: 80,
            learning_rate: 0.05,
            batch_size: 4096,
            seed: 0,
            train_fraction: 0.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("probe epochs and batch_size must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "probe train_fraction {} must lie in (0, 1)",
                self.train_fraction
            )));
        }
        if self.hidden_layers.iter().any(|&h| h == 0) {
            return Err(Error::config("probe hidden layers must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("probe learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    /// Mean negative log-likelihood (nats) on the held-out rows.
    pub heldout_nll: f64,
    pub heldout_accuracy: f64,
    /// Held-out frequency of the most common held-out class: the accuracy
    /// of the best constant predictor, which no uninformative probe beats.
    pub heldout_baseline: f64,
    pub n_train: usize,
    pub n_eval: usize,
}

/// Trains a classifier features -> labels and scores it held out. `stream`
/// namespaces all randomness, so distinct probes on the same seed stay
/// independent and repeated calls are bit-identical.
pub fn fit_eval_probe(
    features: &Tensor,
    labels: &[usize],
    n_classes: usize,
    config: &ProbeConfig,
    stream: &str,
) -> Result<ProbeOutcome> {
    config.validate()?;
    let n = features.rows();
    if n != labels.len() {
        return Err(Error::dim(format!(
            "{} feature rows vs {} labels",
            n,
            labels.len()
        )));
    }
    if n < 4 {
        return Err(Error::usage("probe needs at least 4 rows"));
    }
    if n_classes < 2 {
        return Err(Error::usage("probe needs at least 2 classes"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::domain(format!(
            "label {bad} outside 0..{n_classes}"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    StreamRng::new(config.seed, &format!("probe/{stream}/split")).shuffle(&mut order);
    let n_train = ((config.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (train_idx, eval_idx) = order.split_at(n_train);

    let store_seed = StreamRng::new(config.seed, &format!("probe/{stream}/init")).next_u64();
    let mut store = ParamStore::new(store_seed);
    let mut dims = vec![features.cols()];
    dims.extend_from_slice(&config.hidden_layers);
    dims.push(n_classes);
    let mlp = Mlp::new(&mut store, "probe", &dims)?;
    let mut opt = OptimizerState::new(OptimizerConfig::adam(config.learning_rate), &store);

    let gather = |idx: &[usize]| -> Result<(Tensor, Vec<usize>)> {
        let d = features.cols();
        let mut x = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            x.extend_from_slice(features.row(i));
        }
        let y = idx.iter().map(|&i| labels[i]).collect();
        Ok((Tensor::new(vec![idx.len(), d], x)?, y))
    };

    let mut train_order: Vec<usize> = train_idx.to_vec();
    for epoch in 0..config.epochs {
        StreamRng::new(config.seed, &format!("probe/{stream}/shuffle{epoch}"))
            .shuffle(&mut train_order);
        for chunk in train_order.chunks(config.batch_size) {
            let (x, y) = gather(chunk)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let logits = mlp.forward(&mut tape, &store, xv)?;
            let loss = tape.cross_entropy(logits, &y)?;
            store.zero_grad();
            tape.backward(loss, &mut store)?;
            opt.step(&mut store, config.learning_rate);
        }
    }

    let (x_eval, y_eval) = gather(eval_idx)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x_eval);
    let logits = mlp.forward(&mut tape, &store, xv)?;
    let nll_var = tape.cross_entropy(logits, &y_eval)?;
    let nll = tape.scalar_value(nll_var)?;
    let out = tape.value(logits);
    let hits = (0..out.rows())
        .filter(|&i| crate::models::argmax_row(out.row(i)) == y_eval[i])
        .count();
    let mut counts = vec![0usize; n_classes];
    for &label in &y_eval {
        counts[label] += 1;
    }
    let majority = counts.into_iter().max().unwrap_or(0);
    Ok(ProbeOutcome {
        heldout_nll: nll,
        heldout_accuracy: hits as f64 / y_eval.len() as f64,
        heldout_baseline: majority as f64 / y_eval.len() as f64,
        n_train: train_idx.len(),
        n_eval: eval_idx.len(),
    })
}

/// Shannon entropy (nats) of the empirical label distribution.
pub fn empirical_entropy(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let k = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot_data(n: usize, k: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = StreamRng::new(seed, "test/probe");
        let labels: Vec<usize> = (0..n).map(|_| rng.index(k)).collect();
        let mut x = vec![0.0; n * k];
        for (i, &l) in labels.iter().enumerate() {
            x[i * k + l] = 1.0;
        }
        (Tensor::new(vec![n, k], x).unwrap(), labels)
    }

    #[test]
    fn probe_learns_an_identity_mapping() {
        let (x, y) = onehot_data(600, 4, 1);
        let out = fit_eval_probe(&x, &y, 4, &ProbeConfig::default(), "identity").unwrap();
        assert!(out.heldout_accuracy > 0.95, "acc {}", out.heldout_accuracy);
        // The default budget stops well before the probabilities saturate,
        // so the loss only needs to be clearly below ln(4) = 1.386.
        assert!(out.heldout_nll < 0.7, "nll {}", out.heldout_nll);
        assert!(out.heldout_baseline < 0.5);
        assert_eq!(out.n_train + out.n_eval, 600);
    }

    #[test]
    fn probe_is_deterministic_per_seed_and_stream() {
        let (x, y) = onehot_data(200, 3, 2);
        let a = fit_eval_probe(&x, &y, 3, &ProbeConfig::default(), "s").unwrap();
        let b = fit_eval_probe(&x, &y, 3, &ProbeConfig::default(), "s").unwrap();
        assert_eq!(a, b);
        let c = fit_eval_probe(&x, &y, 3, &ProbeConfig::default(), "other").unwrap();
        assert_ne!(a.heldout_nll.to_bits(), c.heldout_nll.to_bits());
    }

    #[test]
    fn probe_validates_inputs() {
        let (x, y) = onehot_data(40, 3, 3);
        assert!(fit_eval_probe(&x, &y[..10], 3, &ProbeConfig::default(), "s").is_err());
        assert!(fit_eval_probe(&x, &y, 1, &ProbeConfig::default(), "s").is_err());
        let bad = ProbeConfig {
            train_fraction: 1.0,
            ..ProbeConfig::default()
        };
        assert!(fit_eval_probe(&x, &y, 3, &bad, "s").is_err());
        let mut y_bad = y.clone();
        y_bad[0] = 7;
        assert!(fit_eval_probe(&x, &y_bad, 3, &ProbeConfig::default(), "s").is_err());
    }

    #[test]
    fn entropy_of_uniform_and_constant_labels() {
        let uniform: Vec<usize> = (0..400).map(|i| i % 4).collect();
        assert!((empirical_entropy(&uniform) - (4.0f64).ln()).abs() < 1e-12);
        assert_eq!(empirical_entropy(&vec![2usize; 50]), 0.0);
        let half: Vec<usize> = (0..100).map(|i| i % 2).collect();
        assert!((empirical_entropy(&half) - (2.0f64).ln()).abs() < 1e-12);
    }
}
