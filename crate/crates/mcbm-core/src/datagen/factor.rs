//! Factor-based synthetic generative process.
//!
//! Ground-truth factors (concepts and nuisances) are sampled independently,
//! pushed through a frozen random decoder to produce inputs, and a fixed
//! random lookup table over the discretized (concept, task-nuisance) joint
//! produces labels. Free nuisances enter the input but never the label, which
//! makes information-flow claims checkable by exact enumeration.

use serde::{Deserialize, Serialize};

use crate::datagen::dataset::{Dataset, FactorColumn, FactorValues, SplitTag};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorKind {
    Binary,
    Multiclass(usize),
    Continuous,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorRole {
    Concept,
    /// Influences the label together with the concepts.
    TaskNuisance,
    /// Enters the input only; the label is independent of it by construction.
    FreeNuisance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub kind: FactorKind,
    pub role: FactorRole,
}

impl FactorSpec {
    pub fn new(name: &str, kind: FactorKind, role: FactorRole) -> FactorSpec {
        FactorSpec {
            name: name.to_string(),
            kind,
            role,
        }
    }

    /// Width of this factor's slice of the decoder input embedding.
    pub fn embed_dim(&self) -> usize {
        match self.kind {
            FactorKind::Binary | FactorKind::Continuous => 1,
            FactorKind::Multiclass(k) => k,
        }
    }

    /// Number of discretized levels; continuous factors use `bins`.
    pub fn cardinality(&self, bins: usize) -> usize {
        match self.kind {
            FactorKind::Binary => 2,
            FactorKind::Multiclass(k) => k,
            FactorKind::Continuous => bins,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::config("factor with empty name"));
        }
        if let FactorKind::Multiclass(k) = self.kind {
            if k < 2 {
                return Err(Error::config(format!(
                    "multiclass factor {:?} needs k >= 2, got {}",
                    self.name, k
                )));
            }
        }
        Ok(())
    }
}

/// Uniform bin index of a continuous value on [-1, 1].
pub fn continuous_bin(v: f64, bins: usize) -> usize {
    let t = ((v + 1.0) / 2.0 * bins as f64).floor();
    (t.max(0.0) as usize).min(bins - 1)
}

fn default_continuous_bins() -> usize {
    5
}

fn default_n_labels() -> usize {
    4
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerativeConfig {
    pub factors: Vec<FactorSpec>,
    pub input_dim: usize,
    pub decoder_seed: u64,
    pub label_seed: u64,
    pub n_samples: usize,
    pub noise_std: f64,
    /// Levels used to discretize continuous factors for the label table.
    #[serde(default = "default_continuous_bins")]
    pub continuous_bins: usize,
    /// Distinct labels of the task variable.
    #[serde(default = "default_n_labels")]
    pub n_labels: usize,
}

impl GenerativeConfig {
    /// Three concepts (binary, 4-class, continuous), one task nuisance and
    /// one free nuisance (both 4-class), 32-dim inputs, 8000 samples.
    pub fn default_toy() -> GenerativeConfig {
        GenerativeConfig {
            factors: vec![
                FactorSpec::new("c0_binary", FactorKind::Binary, FactorRole::Concept),
                FactorSpec::new("c1_multi4", FactorKind::Multiclass(4), FactorRole::Concept),
                FactorSpec::new("c2_cont", FactorKind::Continuous, FactorRole::Concept),
                FactorSpec::new("n_task", FactorKind::Multiclass(4), FactorRole::TaskNuisance),
                FactorSpec::new("n_free", FactorKind::Multiclass(4), FactorRole::FreeNuisance),
            ],
            input_dim: 32,
            decoder_seed: 101,
            label_seed: 202,
            n_samples: 8000,
            noise_std: 0.05,
            continuous_bins: 5,
            n_labels: 4,
        }
    }

    /// All-discrete concepts (binary, 8-class, binary) with the same
    /// nuisance structure as the toy set. The wide middle concept gives
    /// one-vs-rest concept blocks redundant coordinates where an
    /// unregularized model can stash nuisance information, and the input
    /// noise is high enough that concept readout sits just below
    /// saturation, so interventions with true values have room to help.
    pub fn benchmark() -> GenerativeConfig {
        GenerativeConfig {
            factors: vec![
                FactorSpec::new("c0_binary", FactorKind::Binary, FactorRole::Concept),
                FactorSpec::new("c1_multi8", FactorKind::Multiclass(8), FactorRole::Concept),
                FactorSpec::new("c2_binary", FactorKind::Binary, FactorRole::Concept),
                FactorSpec::new("n_task", FactorKind::Multiclass(4), FactorRole::TaskNuisance),
                FactorSpec::new("n_free", FactorKind::Multiclass(4), FactorRole::FreeNuisance),
            ],
            input_dim: 32,
            decoder_seed: 404,
            label_seed: 505,
            n_samples: 8000,
            noise_std: 0.2,
            continuous_bins: 5,
            n_labels: 4,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.factors.iter().map(|f| f.embed_dim()).sum()
    }

    pub fn concepts(&self) -> impl Iterator<Item = &FactorSpec> {
        self.factors
            .iter()
            .filter(|f| f.role == FactorRole::Concept)
    }

    pub fn task_nuisances(&self) -> impl Iterator<Item = &FactorSpec> {
        self.factors
            .iter()
            .filter(|f| f.role == FactorRole::TaskNuisance)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be positive"));
        }
        if self.concepts().count() == 0 {
            return Err(Error::config("at least one concept factor required"));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::config(format!("noise_std {} invalid", self.noise_std)));
        }
        if self.continuous_bins < 2 {
            return Err(Error::config("continuous_bins must be >= 2"));
        }
        if self.n_labels < 2 {
            return Err(Error::config("n_labels must be >= 2"));
        }
        for f in &self.factors {
            f.validate()?;
        }
        let mut names: Vec<&str> = self.factors.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.factors.len() {
            return Err(Error::config("factor names must be unique"));
        }
        if self.input_dim < self.embed_dim() {
            return Err(Error::config(format!(
                "input_dim {} below total factor embedding dim {}",
                self.input_dim,
                self.embed_dim()
            )));
        }
        Ok(())
    }
}

/// Label lookup over the discretized joint of (concepts, task nuisances).
/// Cell index = c_cell * n_ny_cells + ny_cell, mixed radix in factor order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelTable {
    pub c_dims: Vec<usize>,
    pub ny_dims: Vec<usize>,
    pub n_labels: usize,
    pub labels: Vec<usize>,
}

/// Mixed-radix cell index; first value is the most significant digit.
pub fn mixed_radix(values: &[usize], dims: &[usize]) -> usize {
    debug_assert_eq!(values.len(), dims.len());
    let mut idx = 0;
    for (v, d) in values.iter().zip(dims) {
        debug_assert!(v < d);
        idx = idx * d + v;
    }
    idx
}

impl LabelTable {
    pub fn n_c_cells(&self) -> usize {
        self.c_dims.iter().product()
    }

    pub fn n_ny_cells(&self) -> usize {
        self.ny_dims.iter().product()
    }

    pub fn label(&self, c_cell: usize, ny_cell: usize) -> usize {
        self.labels[c_cell * self.n_ny_cells() + ny_cell]
    }

    /// Accuracy of the best predictor that sees only the concepts, by exact
    /// enumeration: all cells are equiprobable because factors are sampled
    /// uniformly and continuous bins have equal mass.
    pub fn bayes_accuracy_c_only(&self) -> f64 {
        let nc = self.n_c_cells();
        let nny = self.n_ny_cells();
        let mut correct = 0.0;
        for c in 0..nc {
            let mut counts = vec![0usize; self.n_labels];
            for ny in 0..nny {
                counts[self.label(c, ny)] += 1;
            }
            correct += *counts.iter().max().unwrap() as f64 / nny as f64;
        }
        correct / nc as f64
    }

    pub fn bayes_error_c_only(&self) -> f64 {
        1.0 - self.bayes_accuracy_c_only()
    }

    /// Label the best concepts-only predictor assigns to one concept cell.
    /// Ties break toward the lower label, like `bayes_accuracy_c_only`.
    pub fn bayes_label_c_only(&self, c_cell: usize) -> usize {
        let nny = self.n_ny_cells();
        let mut counts = vec![0usize; self.n_labels];
        for ny in 0..nny {
            counts[self.label(c_cell, ny)] += 1;
        }
        let mut best = 0;
        for l in 1..self.n_labels {
            if counts[l] > counts[best] {
                best = l;
            }
        }
        best
    }

    pub fn is_surjective(&self) -> bool {
        let mut seen = vec![false; self.n_labels];
        for &l in &self.labels {
            seen[l] = true;
        }
        seen.iter().all(|s| *s)
    }

    /// True when some concept cell maps to at least two labels across its
    /// task-nuisance cells, so concepts alone cannot reach accuracy 1.
    pub fn has_ambiguous_c_cell(&self) -> bool {
        let nny = self.n_ny_cells();
        (0..self.n_c_cells()).any(|c| (1..nny).any(|ny| self.label(c, ny) != self.label(c, 0)))
    }
}

fn build_label_table(config: &GenerativeConfig) -> Result<LabelTable> {
    let c_dims: Vec<usize> = config
        .concepts()
        .map(|f| f.cardinality(config.continuous_bins))
        .collect();
    let ny_dims: Vec<usize> = config
        .task_nuisances()
        .map(|f| f.cardinality(config.continuous_bins))
        .collect();
    let n_cells: usize = c_dims.iter().product::<usize>() * ny_dims.iter().product::<usize>();
    if n_cells < config.n_labels {
        return Err(Error::config(format!(
            "{} label-table cells cannot cover {} labels",
            n_cells, config.n_labels
        )));
    }
    let need_ambiguity = !ny_dims.is_empty();
    for attempt in 0..100 {
        let mut rng = StreamRng::new(config.label_seed, &format!("labels/attempt{attempt}"));
        let mut labels = vec![0usize; n_cells];
        let mut order: Vec<usize> = (0..n_cells).collect();
        rng.shuffle(&mut order);
        // The first n_labels shuffled cells pin one cell per label, making the
        // table surjective; everything else is uniform.
        for (l, &cell) in order.iter().take(config.n_labels).enumerate() {
            labels[cell] = l;
        }
        for &cell in order.iter().skip(config.n_labels) {
            labels[cell] = rng.index(config.n_labels);
        }
        let table = LabelTable {
            c_dims: c_dims.clone(),
            ny_dims: ny_dims.clone(),
            n_labels: config.n_labels,
            labels,
        };
        if !need_ambiguity || table.has_ambiguous_c_cell() {
            return Ok(table);
        }
    }
    Err(Error::config(
        "could not draw a label table where task nuisances matter; \
         check factor cardinalities",
    ))
}

const DECODER_HIDDEN: usize = 64;

/// Fixed random tanh MLP mapping factor embeddings to inputs. Never trained.
struct FrozenDecoder {
    dims: [usize; 4],
    weights: [Vec<f64>; 3],
    biases: [Vec<f64>; 3],
}

impl FrozenDecoder {
    fn new(embed_dim: usize, input_dim: usize, decoder_seed: u64) -> FrozenDecoder {
        let dims = [embed_dim, DECODER_HIDDEN, DECODER_HIDDEN, input_dim];
        let mut weights: [Vec<f64>; 3] = Default::default();
        let mut biases: [Vec<f64>; 3] = Default::default();
        for l in 0..3 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            // Tanh-friendly gain on hidden layers keeps activations spread
            // without saturating; the linear output layer uses gain 1.
            let gain = if l < 2 { 5.0 / 3.0 } else { 1.0 };
            let std = gain / (fan_in.max(1) as f64).sqrt();
            let mut wrng = StreamRng::new(decoder_seed, &format!("decoder/w{l}"));
            weights[l] = (0..fan_in * fan_out).map(|_| wrng.normal() * std).collect();
            let mut brng = StreamRng::new(decoder_seed, &format!("decoder/b{l}"));
            biases[l] = (0..fan_out).map(|_| brng.normal() * 0.2).collect();
        }
        FrozenDecoder {
            dims,
            weights,
            biases,
        }
    }

    fn decode(&self, embed: &[f64]) -> Vec<f64> {
        let mut h = embed.to_vec();
        for l in 0..3 {
            let (fan_in, fan_out) = (self.dims[l], self.dims[l + 1]);
            let mut out = self.biases[l].clone();
            for (i, hi) in h.iter().enumerate().take(fan_in) {
                let row = &self.weights[l][i * fan_out..(i + 1) * fan_out];
                for (o, w) in row.iter().enumerate() {
                    out[o] += hi * w;
                }
            }
            if l < 2 {
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
            }
            h = out;
        }
        h
    }
}

/// Writes a factor value into its embedding slice: binary as +-1, multiclass
/// as one-hot, continuous as the raw value.
pub fn embed_factor(kind: FactorKind, discrete: usize, continuous: f64, out: &mut [f64]) {
    match kind {
        FactorKind::Binary => out[0] = if discrete == 1 { 1.0 } else { -1.0 },
        FactorKind::Multiclass(k) => {
            out[..k].fill(0.0);
            out[discrete] = 1.0;
        }
        FactorKind::Continuous => out[0] = continuous,
    }
}

pub fn make_factor_dataset(config: &GenerativeConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let table = build_label_table(config)?;
    let decoder = FrozenDecoder::new(config.embed_dim(), config.input_dim, config.decoder_seed);
    let n = config.n_samples;

    // Factor draws come from per-factor streams so adding a factor never
    // reshuffles the others.
    let mut columns: Vec<FactorColumn> = Vec::with_capacity(config.factors.len());
    for spec in &config.factors {
        let mut rng = StreamRng::new(seed, &format!("factor/{}", spec.name));
        let values = match spec.kind {
            FactorKind::Binary => {
                FactorValues::Discrete((0..n).map(|_| rng.index(2)).collect())
            }
            FactorKind::Multiclass(k) => {
                FactorValues::Discrete((0..n).map(|_| rng.index(k)).collect())
            }
            FactorKind::Continuous => {
                FactorValues::Continuous((0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            }
        };
        columns.push(FactorColumn {
            spec: spec.clone(),
            values,
        });
    }

    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c_vals: Vec<usize> = columns
            .iter()
            .filter(|col| col.spec.role == FactorRole::Concept)
            .map(|col| col.discretized_at(i, config.continuous_bins))
            .collect();
        let ny_vals: Vec<usize> = columns
            .iter()
            .filter(|col| col.spec.role == FactorRole::TaskNuisance)
            .map(|col| col.discretized_at(i, config.continuous_bins))
            .collect();
        y.push(table.label(
            mixed_radix(&c_vals, &table.c_dims),
            mixed_radix(&ny_vals, &table.ny_dims),
        ));
    }

    let embed_dim = config.embed_dim();
    let mut noise_rng = StreamRng::new(seed, "noise");
    let mut x = Vec::with_capacity(n * config.input_dim);
    let mut embed = vec![0.0; embed_dim];
    for i in 0..n {
        let mut offset = 0;
        for col in &columns {
            let width = col.spec.embed_dim();
            let (d, c) = col.raw_at(i);
            embed_factor(col.spec.kind, d, c, &mut embed[offset..offset + width]);
            offset += width;
        }
        let mut row = decoder.decode(&embed);
        for v in row.iter_mut() {
            *v += noise_rng.normal() * config.noise_std;
        }
        x.extend_from_slice(&row);
    }

    Ok(Dataset {
        x: Tensor::new(vec![n, config.input_dim], x)?,
        y,
        n_labels: config.n_labels,
        factors: columns,
        split_tag: SplitTag::Full,
        label_table: Some(table),
        continuous_bins: config.continuous_bins,
    })
}
