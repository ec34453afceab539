//! Dataset container, stratified splitting, and CSV round-trip IO.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::factor::{
    continuous_bin, mixed_radix, FactorKind, FactorRole, FactorSpec, LabelTable,
};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FactorValues {
    Discrete(Vec<usize>),
    Continuous(Vec<f64>),
}

impl FactorValues {
    pub fn len(&self) -> usize {
        match self {
            FactorValues::Discrete(v) => v.len(),
            FactorValues::Continuous(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorColumn {
    pub spec: FactorSpec,
    pub values: FactorValues,
}

impl FactorColumn {
    /// (discrete value, continuous value) with the unused side zeroed.
    pub fn raw_at(&self, i: usize) -> (usize, f64) {
        match &self.values {
            FactorValues::Discrete(v) => (v[i], 0.0),
            FactorValues::Continuous(v) => (0, v[i]),
        }
    }

    /// Level index used by the label table and discrete probes.
    pub fn discretized_at(&self, i: usize, bins: usize) -> usize {
        match &self.values {
            FactorValues::Discrete(v) => v[i],
            FactorValues::Continuous(v) => continuous_bin(v[i], bins),
        }
    }

    pub fn select(&self, indices: &[usize]) -> FactorColumn {
        let values = match &self.values {
            FactorValues::Discrete(v) => {
                FactorValues::Discrete(indices.iter().map(|&i| v[i]).collect())
            }
            FactorValues::Continuous(v) => {
                FactorValues::Continuous(indices.iter().map(|&i| v[i]).collect())
            }
        };
        FactorColumn {
            spec: self.spec.clone(),
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub n_labels: usize,
    pub factors: Vec<FactorColumn>,
    pub split_tag: SplitTag,
    /// Present for factor datasets; carries the exact label function.
    pub label_table: Option<LabelTable>,
    pub continuous_bins: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        self.x.row(i)
    }

    pub fn columns_with_role(&self, role: FactorRole) -> Vec<&FactorColumn> {
        self.factors
            .iter()
            .filter(|c| c.spec.role == role)
            .collect()
    }

    pub fn concept_columns(&self) -> Vec<&FactorColumn> {
        self.columns_with_role(FactorRole::Concept)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_labels];
        for &y in &self.y {
            counts[y] += 1;
        }
        counts
    }

    pub fn select(&self, indices: &[usize], tag: SplitTag) -> Dataset {
        let d = self.input_dim();
        let mut x = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            x.extend_from_slice(self.x.row(i));
        }
        Dataset {
            x: Tensor::new(vec![indices.len(), d], x).expect("consistent row width"),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            n_labels: self.n_labels,
            factors: self.factors.iter().map(|c| c.select(indices)).collect(),
            split_tag: tag,
            label_table: self.label_table.clone(),
            continuous_bins: self.continuous_bins,
        }
    }

    /// Accuracy of the label table's concepts-only predictor on these rows.
    /// Unlike the exact enumeration over cells, this scores the same finite
    /// sample a model is scored on, so the two are directly comparable.
    /// None when the dataset carries no label table.
    pub fn bayes_c_only_accuracy_here(&self) -> Option<f64> {
        let table = self.label_table.as_ref()?;
        let concepts = self.concept_columns();
        let mut correct = 0usize;
        for i in 0..self.len() {
            let levels: Vec<usize> = concepts
                .iter()
                .map(|c| c.discretized_at(i, self.continuous_bins))
                .collect();
            let cell = mixed_radix(&levels, &table.c_dims);
            if table.bayes_label_c_only(cell) == self.y[i] {
                correct += 1;
            }
        }
        Some(correct as f64 / self.len() as f64)
    }

    /// Replaces every continuous concept column with its level bins as a
    /// multiclass column, leaving inputs and labels untouched. Models whose
    /// concept heads require discrete targets train against this view; the
    /// label function already depends on the bins only.
    pub fn discretize_continuous_concepts(&self) -> Dataset {
        let bins = self.continuous_bins;
        let factors = self
            .factors
            .iter()
            .map(|c| match (&c.spec.role, &c.values) {
                (FactorRole::Concept, FactorValues::Continuous(v)) => FactorColumn {
                    spec: FactorSpec::new(
                        &c.spec.name,
                        FactorKind::Multiclass(bins),
                        FactorRole::Concept,
                    ),
                    values: FactorValues::Discrete(
                        v.iter().map(|&x| continuous_bin(x, bins)).collect(),
                    ),
                },
                _ => c.clone(),
            })
            .collect();
        Dataset {
            factors,
            ..self.clone()
        }
    }
}

/// Stratified-by-label partition into train/val/test. Per class, split sizes
/// follow the ratios with largest-remainder rounding, so class proportions
/// are preserved within one sample. Returns warnings for any requested split
/// that ends up with zero samples of some class.
pub fn split(
    ds: &Dataset,
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset, Vec<String>)> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::config(format!("split ratios {ratios:?} invalid")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::config(format!(
            "split ratios sum to {total}, expected 1"
        )));
    }

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in ds.y.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }

    let mut parts: [Vec<usize>; 3] = Default::default();
    for (class, mut idxs) in by_class {
        let mut rng = StreamRng::new(seed, &format!("split/class{class}"));
        rng.shuffle(&mut idxs);
        let m = idxs.len();
        let exact: Vec<f64> = ratios.iter().map(|r| r * m as f64).collect();
        let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut leftover = m - sizes.iter().sum::<usize>();
        // Largest fractional part first; ties resolve to the earlier split.
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &s in &order {
            if leftover == 0 {
                break;
            }
            sizes[s] += 1;
            leftover -= 1;
        }
        let mut start = 0;
        for (s, &size) in sizes.iter().enumerate() {
            parts[s].extend_from_slice(&idxs[start..start + size]);
            start += size;
        }
    }
    for part in parts.iter_mut() {
        part.sort_unstable();
    }

    let tags = [SplitTag::Train, SplitTag::Val, SplitTag::Test];
    let names = ["train", "val", "test"];
    let mut warnings = Vec::new();
    let out: Vec<Dataset> = parts
        .iter()
        .zip(tags)
        .map(|(idxs, tag)| ds.select(idxs, tag))
        .collect();
    for (s, d) in out.iter().enumerate() {
        if ratios[s] == 0.0 {
            continue;
        }
        for (class, &count) in d.class_counts().iter().enumerate() {
            if count == 0 && ds.class_counts()[class] > 0 {
                warnings.push(format!(
                    "{} split has no samples of class {}",
                    names[s], class
                ));
            }
        }
    }
    let mut it = out.into_iter();
    Ok((
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        warnings,
    ))
}

/// Companion JSON for a dataset CSV: factor typing, label metadata, and a
/// snapshot of whatever generator configuration produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub generator: serde_json::Value,
    pub factors: Vec<FactorSpec>,
    pub n_labels: usize,
    pub continuous_bins: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_table: Option<LabelTable>,
}

impl DatasetSidecar {
    pub fn for_dataset(ds: &Dataset, generator: serde_json::Value) -> DatasetSidecar {
        DatasetSidecar {
            generator,
            factors: ds.factors.iter().map(|c| c.spec.clone()).collect(),
            n_labels: ds.n_labels,
            continuous_bins: ds.continuous_bins,
            label_table: ds.label_table.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<DatasetSidecar> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// One row per sample: x0..x{D-1}, y, then one column per factor. Floats use
/// the shortest representation that parses back to the same bits.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = ds.input_dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    for c in &ds.factors {
        header.push(c.spec.name.clone());
    }
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x_row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.y[i].to_string());
        for c in &ds.factors {
            rec.push(match &c.values {
                FactorValues::Discrete(v) => v[i].to_string(),
                FactorValues::Continuous(v) => v[i].to_string(),
            });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(csv_path: &Path, sidecar_path: &Path) -> Result<Dataset> {
    let sidecar = DatasetSidecar::read(sidecar_path)?;
    let mut r = csv::Reader::from_path(csv_path)?;
    let header = r.headers()?.clone();
    let y_pos = header
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| Error::config("dataset CSV has no y column"))?;
    let d = y_pos;
    let mut factor_pos = Vec::new();
    for spec in &sidecar.factors {
        let pos = header
            .iter()
            .position(|h| h == spec.name)
            .ok_or_else(|| Error::config(format!("CSV missing factor column {:?}", spec.name)))?;
        factor_pos.push(pos);
    }

    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut discrete: Vec<Vec<usize>> = vec![Vec::new(); sidecar.factors.len()];
    let mut continuous: Vec<Vec<f64>> = vec![Vec::new(); sidecar.factors.len()];
    for record in r.records() {
        let record = record?;
        for j in 0..d {
            let v: f64 = record[j]
                .parse()
                .map_err(|_| Error::config(format!("bad float {:?} in CSV", &record[j])))?;
            x.push(v);
        }
        y.push(
            record[y_pos]
                .parse()
                .map_err(|_| Error::config(format!("bad label {:?} in CSV", &record[y_pos])))?,
        );
        for (f, spec) in sidecar.factors.iter().enumerate() {
            let field = &record[factor_pos[f]];
            match spec.kind {
                crate::datagen::factor::FactorKind::Continuous => {
                    continuous[f].push(field.parse().map_err(|_| {
                        Error::config(format!("bad continuous value {:?} in CSV", field))
                    })?)
                }
                _ => discrete[f].push(field.parse().map_err(|_| {
                    Error::config(format!("bad discrete value {:?} in CSV", field))
                })?),
            }
        }
    }

    let n = y.len();
    let factors = sidecar
        .factors
        .iter()
        .enumerate()
        .map(|(f, spec)| FactorColumn {
            spec: spec.clone(),
            values: match spec.kind {
                crate::datagen::factor::FactorKind::Continuous => {
                    FactorValues::Continuous(std::mem::take(&mut continuous[f]))
                }
                _ => FactorValues::Discrete(std::mem::take(&mut discrete[f])),
            },
        })
        .collect();
    Ok(Dataset {
        x: Tensor::new(vec![n, d], x)?,
        y,
        n_labels: sidecar.n_labels,
        factors,
        split_tag: SplitTag::Full,
        label_table: sidecar.label_table,
        continuous_bins: sidecar.continuous_bins,
    })
}
