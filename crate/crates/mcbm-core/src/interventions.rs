//! Test-time concept interventions, intervention curves, and the exact
//! Bayes posterior that the sigmoid-inverse shortcut approximates.
//!
//! Each variant intervenes differently. CBM writes an empirical percentile
//! of the latent into the block, because inverting the sigmoid at a hard
//! label would ask for an infinite logit. The minimal variant writes the
//! representation target, which is the mean of the concept-conditional
//! latent once training has matched it. The hard variant overwrites the
//! binarized concept directly.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, FactorKind, FactorValues, TwoGaussianMixture};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::models::{
    binarize_probs, concat_cols, representation_target, ModelBundle, Predictions, Variant,
};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    CbmPercentile,
    McbmHead,
    HcbmBinary,
}

impl Mechanism {
    pub fn for_variant(variant: Variant) -> Result<Mechanism> {
        match variant {
            Variant::Cbm => Ok(Mechanism::CbmPercentile),
            Variant::Mcbm => Ok(Mechanism::McbmHead),
            Variant::Hcbm => Ok(Mechanism::HcbmBinary),
            Variant::Vm => Err(Error::usage(
                "vanilla model has no concepts to intervene on",
            )),
        }
    }
}

/// Ground-truth value pushed into the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConceptValue {
    Discrete(usize),
    Continuous(f64),
}

#[derive(Clone, Debug)]
pub struct InterventionSpec {
    pub concept_index: usize,
    pub value: ConceptValue,
    pub mechanism: Mechanism,
}

/// Empirical (low, high) latent percentiles per binary block, fitted on the
/// training split only. Writing `high` means "concept present".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileTable {
    pub bounds: Vec<Option<(f64, f64)>>,
    pub lo_percent: f64,
    pub hi_percent: f64,
}

/// Percentile of pre-sorted values with linear interpolation between order
/// statistics: rank p/100 * (n-1), fractional part interpolated.
pub fn percentile_interpolated(sorted: &[f64], percent: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::usage("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&percent) {
        return Err(Error::domain(format!("percentile {percent} outside [0, 100]")));
    }
    let rank = percent / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= sorted.len() {
        return Ok(sorted[sorted.len() - 1]);
    }
    Ok(sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac)
}

pub fn fit_percentile_table(model: &ModelBundle, train_split: &Dataset) -> Result<PercentileTable> {
    if model.variant != Variant::Cbm {
        return Err(Error::usage(
            "percentile interventions target the deterministic sigmoid heads of cbm",
        ));
    }
    if train_split.is_empty() {
        return Err(Error::usage("percentile fit on an empty split"));
    }
    model.check_compatible(train_split)?;
    let mu = model.encode_mu(&train_split.x)?;
    let (lo_percent, hi_percent) = (5.0, 95.0);
    let mut bounds = Vec::with_capacity(model.concept_specs.len());
    for (j, spec) in model.concept_specs.iter().enumerate() {
        if spec.kind != FactorKind::Binary {
            bounds.push(None);
            continue;
        }
        let range = model.layout.block_range(j)?;
        let mut zs: Vec<f64> = (0..mu.rows()).map(|r| mu.row(r)[range.start]).collect();
        zs.sort_by(f64::total_cmp);
        let lo = percentile_interpolated(&zs, lo_percent)?;
        let hi = percentile_interpolated(&zs, hi_percent)?;
        bounds.push(Some((lo, hi)));
    }
    Ok(PercentileTable {
        bounds,
        lo_percent,
        hi_percent,
    })
}

pub struct InterventionAux<'a> {
    pub percentiles: Option<&'a PercentileTable>,
}

impl<'a> InterventionAux<'a> {
    pub fn none() -> InterventionAux<'static> {
        InterventionAux { percentiles: None }
    }
}

/// Block values written into the latent for one spec, shared across rows.
fn latent_target(
    model: &ModelBundle,
    spec: &InterventionSpec,
    aux: &InterventionAux,
) -> Result<Vec<f64>> {
    let j = spec.concept_index;
    let concept = model
        .concept_specs
        .get(j)
        .ok_or_else(|| Error::usage(format!("no concept {j}")))?;
    match spec.mechanism {
        Mechanism::CbmPercentile => {
            if concept.kind != FactorKind::Binary {
                return Err(Error::usage(format!(
                    "percentile intervention on non-binary concept {:?}; only binary blocks have \
                     a two-sided percentile rule",
                    concept.name
                )));
            }
            let table = aux
                .percentiles
                .ok_or_else(|| Error::usage("percentile intervention without a fitted table"))?;
            let (lo, hi) = table
                .bounds
                .get(j)
                .copied()
                .flatten()
                .ok_or_else(|| Error::usage(format!("table has no bounds for concept {j}")))?;
            let ConceptValue::Discrete(alpha) = spec.value else {
                return Err(Error::usage("binary intervention needs a 0/1 value"));
            };
            if alpha > 1 {
                return Err(Error::domain(format!("binary value {alpha}")));
            }
            Ok(vec![if alpha == 1 { hi } else { lo }])
        }
        Mechanism::McbmHead => match (concept.kind, spec.value) {
            (FactorKind::Continuous, ConceptValue::Continuous(c)) => {
                if !c.is_finite() {
                    return Err(Error::domain(format!("continuous value {c}")));
                }
                representation_target(concept.kind, 0, c, model.lambda)
            }
            (FactorKind::Continuous, ConceptValue::Discrete(_)) => {
                Err(Error::usage("continuous concept needs a continuous value"))
            }
            (_, ConceptValue::Discrete(d)) => {
                representation_target(concept.kind, d, 0.0, model.lambda)
            }
            (_, ConceptValue::Continuous(_)) => {
                Err(Error::usage("discrete concept needs a discrete value"))
            }
        },
        Mechanism::HcbmBinary => Err(Error::usage(
            "binarized interventions bypass the latent; handled separately",
        )),
    }
}

fn check_specs(model: &ModelBundle, specs: &[InterventionSpec]) -> Result<Mechanism> {
    let mechanism = Mechanism::for_variant(model.variant)?;
    let mut seen = vec![false; model.concept_specs.len()];
    for spec in specs {
        if spec.mechanism != mechanism {
            return Err(Error::usage(format!(
                "{:?} intervention on a {} model",
                spec.mechanism,
                model.variant.as_str()
            )));
        }
        let j = spec.concept_index;
        if j >= seen.len() {
            return Err(Error::usage(format!("no concept {j}")));
        }
        if seen[j] {
            return Err(Error::usage(format!("concept {j} intervened twice")));
        }
        seen[j] = true;
    }
    Ok(mechanism)
}

fn write_block(z: &mut Tensor, row: usize, range: &Range<usize>, vals: &[f64]) {
    let width = z.cols();
    let offset = row * width;
    z.values_mut()[offset + range.start..offset + range.end].copy_from_slice(vals);
}

/// Runs the variant's intervention procedure and recomputes predictions.
/// Un-intervened blocks keep their encoded values bitwise; an empty spec
/// list reproduces the plain forward pass exactly.
pub fn intervene(
    model: &ModelBundle,
    x: &Tensor,
    specs: &[InterventionSpec],
    aux: &InterventionAux,
) -> Result<Predictions> {
    let mechanism = check_specs(model, specs)?;
    let mu = model.encode_mu(x)?;
    match mechanism {
        Mechanism::CbmPercentile | Mechanism::McbmHead => {
            let mut z = mu;
            for spec in specs {
                let range = model.layout.block_range(spec.concept_index)?;
                let vals = latent_target(model, spec, aux)?;
                for row in 0..z.rows() {
                    write_block(&mut z, row, &range, &vals);
                }
            }
            model.predict_from_latent(&z)
        }
        Mechanism::HcbmBinary => {
            let concept_outputs = model.concept_outputs_from_latent(&mu)?;
            let mut c_bin = binarize_probs(&concat_cols(&concept_outputs)?);
            let mut outputs = concept_outputs;
            for spec in specs {
                let ConceptValue::Discrete(alpha) = spec.value else {
                    return Err(Error::usage("binary intervention needs a 0/1 value"));
                };
                if alpha > 1 {
                    return Err(Error::domain(format!("binary value {alpha}")));
                }
                let j = spec.concept_index;
                for row in 0..c_bin.rows() {
                    let w = c_bin.cols();
                    c_bin.values_mut()[row * w + j] = alpha as f64;
                }
                outputs[j] = Tensor::new(vec![c_bin.rows(), 1], vec![alpha as f64; c_bin.rows()])?;
            }
            let y_logits = model.hcbm_logits_from_binarized(&c_bin)?;
            let y_pred = (0..y_logits.rows())
                .map(|i| crate::models::argmax_row(y_logits.row(i)))
                .collect();
            Ok(Predictions {
                z: mu,
                y_logits,
                y_pred,
                concept_outputs: outputs,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    LowestConfidence,
    Random,
}

impl Policy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::LowestConfidence => "lowest_confidence",
            Policy::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub mean_error: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionCurve {
    pub policy: Policy,
    pub n_seeds: usize,
    pub points: Vec<CurvePoint>,
}

impl InterventionCurve {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["policy", "fraction", "mean_error", "std_error", "n_seeds"])?;
        for p in &self.points {
            w.write_record([
                self.policy.as_str().to_string(),
                p.fraction.to_string(),
                p.mean_error.to_string(),
                p.std_error.to_string(),
                self.n_seeds.to_string(),
            ])?;
        }
        w.flush().map_err(std::io::Error::from)?;
        Ok(())
    }
}

/// Confidence of each concept head in its own prediction for one sample;
/// heads without a probability (continuous) read as fully confident and are
/// therefore intervened last.
fn concept_confidence(model: &ModelBundle, outputs: &[Tensor], row: usize) -> Vec<f64> {
    model
        .concept_specs
        .iter()
        .enumerate()
        .map(|(j, spec)| match spec.kind {
            FactorKind::Binary => {
                let p = outputs[j].values()[row];
                p.max(1.0 - p)
            }
            FactorKind::Multiclass(_) => outputs[j]
                .row(row)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
            FactorKind::Continuous => f64::INFINITY,
        })
        .collect()
}

fn ground_truth(values: &FactorValues, i: usize) -> ConceptValue {
    match values {
        FactorValues::Discrete(v) => ConceptValue::Discrete(v[i]),
        FactorValues::Continuous(v) => ConceptValue::Continuous(v[i]),
    }
}

fn error_rate(pred: &[usize], truth: &[usize]) -> f64 {
    let wrong = pred.iter().zip(truth).filter(|(a, b)| a != b).count();
    wrong as f64 / truth.len() as f64
}

/// Test error as ground-truth interventions cover a growing fraction of the
/// intervenable concepts. Fractions refer to the intervenable pool: for the
/// percentile mechanism that is the binary blocks, otherwise all concepts.
/// The random policy redraws its subset per seed; lowest-confidence is
/// deterministic, so its std across seeds is zero.
pub fn intervention_curve(
    model: &ModelBundle,
    test_split: &Dataset,
    policy: Policy,
    fractions: &[f64],
    n_seeds: usize,
    master_seed: u64,
    aux: &InterventionAux,
) -> Result<InterventionCurve> {
    let mechanism = Mechanism::for_variant(model.variant)?;
    if test_split.is_empty() {
        return Err(Error::usage("curve on an empty split"));
    }
    if n_seeds == 0 {
        return Err(Error::usage("curve needs at least one seed"));
    }
    if fractions.is_empty() {
        return Err(Error::usage("curve needs at least one fraction"));
    }
    for pair in fractions.windows(2) {
        if pair[1] < pair[0] {
            return Err(Error::usage("fractions must be sorted ascending"));
        }
    }
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::domain("fractions must lie in [0, 1]"));
    }
    model.check_compatible(test_split)?;

    let pool: Vec<usize> = model
        .concept_specs
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            mechanism != Mechanism::CbmPercentile || s.kind == FactorKind::Binary
        })
        .map(|(j, _)| j)
        .collect();
    if pool.is_empty() {
        return Err(Error::usage("no intervenable concepts"));
    }

    let all: Vec<usize> = (0..test_split.len()).collect();
    let batch = model.make_batch(test_split, &all)?;
    let mu = model.encode_mu(&batch.x)?;
    let base = model.predict_from_latent(&mu)?;
    let n = test_split.len();

    let mut points = Vec::with_capacity(fractions.len());
    for (fi, &fraction) in fractions.iter().enumerate() {
        let k = (fraction * pool.len() as f64).ceil() as usize;
        let k = k.min(pool.len());
        let mut errors = Vec::with_capacity(n_seeds);
        for seed_t in 0..n_seeds {
            let chosen_for = |row: usize, rng_pick: &Option<Vec<usize>>| -> Vec<usize> {
                match policy {
                    Policy::Random => rng_pick.clone().unwrap(),
                    Policy::LowestConfidence => {
                        let conf = concept_confidence(model, &base.concept_outputs, row);
                        let mut order = pool.clone();
                        order.sort_by(|&a, &b| {
                            conf[a].total_cmp(&conf[b]).then(a.cmp(&b))
                        });
                        order.truncate(k);
                        order
                    }
                }
            };
            let rng_pick = match policy {
                Policy::Random => {
                    let mut rng = StreamRng::new(
                        master_seed,
                        &format!("curve/fraction{fi}/seed{seed_t}"),
                    );
                    let mut pick = pool.clone();
                    rng.shuffle(&mut pick);
                    pick.truncate(k);
                    Some(pick)
                }
                Policy::LowestConfidence => None,
            };

            let y_pred = if mechanism == Mechanism::HcbmBinary {
                let mut c_bin = binarize_probs(&concat_cols(&base.concept_outputs)?);
                let w = c_bin.cols();
                for row in 0..n {
                    for j in chosen_for(row, &rng_pick) {
                        let ConceptValue::Discrete(alpha) =
                            ground_truth(&batch.concepts[j], row)
                        else {
                            return Err(Error::usage("binarized concepts must be discrete"));
                        };
                        c_bin.values_mut()[row * w + j] = alpha as f64;
                    }
                }
                let logits = model.hcbm_logits_from_binarized(&c_bin)?;
                (0..n)
                    .map(|i| crate::models::argmax_row(logits.row(i)))
                    .collect::<Vec<_>>()
            } else {
                let mut z = mu.clone();
                for row in 0..n {
                    for j in chosen_for(row, &rng_pick) {
                        let spec = InterventionSpec {
                            concept_index: j,
                            value: ground_truth(&batch.concepts[j], row),
                            mechanism,
                        };
                        let vals = latent_target(model, &spec, aux)?;
                        let range = model.layout.block_range(j)?;
                        write_block(&mut z, row, &range, &vals);
                    }
                }
                model.predict_from_latent(&z)?.y_pred
            };
            errors.push(error_rate(&y_pred, &batch.y));
        }
        // Bitwise-equal errors (deterministic policies) keep their exact
        // value instead of picking up one-ulp averaging artifacts.
        let varied = errors.windows(2).any(|w| w[0] != w[1]);
        let mean = if varied {
            errors.iter().sum::<f64>() / errors.len() as f64
        } else {
            errors[0]
        };
        let std = if varied && errors.len() > 1 {
            let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
                / (errors.len() - 1) as f64;
            var.sqrt()
        } else {
            0.0
        };
        points.push(CurvePoint {
            fraction,
            mean_error: mean,
            std_error: std,
        });
    }
    Ok(InterventionCurve {
        policy,
        n_seeds,
        points,
    })
}

/// ln(p / (1-p)); undefined at the binary extremes, which is the reason the
/// percentile workaround exists.
pub fn sigmoid_inverse(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!(
            "sigmoid inverse undefined at {p}; defined only on (0, 1)"
        )));
    }
    Ok((p / (1.0 - p)).ln())
}

/// Exact Bayes posterior over the latent given a hard binary concept, next
/// to the finite percentile surrogate that intervention practice uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDemo {
    pub z: Vec<f64>,
    pub prior: Vec<f64>,
    pub posterior: Vec<f64>,
    /// Grid arg-max of the posterior density.
    pub mode: f64,
    /// Posterior mass on z > 0.
    pub mass_above_zero: f64,
    /// Finite stand-in for the infinite sigmoid inverse: the prior's 95th
    /// (c=1) or 5th (c=0) percentile on the grid.
    pub surrogate: f64,
    pub mode_surrogate_gap: f64,
    /// Total variation between grid-cell masses of the posterior and a
    /// point surrogate placed in its cell; 1 - (posterior mass in that cell).
    pub tv_distance: f64,
}

fn trapezoid(z: &[f64], f: &[f64]) -> f64 {
    z.windows(2)
        .zip(f.windows(2))
        .map(|(zw, fw)| 0.5 * (fw[0] + fw[1]) * (zw[1] - zw[0]))
        .sum()
}

pub fn bayes_posterior_demo(
    prior: &TwoGaussianMixture,
    c_value: usize,
    grid: (f64, f64, usize),
) -> Result<PosteriorDemo> {
    prior.validate()?;
    if c_value > 1 {
        return Err(Error::domain(format!("binary concept value {c_value}")));
    }
    let (z_min, z_max, n_points) = grid;
    if n_points < 1000 {
        return Err(Error::usage(format!(
            "posterior grid needs at least 1000 points, got {n_points}"
        )));
    }
    if !(z_min < z_max) || !z_min.is_finite() || !z_max.is_finite() {
        return Err(Error::domain(format!("bad grid [{z_min}, {z_max}]")));
    }

    let step = (z_max - z_min) / (n_points - 1) as f64;
    let z: Vec<f64> = (0..n_points).map(|i| z_min + step * i as f64).collect();
    let prior_density: Vec<f64> = z.iter().map(|&zi| prior.density(zi)).collect();
    let covered = trapezoid(&z, &prior_density);
    if covered < 0.999 {
        return Err(Error::domain(format!(
            "grid covers only {covered:.6} of the prior mass; widen [{z_min}, {z_max}]"
        )));
    }

    let likelihood = |zi: f64| {
        let s = crate::diff::sigmoid(zi);
        if c_value == 1 {
            s
        } else {
            1.0 - s
        }
    };
    let unnorm: Vec<f64> = z
        .iter()
        .zip(&prior_density)
        .map(|(&zi, &p)| likelihood(zi) * p)
        .collect();
    let norm = trapezoid(&z, &unnorm);
    if norm <= 0.0 {
        return Err(Error::numeric("posterior normalizer vanished"));
    }
    let posterior: Vec<f64> = unnorm.iter().map(|u| u / norm).collect();
    let total = trapezoid(&z, &posterior);
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::numeric(format!(
            "posterior integrates to {total}, expected 1"
        )));
    }

    let mode_idx = (0..n_points)
        .max_by(|&a, &b| posterior[a].total_cmp(&posterior[b]))
        .unwrap();
    let mode = z[mode_idx];

    let mut mass_above_zero = 0.0;
    for i in 0..n_points - 1 {
        let (z0, z1) = (z[i], z[i + 1]);
        let (p0, p1) = (posterior[i], posterior[i + 1]);
        if z0 >= 0.0 {
            mass_above_zero += 0.5 * (p0 + p1) * (z1 - z0);
        } else if z1 > 0.0 {
            // Cell straddles zero; count the positive part only.
            let t = -z0 / (z1 - z0);
            let p_at_zero = p0 + (p1 - p0) * t;
            mass_above_zero += 0.5 * (p_at_zero + p1) * z1;
        }
    }

    let quantile = if c_value == 1 { 0.95 } else { 0.05 };
    let surrogate = grid_quantile(&z, &prior_density, covered, quantile);

    // Grid-cell masses; the surrogate is all mass in the cell holding it.
    let mut tv = 0.0;
    for i in 0..n_points - 1 {
        let mass = 0.5 * (posterior[i] + posterior[i + 1]) * (z[i + 1] - z[i]);
        if z[i] <= surrogate && surrogate < z[i + 1] {
            tv += (1.0 - mass).abs();
        } else {
            tv += mass;
        }
    }
    let tv_distance = 0.5 * tv;

    Ok(PosteriorDemo {
        mode,
        mass_above_zero,
        surrogate,
        mode_surrogate_gap: (mode - surrogate).abs(),
        tv_distance,
        z,
        prior: prior_density,
        posterior,
    })
}

/// z at which the cumulative (trapezoid) integral of `density` reaches
/// `q` of its grid total, linearly interpolated inside the crossing cell.
fn grid_quantile(z: &[f64], density: &[f64], total: f64, q: f64) -> f64 {
    let target = q * total;
    let mut cum = 0.0;
    for i in 0..z.len() - 1 {
        let mass = 0.5 * (density[i] + density[i + 1]) * (z[i + 1] - z[i]);
        if cum + mass >= target && mass > 0.0 {
            let t = (target - cum) / mass;
            return z[i] + t * (z[i + 1] - z[i]);
        }
        cum += mass;
    }
    z[z.len() - 1]
}

impl PosteriorDemo {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["z", "prior", "posterior"])?;
        for i in 0..self.z.len() {
            w.write_record([
                self.z[i].to_string(),
                self.prior[i].to_string(),
                self.posterior[i].to_string(),
            ])?;
        }
        w.flush().map_err(std::io::Error::from)?;
        Ok(())
    }
}
