//! Calibration of the concept layer read as a classifier.
//!
//! One-vs-rest sigmoid heads score each class independently, so their outputs
//! are not a distribution: several classes can look near-certain at once and
//! the scores can sum to anything in `[0, k]`. A single softmax head cannot
//! misbehave this way. This module extracts the per-class probabilities each
//! variant exposes and summarizes how far the rows stray from one.

use std::path::Path;

use crate::datagen::FactorKind;
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::models::{argmax_row, concat_cols, softmax_rows, ModelBundle, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationPoint {
    pub x: Vec<f64>,
    /// Argmax of the per-class probabilities (not the task head).
    pub predicted: usize,
    pub top1: f64,
    pub top2: f64,
    pub prob_sum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationReport {
    pub variant: Variant,
    pub points: Vec<CalibrationPoint>,
}

/// Per-class probability matrix `[B, n_classes]`.
///
/// Sigmoid-head variants concatenate their one-vs-rest outputs (before any
/// binarization), so each row is `k` independent probabilities. The softmax
/// variants return proper distributions: the trained multiclass concept head
/// for the bottleneck-with-targets variant, the task head for vanilla.
pub fn class_probabilities(model: &ModelBundle, x: &Tensor) -> Result<Tensor> {
    let pred = model.predict(x)?;
    match model.variant {
        Variant::Vm => Ok(softmax_rows(&pred.y_logits)),
        Variant::Cbm | Variant::Hcbm => {
            let all_binary = model
                .concept_specs
                .iter()
                .all(|s| s.kind == FactorKind::Binary);
            if !all_binary || model.concept_specs.len() != model.n_classes {
                return Err(Error::usage(format!(
                    "per-class probabilities need {} binary concepts, got {:?}",
                    model.n_classes,
                    model
                        .concept_specs
                        .iter()
                        .map(|s| s.kind)
                        .collect::<Vec<_>>()
                )));
            }
            concat_cols(&pred.concept_outputs)
        }
        Variant::Mcbm => {
            if model.concept_specs.len() != 1
                || model.concept_specs[0].kind != FactorKind::Multiclass(model.n_classes)
            {
                return Err(Error::usage(format!(
                    "per-class probabilities need one {}-class concept, got {:?}",
                    model.n_classes,
                    model
                        .concept_specs
                        .iter()
                        .map(|s| s.kind)
                        .collect::<Vec<_>>()
                )));
            }
            Ok(pred.concept_outputs.into_iter().next().unwrap())
        }
    }
}

/// Row-major `steps x steps` grid of 2-D inputs covering `[lo, hi]` on both
/// axes, for heat-map style reports away from the data manifold.
pub fn dense_grid(lo: f64, hi: f64, steps: usize) -> Result<Tensor> {
    if !(hi > lo) || steps < 2 {
        return Err(Error::usage(format!(
            "grid needs hi > lo and steps >= 2, got [{lo}, {hi}] x {steps}"
        )));
    }
    let coord = |i: usize| lo + (hi - lo) * i as f64 / (steps - 1) as f64;
    let mut data = Vec::with_capacity(steps * steps * 2);
    for iy in 0..steps {
        for ix in 0..steps {
            data.push(coord(ix));
            data.push(coord(iy));
        }
    }
    Tensor::new(vec![steps * steps, 2], data)
}

pub fn calibration_report(model: &ModelBundle, x: &Tensor) -> Result<CalibrationReport> {
    let p = class_probabilities(model, x)?;
    let mut points = Vec::with_capacity(p.rows());
    for i in 0..p.rows() {
        let row = p.row(i);
        let predicted = argmax_row(row);
        let mut top1 = f64::NEG_INFINITY;
        let mut top2 = f64::NEG_INFINITY;
        for &v in row {
            if v > top1 {
                top2 = top1;
                top1 = v;
            } else if v > top2 {
                top2 = v;
            }
        }
        points.push(CalibrationPoint {
            x: x.row(i).to_vec(),
            predicted,
            top1,
            top2,
            prob_sum: row.iter().sum(),
        });
    }
    Ok(CalibrationReport {
        variant: model.variant,
        points,
    })
}

impl CalibrationReport {
    /// Fraction of points whose probabilities sum further than `delta` from 1.
    pub fn fraction_sum_off_by(&self, delta: f64) -> f64 {
        self.fraction(|p| (p.prob_sum - 1.0).abs() > delta)
    }

    /// Fraction of points whose second-best class still scores above `t`.
    pub fn fraction_top2_above(&self, t: f64) -> f64 {
        self.fraction(|p| p.top2 > t)
    }

    pub fn max_abs_sum_error(&self) -> f64 {
        self.points
            .iter()
            .map(|p| (p.prob_sum - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn fraction(&self, pred: impl Fn(&CalibrationPoint) -> bool) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().filter(|p| pred(p)).count() as f64 / self.points.len() as f64
    }

    /// One row per point: x0..x{D-1}, predicted, top1, top2, prob_sum.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.points.first().map_or(0, |p| p.x.len());
        let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        header.extend(["predicted", "top1", "top2", "prob_sum"].map(String::from));
        w.write_record(&header)?;
        for p in &self.points {
            let mut rec: Vec<String> = p.x.iter().map(|v| v.to_string()).collect();
            rec.push(p.predicted.to_string());
            rec.push(p.top1.to_string());
            rec.push(p.top2.to_string());
            rec.push(p.prob_sum.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, BuildOptions, ConceptSpec, Variant};
    use crate::rng::StreamRng;
    use rand::Rng;

    fn inputs(n: usize, d: usize) -> Tensor {
        let mut rng = StreamRng::new(33, "calib/x");
        Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    fn one_vs_rest_specs(k: usize) -> Vec<ConceptSpec> {
        (0..k)
            .map(|i| ConceptSpec::new(&format!("arm=={i}"), FactorKind::Binary))
            .collect()
    }

    #[test]
    fn sigmoid_head_sums_are_unconstrained() {
        let model = build_model(
            Variant::Cbm,
            &one_vs_rest_specs(4),
            2,
            4,
            &[16],
            &[],
            7,
            &BuildOptions {
                gamma: 0.0,
                ..BuildOptions::default()
            },
        )
        .unwrap();
        let report = calibration_report(&model, &inputs(200, 2)).unwrap();
        // Untrained sigmoids hover near 0.5, so four of them sum near 2.
        let mean: f64 =
            report.points.iter().map(|p| p.prob_sum).sum::<f64>() / report.points.len() as f64;
        assert!((mean - 2.0).abs() < 0.5, "mean sum {mean}");
        assert!(report.fraction_sum_off_by(0.2) > 0.9);
    }

    #[test]
    fn softmax_head_sums_to_one() {
        let model = build_model(
            Variant::Mcbm,
            &[ConceptSpec::new("arm", FactorKind::Multiclass(4))],
            2,
            4,
            &[16],
            &[],
            7,
            &BuildOptions::default(),
        )
        .unwrap();
        let report = calibration_report(&model, &inputs(200, 2)).unwrap();
        assert!(report.max_abs_sum_error() < 1e-12);
        assert_eq!(report.fraction_sum_off_by(1e-12), 0.0);
        for p in &report.points {
            assert!(p.top1 >= p.top2);
            assert!(p.top2 >= 0.0);
        }
    }

    #[test]
    fn vanilla_uses_the_task_softmax() {
        let model = build_model(
            Variant::Vm,
            &[],
            2,
            4,
            &[8],
            &[],
            3,
            &BuildOptions {
                beta: 0.0,
                gamma: 0.0,
                vm_total_dim: Some(6),
                ..BuildOptions::default()
            },
        )
        .unwrap();
        let report = calibration_report(&model, &inputs(50, 2)).unwrap();
        assert!(report.max_abs_sum_error() < 1e-12);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        // 3 binary concepts cannot cover 4 classes.
        let model = build_model(
            Variant::Cbm,
            &one_vs_rest_specs(3),
            2,
            4,
            &[8],
            &[],
            3,
            &BuildOptions {
                gamma: 0.0,
                ..BuildOptions::default()
            },
        )
        .unwrap();
        assert!(class_probabilities(&model, &inputs(10, 2)).is_err());
    }

    #[test]
    fn grid_spans_the_box_in_row_major_order() {
        let g = dense_grid(-1.0, 1.0, 3).unwrap();
        assert_eq!(g.shape(), &[9, 2]);
        assert_eq!(g.row(0), &[-1.0, -1.0]);
        assert_eq!(g.row(1), &[0.0, -1.0]);
        assert_eq!(g.row(8), &[1.0, 1.0]);
        assert!(dense_grid(1.0, -1.0, 3).is_err());
        assert!(dense_grid(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn report_round_trips_through_csv() {
        let model = build_model(
            Variant::Mcbm,
            &[ConceptSpec::new("arm", FactorKind::Multiclass(3))],
            2,
            3,
            &[8],
            &[],
            5,
            &BuildOptions::default(),
        )
        .unwrap();
        let report = calibration_report(&model, &inputs(20, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calibration.csv");
        report.write_csv(&path).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        let header = r.headers().unwrap().clone();
        assert_eq!(
            header.iter().collect::<Vec<_>>(),
            ["x0", "x1", "predicted", "top1", "top2", "prob_sum"]
        );
        let rows: Vec<csv::StringRecord> = r.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 20);
        for (rec, p) in rows.iter().zip(&report.points) {
            assert_eq!(rec[0].parse::<f64>().unwrap().to_bits(), p.x[0].to_bits());
            assert_eq!(
                rec[5].parse::<f64>().unwrap().to_bits(),
                p.prob_sum.to_bits()
            );
        }
    }
}
