//! Mini-batch training loop, evaluation, and model checkpointing.
//!
//! Every random choice (shuffling, init, reparameterization noise) derives
//! from named substreams of one master seed, so a run is a pure function of
//! (data, config, seed). The hard variant trains in two stages: concept
//! heads first, then the task head on frozen binarized concepts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, FactorKind, FactorValues, SplitTag};
use crate::diff::{Checkpoint, OptimizerConfig, OptimizerState, StepScheduler, Tape};
use crate::error::{Error, Result};
use crate::models::{
    binarize_probs, concat_cols, Batch, LossComponents, LossMode, ModelBundle, ModelDescriptor,
    Variant,
};
use crate::rng::StreamRng;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub scheduler: Option<StepScheduler>,
    pub beta: f64,
    pub gamma: f64,
    pub master_seed: u64,
    /// Run train/val evaluation every this many epochs (the last epoch is
    /// always evaluated).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            optimizer: OptimizerConfig::adam(1e-3),
            scheduler: Some(StepScheduler::new(20, 0.1).expect("valid schedule")),
            beta: 1.0,
            gamma: 1.0,
            master_seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::config(format!("{name} = {v} invalid")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub mean_task: f64,
    /// Sum over concept terms, averaged over the epoch's samples.
    pub mean_concept: f64,
    /// Sum over per-block KL terms, averaged likewise.
    pub mean_kl: f64,
    pub train_task_accuracy: Option<f64>,
    pub train_concept_accuracy: Option<f64>,
    pub val_task_accuracy: Option<f64>,
    pub val_concept_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "epoch",
            "lr",
            "mean_loss",
            "mean_task",
            "mean_concept",
            "mean_kl",
            "train_task_accuracy",
            "train_concept_accuracy",
            "val_task_accuracy",
            "val_concept_accuracy",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.lr.to_string(),
                r.mean_loss.to_string(),
                r.mean_task.to_string(),
                r.mean_concept.to_string(),
                r.mean_kl.to_string(),
                opt(r.train_task_accuracy),
                opt(r.train_concept_accuracy),
                opt(r.val_task_accuracy),
                opt(r.val_concept_accuracy),
            ])?;
        }
        w.flush().map_err(std::io::Error::from)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub task_accuracy: f64,
    /// Per model concept; None for continuous concepts, which have no
    /// accuracy notion (see concept_mse).
    pub concept_accuracy: Vec<Option<f64>>,
    pub concept_mse: Vec<Option<f64>>,
    /// Mean over the concepts that have an accuracy.
    pub mean_concept_accuracy: Option<f64>,
    pub loss: LossComponents,
}

const EVAL_CHUNK: usize = 1024;

/// Deterministic forward evaluation: the latent sits at its mean and no RNG
/// is consumed, so repeated calls give identical reports.
pub fn evaluate(model: &ModelBundle, split: &Dataset) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::usage("evaluate on an empty split"));
    }
    model.check_compatible(split)?;
    let n = split.len();
    let m = model.concept_specs.len();
    let mut task_hits = 0usize;
    let mut concept_hits = vec![0usize; m];
    let mut concept_sq = vec![0.0; m];
    let mut loss = LossComponents {
        concept: vec![0.0; m],
        kl: Vec::new(),
        ..LossComponents::default()
    };
    if model.variant == Variant::Mcbm {
        loss.kl = vec![0.0; m];
    }

    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let batch = model.make_batch(split, chunk)?;
        let preds = model.predict(&batch.x)?;
        task_hits += preds
            .y_pred
            .iter()
            .zip(&batch.y)
            .filter(|(a, b)| a == b)
            .count();
        for (j, spec) in model.concept_specs.iter().enumerate() {
            let out = &preds.concept_outputs[j];
            match (spec.kind, &batch.concepts[j]) {
                (FactorKind::Binary, FactorValues::Discrete(labels)) => {
                    for (i, &c) in labels.iter().enumerate() {
                        let hat = usize::from(out.values()[i] >= 0.5);
                        concept_hits[j] += usize::from(hat == c);
                    }
                }
                (FactorKind::Multiclass(_), FactorValues::Discrete(labels)) => {
                    for (i, &c) in labels.iter().enumerate() {
                        concept_hits[j] += usize::from(crate::models::argmax_row(out.row(i)) == c);
                    }
                }
                (FactorKind::Continuous, FactorValues::Continuous(values)) => {
                    for (i, &c) in values.iter().enumerate() {
                        let d = out.values()[i] - c;
                        concept_sq[j] += d * d;
                    }
                }
                _ => return Err(Error::dim("concept values disagree with spec kind")),
            }
        }
        let mut tape = Tape::new();
        let (_, parts) = model.loss_total(&mut tape, &batch, LossMode::Deterministic)?;
        let w = chunk.len() as f64;
        loss.total += parts.total * w;
        loss.task += parts.task * w;
        for j in 0..m {
            loss.concept[j] += parts.concept[j] * w;
        }
        for (acc, v) in loss.kl.iter_mut().zip(&parts.kl) {
            *acc += v * w;
        }
    }

    let nf = n as f64;
    loss.total /= nf;
    loss.task /= nf;
    for v in loss.concept.iter_mut().chain(loss.kl.iter_mut()) {
        *v /= nf;
    }
    let mut concept_accuracy = Vec::with_capacity(m);
    let mut concept_mse = Vec::with_capacity(m);
    for (j, spec) in model.concept_specs.iter().enumerate() {
        if spec.kind == FactorKind::Continuous {
            concept_accuracy.push(None);
            concept_mse.push(Some(concept_sq[j] / nf));
        } else {
            concept_accuracy.push(Some(concept_hits[j] as f64 / nf));
            concept_mse.push(None);
        }
    }
    let with_acc: Vec<f64> = concept_accuracy.iter().flatten().copied().collect();
    let mean_concept_accuracy = if with_acc.is_empty() {
        None
    } else {
        Some(with_acc.iter().sum::<f64>() / with_acc.len() as f64)
    };
    Ok(EvalReport {
        n,
        task_accuracy: task_hits as f64 / nf,
        concept_accuracy,
        concept_mse,
        mean_concept_accuracy,
        loss,
    })
}

fn apply_weights(model: &mut ModelBundle, beta: f64, gamma: f64) -> Result<()> {
    match model.variant {
        Variant::Vm => {
            if beta != 0.0 || gamma != 0.0 {
                return Err(Error::config(
                    "vanilla model trains with beta = gamma = 0",
                ));
            }
        }
        Variant::Cbm | Variant::Hcbm => {
            if gamma != 0.0 {
                return Err(Error::config(
                    "deterministic encoder: gamma must be 0",
                ));
            }
        }
        Variant::Mcbm => {}
    }
    model.beta = beta;
    model.gamma = gamma;
    Ok(())
}

fn check_split_role(split: &Dataset, wanted: &str) -> Result<()> {
    if split.split_tag == SplitTag::Test {
        return Err(Error::usage(format!(
            "refusing to use the test split as the {wanted} set"
        )));
    }
    Ok(())
}

struct EpochStats {
    samples: f64,
    loss: f64,
    task: f64,
    concept: f64,
    kl: f64,
}

impl EpochStats {
    fn new() -> EpochStats {
        EpochStats {
            samples: 0.0,
            loss: 0.0,
            task: 0.0,
            concept: 0.0,
            kl: 0.0,
        }
    }

    fn add(&mut self, parts: &LossComponents, batch_len: usize) {
        let w = batch_len as f64;
        self.samples += w;
        self.loss += parts.total * w;
        self.task += parts.task * w;
        self.concept += parts.concept.iter().sum::<f64>() * w;
        self.kl += parts.kl.iter().sum::<f64>() * w;
    }
}

/// Shuffled mini-batch gradient descent on the variant's objective; returns
/// the trained model and one history record per executed epoch. The hard
/// variant appends a second stage of equally many epochs for its task head.
pub fn train(
    mut model: ModelBundle,
    train_split: &Dataset,
    val_split: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(ModelBundle, TrainHistory)> {
    config.validate()?;
    check_split_role(train_split, "training")?;
    if let Some(v) = val_split {
        check_split_role(v, "validation")?;
        model.check_compatible(v)?;
    }
    model.check_compatible(train_split)?;
    if train_split.is_empty() {
        return Err(Error::usage("training split is empty"));
    }
    apply_weights(&mut model, config.beta, config.gamma)?;

    let mut opt = OptimizerState::new(config.optimizer.clone(), &model.store);
    let mut history = TrainHistory::default();
    let n = train_split.len();
    let base_lr = config.optimizer.learning_rate;

    let stages: &[&str] = if model.variant == Variant::Hcbm {
        &["concepts", "task"]
    } else {
        &["main"]
    };
    for (stage_idx, stage) in stages.iter().enumerate() {
        for epoch in 1..=config.epochs {
            let lr = match &config.scheduler {
                Some(s) => s.lr_at(base_lr, epoch - 1),
                None => base_lr,
            };
            let mut order: Vec<usize> = (0..n).collect();
            StreamRng::new(
                config.master_seed,
                &format!("shuffle/{stage}/epoch{epoch}"),
            )
            .shuffle(&mut order);
            let mut reparam = StreamRng::new(
                config.master_seed,
                &format!("reparam/{stage}/epoch{epoch}"),
            );

            let mut stats = EpochStats::new();
            for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
                let batch = model.make_batch(train_split, chunk)?;
                let parts = if *stage == "task" {
                    hcbm_task_step(&mut model, &mut opt, &batch, lr)?
                } else {
                    let mut tape = Tape::new();
                    let (loss, parts) =
                        model.loss_total(&mut tape, &batch, LossMode::Sample(&mut reparam))?;
                    if !parts.total.is_finite() {
                        return Err(Error::numeric(format!(
                            "non-finite loss {} at stage {stage}, epoch {epoch}, batch {bi}",
                            parts.total
                        )));
                    }
                    model.store.zero_grad();
                    tape.backward(loss, &mut model.store)?;
                    opt.step(&mut model.store, lr);
                    parts
                };
                if !parts.total.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite loss {} at stage {stage}, epoch {epoch}, batch {bi}",
                        parts.total
                    )));
                }
                stats.add(&parts, chunk.len());
            }

            let mut record = EpochRecord {
                epoch: stage_idx * config.epochs + epoch,
                lr,
                mean_loss: stats.loss / stats.samples,
                mean_task: stats.task / stats.samples,
                mean_concept: stats.concept / stats.samples,
                mean_kl: stats.kl / stats.samples,
                train_task_accuracy: None,
                train_concept_accuracy: None,
                val_task_accuracy: None,
                val_concept_accuracy: None,
            };
            if epoch % config.eval_every == 0 || epoch == config.epochs {
                let tr = evaluate(&model, train_split)?;
                record.train_task_accuracy = Some(tr.task_accuracy);
                record.train_concept_accuracy = tr.mean_concept_accuracy;
                if let Some(v) = val_split {
                    let va = evaluate(&model, v)?;
                    record.val_task_accuracy = Some(va.task_accuracy);
                    record.val_concept_accuracy = va.mean_concept_accuracy;
                }
            }
            history.records.push(record);
        }
    }
    Ok((model, history))
}

/// One stage-two step for the hard variant: cross-entropy of the task head
/// on frozen binarized concept predictions.
fn hcbm_task_step(
    model: &mut ModelBundle,
    opt: &mut OptimizerState,
    batch: &Batch,
    lr: f64,
) -> Result<LossComponents> {
    let mu = model.encode_mu(&batch.x)?;
    let c_prob = concat_cols(&model.concept_outputs_from_latent(&mu)?)?;
    let c_bin = binarize_probs(&c_prob);
    let mut tape = Tape::new();
    let loss = model.hcbm_task_loss(&mut tape, &c_bin, &batch.y)?;
    let total = tape.scalar_value(loss)?;
    model.store.zero_grad();
    tape.backward(loss, &mut model.store)?;
    opt.step(&mut model.store, lr);
    Ok(LossComponents {
        total,
        task: total,
        concept: Vec::new(),
        kl: Vec::new(),
    })
}

pub fn save_checkpoint(
    model: &ModelBundle,
    history: Option<&TrainHistory>,
    path: &Path,
) -> Result<()> {
    let extra = serde_json::json!({
        "model": model.descriptor(),
        "history": history,
    });
    Checkpoint::capture(&model.store, None, extra).write(path)
}

/// Rebuilds the model from a checkpoint; `expect` guards against loading one
/// variant's weights into another's analysis path.
pub fn load_checkpoint(
    path: &Path,
    expect: Option<Variant>,
) -> Result<(ModelBundle, Option<TrainHistory>)> {
    let ck = Checkpoint::read(path)?;
    let desc_value = ck
        .extra
        .get("model")
        .cloned()
        .ok_or_else(|| Error::checkpoint("checkpoint has no model descriptor"))?;
    let desc: ModelDescriptor = serde_json::from_value(desc_value)?;
    if let Some(want) = expect {
        if desc.variant != want {
            return Err(Error::checkpoint(format!(
                "checkpoint holds a {} model, expected {}",
                desc.variant.as_str(),
                want.as_str()
            )));
        }
    }
    let mut model = ModelBundle::from_descriptor(&desc, ck.master_seed)?;
    ck.apply_params(&mut model.store)?;
    let history = match ck.extra.get("history") {
        None | Some(serde_json::Value::Null) => None,
        Some(h) => Some(serde_json::from_value(h.clone())?),
    };
    Ok((model, history))
}

/// Mean squared difference between two parameter stores with equal layouts;
/// handy for asserting what a training stage did or did not touch.
pub fn param_distance(a: &ModelBundle, b: &ModelBundle) -> Result<f64> {
    if a.param_count() != b.param_count() {
        return Err(Error::dim("models have different parameter counts"));
    }
    let mut acc = 0.0;
    for id in a.store.ids() {
        let name = a.store.name(id);
        let other = b
            .store
            .id_by_name(name)
            .ok_or_else(|| Error::dim(format!("missing parameter {name}")))?;
        let xs = a.store.tensor(id).values();
        let ys = b.store.tensor(other).values();
        if xs.len() != ys.len() {
            return Err(Error::dim(format!("parameter {name} changed shape")));
        }
        acc += xs
            .iter()
            .zip(ys)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    Ok(acc / a.param_count() as f64)
}
