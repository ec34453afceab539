//! Model bundles: encoder, task head, concept heads, representation targets,
//! and per-variant loss assembly.
//!
//! Four variants share one structure. The vanilla model (VM) trains the task
//! head only. CBM adds per-concept heads on dedicated latent blocks with a
//! deterministic encoder. The minimal variant (MCBM) samples the latent
//! through the reparameterization trick and regularizes each block's mean
//! toward a fixed per-concept target with a KL term. The hard variant (HCBM)
//! thresholds concept probabilities and predicts the task from the binary
//! vector alone, trained in two stages because no gradient crosses the
//! threshold.

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, FactorKind, FactorValues};
use crate::diff::{sigmoid, softmax_in_place, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::mlp::Mlp;
use crate::models::spec::{expand_one_vs_rest, ConceptSpec, LatentLayout};
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Vm,
    Cbm,
    Mcbm,
    Hcbm,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Vm => "vm",
            Variant::Cbm => "cbm",
            Variant::Mcbm => "mcbm",
            Variant::Hcbm => "hcbm",
        }
    }
}

/// Hidden width of trainable binary/continuous concept heads; k-class heads
/// use width k.
const CONCEPT_HEAD_HIDDEN: usize = 8;
/// Hidden width of the optional learned representation heads.
const REPR_HEAD_HIDDEN: usize = 3;

#[derive(Clone, Debug)]
pub enum ConceptHead {
    /// sigma(z_j), parameter-free; its invertibility is what percentile
    /// interventions rely on.
    SigmoidDirect,
    /// z_j itself, scored by squared error.
    IdentityDirect,
    /// One-hidden-layer network on z_j with a kind-specific output.
    Trained(Mlp),
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Replace the fixed representation-target rules with small trained
    /// heads (one hidden layer of width 3). Off by default; the fixed rules
    /// are the primary formulation.
    pub learned_repr_heads: bool,
    /// Latent width for a vanilla model built without concept specs.
    pub vm_total_dim: Option<usize>,
}

impl Default for BuildOptions {
    fn default() -> BuildOptions {
        BuildOptions {
            beta: 1.0,
            gamma: 1.0,
            lambda: 3.0,
            learned_repr_heads: false,
            vm_total_dim: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub variant: Variant,
    /// Concept specs after any one-vs-rest expansion.
    pub concept_specs: Vec<ConceptSpec>,
    /// For each spec: (index of the source concept, Some(class) when this is
    /// a one-vs-rest slice of a multiclass concept).
    pub concept_sources: Vec<(usize, Option<usize>)>,
    pub layout: LatentLayout,
    pub input_dim: usize,
    pub n_classes: usize,
    pub encoder_hidden: Vec<usize>,
    pub task_hidden: Vec<usize>,
    pub store: ParamStore,
    pub encoder: Mlp,
    pub task_head: Mlp,
    pub concept_heads: Vec<ConceptHead>,
    pub repr_heads: Vec<Option<Mlp>>,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub sigma_x: f64,
    pub sigma_z_hat: f64,
    /// Fixed unit variances of the continuous heads; with value 1 their
    /// negative log-likelihoods reduce to squared error up to constants.
    pub sigma_y_hat: f64,
    pub sigma_c_hat: f64,
    pub expansion_note: Option<String>,
}

/// Serializable shape of a bundle; together with a parameter checkpoint it
/// reconstructs the model exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub variant: Variant,
    pub concept_specs: Vec<ConceptSpec>,
    pub concept_sources: Vec<(usize, Option<usize>)>,
    pub total_dim: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    pub encoder_hidden: Vec<usize>,
    pub task_hidden: Vec<usize>,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub sigma_x: f64,
    pub sigma_z_hat: f64,
    pub sigma_y_hat: f64,
    pub sigma_c_hat: f64,
    pub learned_repr_heads: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expansion_note: Option<String>,
}

/// Mean of the latent-block prior implied by a concept value: +-lambda for
/// binary, lambda * one_hot for multiclass, lambda * value for continuous.
/// Distinct discrete values land at least lambda apart, which is what makes
/// interventions identifiable.
pub fn representation_target(
    kind: FactorKind,
    discrete: usize,
    continuous: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    match kind {
        FactorKind::Binary => {
            if discrete > 1 {
                return Err(Error::domain(format!("binary concept value {discrete}")));
            }
            Ok(vec![if discrete == 1 { lambda } else { -lambda }])
        }
        FactorKind::Multiclass(k) => {
            if discrete >= k {
                return Err(Error::domain(format!(
                    "class {discrete} out of range for {k}-class concept"
                )));
            }
            let mut v = vec![0.0; k];
            v[discrete] = lambda;
            Ok(v)
        }
        FactorKind::Continuous => Ok(vec![lambda * continuous]),
    }
}

/// Input embedding for the learned representation heads: the same encoding
/// the fixed rules are defined on.
fn concept_embedding(kind: FactorKind, discrete: usize, continuous: f64) -> Vec<f64> {
    match kind {
        FactorKind::Binary => vec![if discrete == 1 { 1.0 } else { -1.0 }],
        FactorKind::Multiclass(k) => {
            let mut v = vec![0.0; k];
            v[discrete] = 1.0;
            v
        }
        FactorKind::Continuous => vec![continuous],
    }
}

fn concept_embed_dim(kind: FactorKind) -> usize {
    match kind {
        FactorKind::Binary | FactorKind::Continuous => 1,
        FactorKind::Multiclass(k) => k,
    }
}

pub fn build_model(
    variant: Variant,
    concept_specs: &[ConceptSpec],
    input_dim: usize,
    n_classes: usize,
    encoder_hidden: &[usize],
    task_hidden: &[usize],
    seed: u64,
    opts: &BuildOptions,
) -> Result<ModelBundle> {
    if n_classes < 2 {
        return Err(Error::config("task needs at least 2 classes"));
    }
    if input_dim == 0 {
        return Err(Error::config("input_dim must be positive"));
    }
    for v in [opts.beta, opts.gamma] {
        if v < 0.0 || !v.is_finite() {
            return Err(Error::config(format!("loss weight {v} invalid")));
        }
    }
    if opts.lambda <= 0.0 || !opts.lambda.is_finite() {
        return Err(Error::config(format!("lambda {} invalid", opts.lambda)));
    }

    let (expanded, sources, note) = match variant {
        Variant::Vm => (Vec::new(), Vec::new(), None),
        Variant::Cbm | Variant::Hcbm => {
            let (e, s) = expand_one_vs_rest(concept_specs);
            let note = (e.len() != concept_specs.len()).then(|| {
                format!(
                    "one-vs-rest expansion: {} concepts became {} binary slices",
                    concept_specs.len(),
                    e.len()
                )
            });
            (e, s, note)
        }
        Variant::Mcbm => {
            let s = (0..concept_specs.len()).map(|i| (i, None)).collect();
            (concept_specs.to_vec(), s, None)
        }
    };

    if variant != Variant::Vm && expanded.is_empty() {
        return Err(Error::config(format!(
            "{} needs at least one concept",
            variant.as_str()
        )));
    }
    if variant == Variant::Hcbm
        && expanded.iter().any(|s| s.kind != FactorKind::Binary)
    {
        return Err(Error::config(
            "hard-threshold concepts must be binary; drop or pre-discretize continuous concepts",
        ));
    }
    if variant == Variant::Vm && (opts.beta != 0.0 || opts.gamma != 0.0) {
        return Err(Error::config(
            "vanilla model has no concept or kl loss terms; set beta = gamma = 0",
        ));
    }
    if matches!(variant, Variant::Cbm | Variant::Hcbm) && opts.gamma != 0.0 {
        return Err(Error::config(format!(
            "{} has a deterministic encoder (sigma_x = 0); the kl term is undefined, set gamma = 0",
            variant.as_str()
        )));
    }

    let layout = if variant == Variant::Vm {
        let total = match opts.vm_total_dim {
            Some(d) if d > 0 => d,
            Some(_) => return Err(Error::config("vm_total_dim must be positive")),
            None => {
                let d = LatentLayout::from_specs(concept_specs).total_dim;
                if d == 0 {
                    return Err(Error::config(
                        "vanilla model needs vm_total_dim or concept specs to size its latent",
                    ));
                }
                d
            }
        };
        LatentLayout::unstructured(total)
    } else {
        LatentLayout::from_specs(&expanded)
    };

    let sigma_x = if variant == Variant::Mcbm { 1.0 } else { 0.0 };

    let desc = ModelDescriptor {
        variant,
        concept_specs: expanded,
        concept_sources: sources,
        total_dim: layout.total_dim,
        input_dim,
        n_classes,
        encoder_hidden: encoder_hidden.to_vec(),
        task_hidden: task_hidden.to_vec(),
        beta: opts.beta,
        gamma: opts.gamma,
        lambda: opts.lambda,
        sigma_x,
        sigma_z_hat: 1.0,
        sigma_y_hat: 1.0,
        sigma_c_hat: 1.0,
        learned_repr_heads: opts.learned_repr_heads,
        expansion_note: note,
    };
    ModelBundle::from_descriptor(&desc, seed)
}

impl ModelBundle {
    pub fn descriptor(&self) -> ModelDescriptor {
        ModelDescriptor {
            variant: self.variant,
            concept_specs: self.concept_specs.clone(),
            concept_sources: self.concept_sources.clone(),
            total_dim: self.layout.total_dim,
            input_dim: self.input_dim,
            n_classes: self.n_classes,
            encoder_hidden: self.encoder_hidden.clone(),
            task_hidden: self.task_hidden.clone(),
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
            sigma_x: self.sigma_x,
            sigma_z_hat: self.sigma_z_hat,
            sigma_y_hat: self.sigma_y_hat,
            sigma_c_hat: self.sigma_c_hat,
            learned_repr_heads: self.repr_heads.iter().any(Option::is_some),
            expansion_note: self.expansion_note.clone(),
        }
    }

    /// Rebuilds the structure with fresh (seed, name)-deterministic
    /// parameters; checkpoint application then restores trained values.
    pub fn from_descriptor(desc: &ModelDescriptor, seed: u64) -> Result<ModelBundle> {
        let layout = if desc.variant == Variant::Vm {
            LatentLayout::unstructured(desc.total_dim)
        } else {
            LatentLayout::from_specs(&desc.concept_specs)
        };
        if layout.total_dim != desc.total_dim {
            return Err(Error::checkpoint(format!(
                "descriptor total_dim {} does not match its specs ({})",
                desc.total_dim, layout.total_dim
            )));
        }
        if desc.gamma > 0.0 && desc.sigma_x == 0.0 {
            return Err(Error::config(
                "kl weight positive but sigma_x = 0: the kl term is undefined for a point mass",
            ));
        }

        let mut store = ParamStore::new(seed);
        let mut enc_dims = vec![desc.input_dim];
        enc_dims.extend_from_slice(&desc.encoder_hidden);
        enc_dims.push(layout.total_dim);
        let encoder = Mlp::new(&mut store, "encoder", &enc_dims)?;

        // The hard variant predicts the task from binarized concepts, not
        // from the latent itself.
        let task_input = layout.total_dim;
        let mut task_dims = vec![task_input];
        task_dims.extend_from_slice(&desc.task_hidden);
        task_dims.push(desc.n_classes);
        let task_head = Mlp::new(&mut store, "task_head", &task_dims)?;

        let mut concept_heads = Vec::new();
        let mut repr_heads = Vec::new();
        for (j, spec) in desc.concept_specs.iter().enumerate() {
            let head = match desc.variant {
                Variant::Vm => unreachable!("vanilla model has no concept specs"),
                Variant::Cbm | Variant::Hcbm => match spec.kind {
                    FactorKind::Binary => ConceptHead::SigmoidDirect,
                    FactorKind::Continuous => ConceptHead::IdentityDirect,
                    FactorKind::Multiclass(_) => {
                        return Err(Error::config(
                            "multiclass concepts must be one-vs-rest expanded here",
                        ))
                    }
                },
                Variant::Mcbm => {
                    let dims = match spec.kind {
                        FactorKind::Binary | FactorKind::Continuous => {
                            vec![1, CONCEPT_HEAD_HIDDEN, 1]
                        }
                        FactorKind::Multiclass(k) => vec![k, k, k],
                    };
                    ConceptHead::Trained(Mlp::new(&mut store, &format!("concept_head{j}"), &dims)?)
                }
            };
            concept_heads.push(head);
            if desc.learned_repr_heads && desc.variant == Variant::Mcbm {
                let dims = vec![
                    concept_embed_dim(spec.kind),
                    REPR_HEAD_HIDDEN,
                    spec.block_dim(),
                ];
                repr_heads.push(Some(Mlp::new(&mut store, &format!("repr_head{j}"), &dims)?));
            } else {
                repr_heads.push(None);
            }
        }

        Ok(ModelBundle {
            variant: desc.variant,
            concept_specs: desc.concept_specs.clone(),
            concept_sources: desc.concept_sources.clone(),
            layout,
            input_dim: desc.input_dim,
            n_classes: desc.n_classes,
            encoder_hidden: desc.encoder_hidden.clone(),
            task_hidden: desc.task_hidden.clone(),
            store,
            encoder,
            task_head,
            concept_heads,
            repr_heads,
            beta: desc.beta,
            gamma: desc.gamma,
            lambda: desc.lambda,
            sigma_x: desc.sigma_x,
            sigma_z_hat: desc.sigma_z_hat,
            sigma_y_hat: desc.sigma_y_hat,
            sigma_c_hat: desc.sigma_c_hat,
            expansion_note: desc.expansion_note.clone(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.value_count()
    }

    /// Checks that a dataset can feed this model: input width and concept
    /// kinds must line up with the sources each spec was derived from.
    pub fn check_compatible(&self, ds: &Dataset) -> Result<()> {
        if ds.input_dim() != self.input_dim {
            return Err(Error::dim(format!(
                "dataset inputs have {} columns, model expects {}",
                ds.input_dim(),
                self.input_dim
            )));
        }
        if ds.n_labels != self.n_classes {
            return Err(Error::dim(format!(
                "dataset has {} labels, model predicts {}",
                ds.n_labels, self.n_classes
            )));
        }
        let columns = ds.concept_columns();
        for (spec, (src, ovr)) in self.concept_specs.iter().zip(&self.concept_sources) {
            let col = columns.get(*src).ok_or_else(|| {
                Error::dim(format!(
                    "model concept {:?} refers to dataset concept {src}, but only {} exist",
                    spec.name,
                    columns.len()
                ))
            })?;
            match ovr {
                Some(class) => {
                    let FactorKind::Multiclass(k) = col.spec.kind else {
                        return Err(Error::dim(format!(
                            "one-vs-rest slice {:?} needs a multiclass source",
                            spec.name
                        )));
                    };
                    if *class >= k {
                        return Err(Error::dim(format!(
                            "one-vs-rest class {class} out of range for {k}-class {:?}",
                            col.spec.name
                        )));
                    }
                }
                None => {
                    if col.spec.kind != spec.kind {
                        return Err(Error::dim(format!(
                            "concept {:?} is {:?} in the dataset but {:?} in the model",
                            spec.name, col.spec.kind, spec.kind
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Gathers the rows at `indices` into a training batch, mapping dataset
    /// concepts into the model's (possibly one-vs-rest expanded) concept
    /// values.
    pub fn make_batch(&self, ds: &Dataset, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        let d = ds.input_dim();
        let mut x = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            x.extend_from_slice(ds.x_row(i));
        }
        let y: Vec<usize> = indices.iter().map(|&i| ds.y[i]).collect();
        let columns = ds.concept_columns();
        let mut concepts = Vec::with_capacity(self.concept_specs.len());
        for (src, ovr) in &self.concept_sources {
            let col = columns[*src];
            let values = match (ovr, &col.values) {
                (Some(class), FactorValues::Discrete(v)) => FactorValues::Discrete(
                    indices
                        .iter()
                        .map(|&i| usize::from(v[i] == *class))
                        .collect(),
                ),
                (None, FactorValues::Discrete(v)) => {
                    FactorValues::Discrete(indices.iter().map(|&i| v[i]).collect())
                }
                (None, FactorValues::Continuous(v)) => {
                    FactorValues::Continuous(indices.iter().map(|&i| v[i]).collect())
                }
                (Some(_), FactorValues::Continuous(_)) => {
                    return Err(Error::dim(
                        "one-vs-rest slice backed by a continuous column",
                    ))
                }
            };
            concepts.push(values);
        }
        Ok(Batch {
            x: Tensor::new(vec![indices.len(), d], x)?,
            y,
            concepts,
        })
    }
}

/// A training batch with concept values aligned to the model's specs.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub concepts: Vec<FactorValues>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Whether the latent is sampled (training) or fixed at its mean (eval).
pub enum LossMode<'a> {
    Sample(&'a mut StreamRng),
    Deterministic,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub task: f64,
    pub concept: Vec<f64>,
    pub kl: Vec<f64>,
}

impl LossComponents {
    /// Recombines the components in the exact operation order the loss graph
    /// used, so equality with `total` is bitwise, not approximate.
    pub fn reconstruct_total(&self, beta: f64, gamma: f64) -> f64 {
        let mut t = self.task;
        if !self.concept.is_empty() {
            let mut c = self.concept[0];
            for v in &self.concept[1..] {
                c += v;
            }
            t += beta * c;
        }
        if !self.kl.is_empty() {
            let mut k = self.kl[0];
            for v in &self.kl[1..] {
                k += v;
            }
            t += gamma * k;
        }
        t
    }
}

impl ModelBundle {
    /// mu = f(x) and the latent z used downstream; z == mu exactly when
    /// sigma_x = 0 or in deterministic mode.
    pub fn encode(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: &mut LossMode,
    ) -> Result<(Var, Var)> {
        let mu = self.encoder.forward(tape, &self.store, x)?;
        let z = match mode {
            LossMode::Sample(rng) => tape.gaussian_reparam_sample(mu, self.sigma_x, &mut **rng)?,
            LossMode::Deterministic => mu,
        };
        Ok((mu, z))
    }

    /// Full objective on one batch: task negative log-likelihood, plus beta
    /// times the concept terms, plus gamma times the per-block KL terms. The
    /// hard variant contributes only its (stage-one) concept terms here; its
    /// task head trains separately on binarized concepts.
    pub fn loss_total(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        mut mode: LossMode,
    ) -> Result<(Var, LossComponents)> {
        if batch.is_empty() {
            return Err(Error::usage("loss on empty batch"));
        }
        if self.gamma > 0.0 && self.sigma_x == 0.0 {
            return Err(Error::config(
                "kl weight positive but sigma_x = 0: kl term undefined",
            ));
        }
        let x = tape.constant(batch.x.clone());
        let (mu, z) = self.encode(tape, x, &mut mode)?;

        let mut components = LossComponents::default();
        let task_term = if self.variant == Variant::Hcbm {
            None
        } else {
            let logits = self.task_head.forward(tape, &self.store, z)?;
            let ce = tape.cross_entropy(logits, &batch.y)?;
            components.task = tape.scalar_value(ce)?;
            Some(ce)
        };

        let mut concept_terms = Vec::new();
        for (j, spec) in self.concept_specs.iter().enumerate() {
            let range = self.layout.block_range(j)?;
            let zj = tape.slice_cols(z, range.start, range.end)?;
            let values = &batch.concepts[j];
            let term = match (&self.concept_heads[j], spec.kind) {
                (ConceptHead::SigmoidDirect, FactorKind::Binary) => {
                    let probs = tape.sigmoid(zj);
                    let labels = discrete_as_f64(values)?;
                    tape.binary_cross_entropy(probs, &labels)?
                }
                (ConceptHead::IdentityDirect, FactorKind::Continuous) => {
                    let target = tape.constant(continuous_column(values, batch.len())?);
                    tape.mse(zj, target)?
                }
                (ConceptHead::Trained(mlp), kind) => {
                    let h = mlp.forward(tape, &self.store, zj)?;
                    match kind {
                        FactorKind::Binary => {
                            let probs = tape.sigmoid(h);
                            let labels = discrete_as_f64(values)?;
                            tape.binary_cross_entropy(probs, &labels)?
                        }
                        FactorKind::Multiclass(_) => {
                            let FactorValues::Discrete(labels) = values else {
                                return Err(Error::dim("multiclass concept needs class labels"));
                            };
                            tape.cross_entropy(h, labels)?
                        }
                        FactorKind::Continuous => {
                            let target = tape.constant(continuous_column(values, batch.len())?);
                            tape.mse(h, target)?
                        }
                    }
                }
                (head, kind) => {
                    return Err(Error::config(format!(
                        "concept head {head:?} incompatible with {kind:?}"
                    )))
                }
            };
            components.concept.push(tape.scalar_value(term)?);
            concept_terms.push(term);
        }

        let mut kl_terms = Vec::new();
        if self.variant == Variant::Mcbm {
            for (j, spec) in self.concept_specs.iter().enumerate() {
                let range = self.layout.block_range(j)?;
                let mu_j = tape.slice_cols(mu, range.start, range.end)?;
                let target = match &self.repr_heads[j] {
                    Some(mlp) => {
                        let emb = tape.constant(embedding_rows(spec, &batch.concepts[j])?);
                        mlp.forward(tape, &self.store, emb)?
                    }
                    None => tape.constant(target_rows(spec, &batch.concepts[j], self.lambda)?),
                };
                let kl = tape.kl_diag(mu_j, self.sigma_x, target, self.sigma_z_hat)?;
                components.kl.push(tape.scalar_value(kl)?);
                kl_terms.push(kl);
            }
        }

        // Combine as task + beta * sum(concepts) + gamma * sum(kls), folding
        // sums left to right; reconstruct_total mirrors this order exactly.
        let mut total = task_term;
        if let Some(&first) = concept_terms.first() {
            let mut csum = first;
            for t in &concept_terms[1..] {
                csum = tape.add(csum, *t)?;
            }
            let scaled = tape.scale(csum, self.beta);
            total = Some(match total {
                Some(t) => tape.add(t, scaled)?,
                None => scaled,
            });
        }
        if let Some(&first) = kl_terms.first() {
            let mut ksum = first;
            for t in &kl_terms[1..] {
                ksum = tape.add(ksum, *t)?;
            }
            let scaled = tape.scale(ksum, self.gamma);
            total = Some(match total {
                Some(t) => tape.add(t, scaled)?,
                None => scaled,
            });
        }
        let total = total.ok_or_else(|| Error::config("loss has no terms"))?;
        components.total = tape.scalar_value(total)?;
        Ok((total, components))
    }
}

fn discrete_as_f64(values: &FactorValues) -> Result<Vec<f64>> {
    let FactorValues::Discrete(v) = values else {
        return Err(Error::dim("binary concept needs discrete values"));
    };
    Ok(v.iter().map(|&b| b as f64).collect())
}

fn continuous_column(values: &FactorValues, rows: usize) -> Result<Tensor> {
    let FactorValues::Continuous(v) = values else {
        return Err(Error::dim("continuous concept needs continuous values"));
    };
    Tensor::new(vec![rows, 1], v.clone())
}

/// Stacks per-sample representation targets into a [B, block_dim] matrix.
pub fn target_rows(spec: &ConceptSpec, values: &FactorValues, lambda: f64) -> Result<Tensor> {
    let rows = values.len();
    let mut out = Vec::with_capacity(rows * spec.block_dim());
    for i in 0..rows {
        let (d, c) = match values {
            FactorValues::Discrete(v) => (v[i], 0.0),
            FactorValues::Continuous(v) => (0, v[i]),
        };
        out.extend(representation_target(spec.kind, d, c, lambda)?);
    }
    Tensor::new(vec![rows, spec.block_dim()], out)
}

fn embedding_rows(spec: &ConceptSpec, values: &FactorValues) -> Result<Tensor> {
    let rows = values.len();
    let dim = concept_embed_dim(spec.kind);
    let mut out = Vec::with_capacity(rows * dim);
    for i in 0..rows {
        let (d, c) = match values {
            FactorValues::Discrete(v) => (v[i], 0.0),
            FactorValues::Continuous(v) => (0, v[i]),
        };
        out.extend(concept_embedding(spec.kind, d, c));
    }
    Tensor::new(vec![rows, dim], out)
}

/// Deterministic forward outputs for evaluation and interventions.
#[derive(Clone, Debug)]
pub struct Predictions {
    /// Latent at its mean (z = mu); interventions overwrite blocks here.
    pub z: Tensor,
    pub y_logits: Tensor,
    pub y_pred: Vec<usize>,
    /// Per concept: probabilities [B,1] (binary), softmax probabilities
    /// [B,k] (multiclass), or raw predictions [B,1] (continuous).
    pub concept_outputs: Vec<Tensor>,
}

pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Thresholds probabilities at 0.5; exactly 0.5 rounds to 1.
pub fn binarize_probs(probs: &Tensor) -> Tensor {
    let mut out = probs.clone();
    for v in out.values_mut() {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    out
}

impl ModelBundle {
    /// Encoder mean, no sampling.
    pub fn encode_mu(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mu = self.encoder.forward(&mut tape, &self.store, xv)?;
        Ok(tape.value(mu).clone())
    }

    /// Concept-head outputs for a fixed latent.
    pub fn concept_outputs_from_latent(&self, z: &Tensor) -> Result<Vec<Tensor>> {
        let mut outputs = Vec::with_capacity(self.concept_specs.len());
        for (j, spec) in self.concept_specs.iter().enumerate() {
            let range = self.layout.block_range(j)?;
            let mut tape = Tape::new();
            let zv = tape.constant(z.clone());
            let zj = tape.slice_cols(zv, range.start, range.end)?;
            let out = match (&self.concept_heads[j], spec.kind) {
                (ConceptHead::SigmoidDirect, _) => {
                    let p = tape.sigmoid(zj);
                    tape.value(p).clone()
                }
                (ConceptHead::IdentityDirect, _) => tape.value(zj).clone(),
                (ConceptHead::Trained(mlp), kind) => {
                    let h = mlp.forward(&mut tape, &self.store, zj)?;
                    match kind {
                        FactorKind::Binary => {
                            let p = tape.sigmoid(h);
                            tape.value(p).clone()
                        }
                        FactorKind::Multiclass(_) => {
                            let p = tape.softmax(h, 1)?;
                            tape.value(p).clone()
                        }
                        FactorKind::Continuous => tape.value(h).clone(),
                    }
                }
            };
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Task logits from a fixed latent (not for the hard variant, whose task
    /// head reads binarized concepts instead).
    pub fn task_logits_from_latent(&self, z: &Tensor) -> Result<Tensor> {
        if self.variant == Variant::Hcbm {
            return Err(Error::usage(
                "hard variant predicts from binarized concepts; use hcbm paths",
            ));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let logits = self.task_head.forward(&mut tape, &self.store, zv)?;
        Ok(tape.value(logits).clone())
    }

    pub fn hcbm_logits_from_binarized(&self, c_bin: &Tensor) -> Result<Tensor> {
        if self.variant != Variant::Hcbm {
            return Err(Error::usage("binarized task path is hard-variant only"));
        }
        let mut tape = Tape::new();
        let cv = tape.constant(c_bin.clone());
        let logits = self.task_head.forward(&mut tape, &self.store, cv)?;
        Ok(tape.value(logits).clone())
    }

    /// Stage-two objective for the hard variant: task cross-entropy on
    /// binarized concept predictions. No gradient reaches the encoder.
    pub fn hcbm_task_loss(
        &self,
        tape: &mut Tape,
        c_bin: &Tensor,
        y: &[usize],
    ) -> Result<Var> {
        if self.variant != Variant::Hcbm {
            return Err(Error::usage("stage-two loss is hard-variant only"));
        }
        let cv = tape.constant(c_bin.clone());
        let logits = self.task_head.forward(tape, &self.store, cv)?;
        tape.cross_entropy(logits, y)
    }

    /// Deterministic forward pass for any variant.
    pub fn predict(&self, x: &Tensor) -> Result<Predictions> {
        let mu = self.encode_mu(x)?;
        self.predict_from_latent(&mu)
    }

    /// Forward pass from a fixed latent; this is the entry point
    /// interventions use after overwriting blocks.
    pub fn predict_from_latent(&self, z: &Tensor) -> Result<Predictions> {
        let concept_outputs = self.concept_outputs_from_latent(z)?;
        let y_logits = if self.variant == Variant::Hcbm {
            let c_prob = concat_cols(&concept_outputs)?;
            self.hcbm_logits_from_binarized(&binarize_probs(&c_prob))?
        } else {
            self.task_logits_from_latent(z)?
        };
        let y_pred = (0..y_logits.rows()).map(|i| argmax_row(y_logits.row(i))).collect();
        Ok(Predictions {
            z: z.clone(),
            y_logits,
            y_pred,
            concept_outputs,
        })
    }

    /// (concept probabilities, binarized concepts, task logits, predictions)
    /// for the hard variant.
    pub fn hcbm_forward(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor, Vec<usize>)> {
        if self.variant != Variant::Hcbm {
            return Err(Error::usage("hcbm_forward on a non-hard variant"));
        }
        let mu = self.encode_mu(x)?;
        let c_prob = concat_cols(&self.concept_outputs_from_latent(&mu)?)?;
        let c_bin = binarize_probs(&c_prob);
        let y_logits = self.hcbm_logits_from_binarized(&c_bin)?;
        let y_pred = (0..y_logits.rows()).map(|i| argmax_row(y_logits.row(i))).collect();
        Ok((c_prob, c_bin, y_logits, y_pred))
    }
}

/// Horizontal concatenation of same-height matrices.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::usage("concat of nothing"));
    }
    let rows = parts[0].rows();
    if parts.iter().any(|p| p.rows() != rows) {
        return Err(Error::dim("concat parts disagree on row count"));
    }
    let width: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::new(vec![rows, width], out)
}

/// Softmax probabilities row by row.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let c = logits.cols();
    for r in 0..logits.rows() {
        softmax_in_place(&mut out.values_mut()[r * c..(r + 1) * c]);
    }
    out
}

/// Row-wise sigmoid, used for reading binary heads outside any tape.
pub fn sigmoid_all(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for v in out.values_mut() {
        *v = sigmoid(*v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{FactorColumn, FactorRole, FactorSpec, SplitTag};

    fn toy_specs() -> Vec<ConceptSpec> {
        vec![
            ConceptSpec::new("b", FactorKind::Binary),
            ConceptSpec::new("m", FactorKind::Multiclass(4)),
            ConceptSpec::new("c", FactorKind::Continuous),
        ]
    }

    fn toy_batch(n: usize, input_dim: usize, seed: u64) -> Batch {
        let mut rng = StreamRng::new(seed, "test/batch");
        let mut x = vec![0.0; n * input_dim];
        rng.fill_normal(&mut x);
        Batch {
            x: Tensor::new(vec![n, input_dim], x).unwrap(),
            y: (0..n).map(|i| i % 3).collect(),
            concepts: vec![
                FactorValues::Discrete((0..n).map(|i| i % 2).collect()),
                FactorValues::Discrete((0..n).map(|i| (i + 1) % 4).collect()),
                FactorValues::Continuous((0..n).map(|i| (i as f64 / n as f64) - 0.4).collect()),
            ],
        }
    }

    fn build(variant: Variant, opts: &BuildOptions) -> ModelBundle {
        build_model(variant, &toy_specs(), 10, 4, &[16], &[8], 7, opts).unwrap()
    }

    #[test]
    fn param_count_matches_closed_form() {
        let m = build(Variant::Mcbm, &BuildOptions::default());
        assert_eq!(m.layout.total_dim, 6);
        assert_eq!(m.layout.block_range(0).unwrap(), 0..1);
        assert_eq!(m.layout.block_range(1).unwrap(), 1..5);
        assert_eq!(m.layout.block_range(2).unwrap(), 5..6);
        // encoder [10,16,6] + task [6,8,4] + heads [1,8,1], [4,4,4], [1,8,1]
        let expected = (10 * 16 + 16 + 16 * 6 + 6)
            + (6 * 8 + 8 + 8 * 4 + 4)
            + (8 + 8 + 8 + 1)
            + (16 + 4 + 16 + 4)
            + (8 + 8 + 8 + 1);
        assert_eq!(m.param_count(), expected);
    }

    #[test]
    fn cbm_expands_multiclass_to_binary_slices() {
        let opts = BuildOptions {
            gamma: 0.0,
            ..BuildOptions::default()
        };
        let m = build(Variant::Cbm, &opts);
        assert_eq!(m.concept_specs.len(), 6);
        assert!(m.expansion_note.is_some());
        assert_eq!(m.concept_sources[1], (1, Some(0)));
        assert_eq!(m.concept_sources[4], (1, Some(3)));
        assert!(matches!(m.concept_heads[1], ConceptHead::SigmoidDirect));
        assert!(matches!(m.concept_heads[5], ConceptHead::IdentityDirect));
        assert_eq!(m.layout.total_dim, 6);
        assert_eq!(m.sigma_x, 0.0);
    }

    #[test]
    fn representation_targets_follow_kind_rules() {
        assert_eq!(
            representation_target(FactorKind::Binary, 1, 0.0, 3.0).unwrap(),
            vec![3.0]
        );
        assert_eq!(
            representation_target(FactorKind::Binary, 0, 0.0, 3.0).unwrap(),
            vec![-3.0]
        );
        assert_eq!(
            representation_target(FactorKind::Multiclass(4), 2, 0.0, 3.0).unwrap(),
            vec![0.0, 0.0, 3.0, 0.0]
        );
        assert_eq!(
            representation_target(FactorKind::Continuous, 0, -0.5, 3.0).unwrap(),
            vec![-1.5]
        );
        assert!(representation_target(FactorKind::Binary, 2, 0.0, 3.0).is_err());
        assert!(representation_target(FactorKind::Multiclass(4), 4, 0.0, 3.0).is_err());
    }

    #[test]
    fn variant_validation_rules() {
        // Vanilla with concept weights set.
        assert!(build_model(
            Variant::Vm,
            &[],
            10,
            4,
            &[16],
            &[8],
            7,
            &BuildOptions {
                vm_total_dim: Some(6),
                ..BuildOptions::default()
            },
        )
        .is_err());
        // Vanilla with no way to size the latent.
        assert!(build_model(
            Variant::Vm,
            &[],
            10,
            4,
            &[16],
            &[8],
            7,
            &BuildOptions {
                beta: 0.0,
                gamma: 0.0,
                ..BuildOptions::default()
            },
        )
        .is_err());
        // Deterministic encoders reject a kl weight.
        assert!(build_model(
            Variant::Cbm,
            &toy_specs(),
            10,
            4,
            &[16],
            &[8],
            7,
            &BuildOptions::default(),
        )
        .is_err());
        // Hard variant rejects continuous concepts.
        let err = build_model(
            Variant::Hcbm,
            &toy_specs(),
            10,
            4,
            &[16],
            &[8],
            7,
            &BuildOptions {
                gamma: 0.0,
                ..BuildOptions::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("binary"));
        // Negative weights rejected.
        assert!(build_model(
            Variant::Mcbm,
            &toy_specs(),
            10,
            4,
            &[16],
            &[8],
            7,
            &BuildOptions {
                beta: -0.1,
                ..BuildOptions::default()
            },
        )
        .is_err());
    }

    #[test]
    fn vanilla_loss_is_task_only() {
        let m = build_model(
            Variant::Vm,
            &[],
            10,
            4,
            &[16],
            &[8],
            7,
            &BuildOptions {
                beta: 0.0,
                gamma: 0.0,
                vm_total_dim: Some(6),
                ..BuildOptions::default()
            },
        )
        .unwrap();
        let batch = Batch {
            concepts: Vec::new(),
            ..toy_batch(5, 10, 1)
        };
        let mut tape = Tape::new();
        let (_, parts) = m.loss_total(&mut tape, &batch, LossMode::Deterministic).unwrap();
        assert!(parts.concept.is_empty());
        assert!(parts.kl.is_empty());
        assert_eq!(parts.total.to_bits(), parts.task.to_bits());
    }

    #[test]
    fn components_recombine_to_total_bitwise() {
        let opts = BuildOptions {
            beta: 0.7,
            gamma: 1.3,
            ..BuildOptions::default()
        };
        let m = build(Variant::Mcbm, &opts);
        let batch = toy_batch(5, 10, 2);
        let mut tape = Tape::new();
        let (_, parts) = m.loss_total(&mut tape, &batch, LossMode::Deterministic).unwrap();
        assert_eq!(parts.concept.len(), 3);
        assert_eq!(parts.kl.len(), 3);
        assert_eq!(
            parts.total.to_bits(),
            parts.reconstruct_total(m.beta, m.gamma).to_bits()
        );

        let cbm = build(
            Variant::Cbm,
            &BuildOptions {
                beta: 0.7,
                gamma: 0.0,
                ..BuildOptions::default()
            },
        );
        let cbatch = cbm.make_batch(&tiny_dataset(), &[0, 1, 2, 3]).unwrap();
        let mut tape = Tape::new();
        let (_, parts) = cbm.loss_total(&mut tape, &cbatch, LossMode::Deterministic).unwrap();
        assert_eq!(parts.concept.len(), 6);
        assert!(parts.kl.is_empty());
        assert_eq!(
            parts.total.to_bits(),
            parts.reconstruct_total(cbm.beta, cbm.gamma).to_bits()
        );
    }

    #[test]
    fn hard_variant_stage_one_loss_has_no_task_term() {
        let m = build_model(
            Variant::Hcbm,
            &[
                ConceptSpec::new("b0", FactorKind::Binary),
                ConceptSpec::new("b1", FactorKind::Binary),
            ],
            10,
            4,
            &[16],
            &[8],
            7,
            &BuildOptions {
                gamma: 0.0,
                ..BuildOptions::default()
            },
        )
        .unwrap();
        let batch = Batch {
            concepts: vec![
                FactorValues::Discrete(vec![0, 1, 1, 0, 1]),
                FactorValues::Discrete(vec![1, 1, 0, 0, 0]),
            ],
            ..toy_batch(5, 10, 3)
        };
        let mut tape = Tape::new();
        let (_, parts) = m.loss_total(&mut tape, &batch, LossMode::Deterministic).unwrap();
        assert_eq!(parts.task, 0.0);
        assert_eq!(parts.concept.len(), 2);
        assert_eq!(
            parts.total.to_bits(),
            parts.reconstruct_total(m.beta, m.gamma).to_bits()
        );
    }

    #[test]
    fn kl_component_is_half_squared_distance_at_unit_sigmas() {
        let m = build(Variant::Mcbm, &BuildOptions::default());
        let batch = toy_batch(6, 10, 4);
        let mut tape = Tape::new();
        let (_, parts) = m.loss_total(&mut tape, &batch, LossMode::Deterministic).unwrap();
        let mu = m.encode_mu(&batch.x).unwrap();
        for (j, spec) in m.concept_specs.iter().enumerate() {
            let range = m.layout.block_range(j).unwrap();
            let target = target_rows(spec, &batch.concepts[j], m.lambda).unwrap();
            let mut acc = 0.0;
            for r in 0..mu.rows() {
                let mrow = &mu.row(r)[range.clone()];
                let trow = target.row(r);
                acc += 0.5
                    * mrow
                        .iter()
                        .zip(trow)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>();
            }
            let expect = acc / mu.rows() as f64;
            assert!(
                (parts.kl[j] - expect).abs() < 1e-12,
                "block {j}: {} vs {expect}",
                parts.kl[j]
            );
        }
    }

    #[test]
    fn sampling_reproduces_by_stream_and_differs_from_deterministic() {
        let m = build(Variant::Mcbm, &BuildOptions::default());
        let batch = toy_batch(5, 10, 5);
        let total = |mode: LossMode| {
            let mut tape = Tape::new();
            let (_, parts) = m.loss_total(&mut tape, &batch, mode).unwrap();
            parts.total
        };
        let mut r1 = StreamRng::new(11, "reparam");
        let mut r2 = StreamRng::new(11, "reparam");
        let a = total(LossMode::Sample(&mut r1));
        let b = total(LossMode::Sample(&mut r2));
        let det = total(LossMode::Deterministic);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a.to_bits(), det.to_bits());
    }

    #[test]
    fn hard_task_head_sees_only_binarized_concepts() {
        let m = build_model(
            Variant::Hcbm,
            &[
                ConceptSpec::new("b0", FactorKind::Binary),
                ConceptSpec::new("b1", FactorKind::Binary),
            ],
            4,
            2,
            &[8],
            &[8],
            7,
            &BuildOptions {
                gamma: 0.0,
                ..BuildOptions::default()
            },
        )
        .unwrap();
        // Different logits, same side of the threshold.
        let z1 = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let z2 = Tensor::new(vec![1, 2], vec![0.1, -3.0]).unwrap();
        let p1 = m.predict_from_latent(&z1).unwrap();
        let p2 = m.predict_from_latent(&z2).unwrap();
        assert_eq!(p1.y_logits, p2.y_logits);
        assert_ne!(p1.concept_outputs[0], p2.concept_outputs[0]);
        // Exactly 0.5 thresholds to 1.
        let tie = binarize_probs(&Tensor::new(vec![1, 2], vec![0.5, 0.4999]).unwrap());
        assert_eq!(tie.values(), &[1.0, 0.0]);
    }

    fn tiny_dataset() -> crate::datagen::Dataset {
        crate::datagen::Dataset {
            x: Tensor::new(
                vec![4, 10],
                (0..40).map(|i| (i as f64) * 0.05 - 1.0).collect(),
            )
            .unwrap(),
            y: vec![0, 1, 2, 3],
            n_labels: 4,
            factors: vec![
                FactorColumn {
                    spec: FactorSpec::new("b", FactorKind::Binary, FactorRole::Concept),
                    values: FactorValues::Discrete(vec![0, 1, 1, 0]),
                },
                FactorColumn {
                    spec: FactorSpec::new("m", FactorKind::Multiclass(4), FactorRole::Concept),
                    values: FactorValues::Discrete(vec![0, 2, 3, 2]),
                },
                FactorColumn {
                    spec: FactorSpec::new("c", FactorKind::Continuous, FactorRole::Concept),
                    values: FactorValues::Continuous(vec![-0.9, 0.1, 0.4, 0.8]),
                },
            ],
            split_tag: SplitTag::Full,
            label_table: None,
            continuous_bins: 5,
        }
    }

    #[test]
    fn one_vs_rest_batches_map_classes_to_indicators() {
        let ds = tiny_dataset();
        let m = build(
            Variant::Cbm,
            &BuildOptions {
                gamma: 0.0,
                ..BuildOptions::default()
            },
        );
        m.check_compatible(&ds).unwrap();
        let batch = m.make_batch(&ds, &[0, 1, 2, 3]).unwrap();
        assert_eq!(batch.concepts.len(), 6);
        // Source classes [0, 2, 3, 2] against slices m_is0..m_is3.
        assert_eq!(batch.concepts[1], FactorValues::Discrete(vec![1, 0, 0, 0]));
        assert_eq!(batch.concepts[2], FactorValues::Discrete(vec![0, 0, 0, 0]));
        assert_eq!(batch.concepts[3], FactorValues::Discrete(vec![0, 1, 0, 1]));
        assert_eq!(batch.concepts[4], FactorValues::Discrete(vec![0, 0, 1, 0]));
        let mut narrow = ds.clone();
        narrow.n_labels = 3;
        assert!(m.check_compatible(&narrow).is_err());
    }

    #[test]
    fn descriptor_round_trip_rebuilds_identical_structure() {
        let m = build(Variant::Mcbm, &BuildOptions::default());
        let json = serde_json::to_string(&m.descriptor()).unwrap();
        let desc: ModelDescriptor = serde_json::from_str(&json).unwrap();
        let m2 = ModelBundle::from_descriptor(&desc, 99).unwrap();
        assert_eq!(m2.param_count(), m.param_count());
        assert_eq!(m2.concept_specs, m.concept_specs);
        assert_eq!(m2.layout.total_dim, m.layout.total_dim);
        for id in m.store.ids() {
            let name = m.store.name(id);
            assert!(m2.store.id_by_name(name).is_some(), "missing {name}");
        }
    }

    #[test]
    fn concept_permutation_permutes_blocks_consistently() {
        let specs1 = vec![
            ConceptSpec::new("a", FactorKind::Binary),
            ConceptSpec::new("c", FactorKind::Continuous),
        ];
        let specs2 = vec![specs1[1].clone(), specs1[0].clone()];
        let opts = BuildOptions {
            beta: 0.7,
            gamma: 1.1,
            ..BuildOptions::default()
        };
        let m1 = build_model(Variant::Mcbm, &specs1, 6, 3, &[8], &[8], 7, &opts).unwrap();
        let mut m2 = build_model(Variant::Mcbm, &specs2, 6, 3, &[8], &[8], 8, &opts).unwrap();

        let get = |m: &ModelBundle, name: &str| {
            m.store
                .tensor(m.store.id_by_name(name).unwrap())
                .values()
                .to_vec()
        };
        let set = |m: &mut ModelBundle, name: &str, vals: &[f64]| {
            let id = m.store.id_by_name(name).unwrap();
            m.store.tensor_mut(id).values_mut().copy_from_slice(vals);
        };
        for name in ["encoder.w0", "encoder.b0", "task_head.b0", "task_head.w1", "task_head.b1"] {
            let v = get(&m1, name);
            set(&mut m2, name, &v);
        }
        // Latent dim 0 (a) and 1 (c) swap places in m2.
        let w1 = get(&m1, "encoder.w1");
        let swapped: Vec<f64> = w1.chunks(2).flat_map(|p| [p[1], p[0]]).collect();
        set(&mut m2, "encoder.w1", &swapped);
        let b1 = get(&m1, "encoder.b1");
        set(&mut m2, "encoder.b1", &[b1[1], b1[0]]);
        let tw0 = get(&m1, "task_head.w0");
        let rows: Vec<f64> = tw0[8..16].iter().chain(&tw0[0..8]).copied().collect();
        set(&mut m2, "task_head.w0", &rows);
        for l in ["w0", "b0", "w1", "b1"] {
            let v = get(&m1, &format!("concept_head0.{l}"));
            set(&mut m2, &format!("concept_head1.{l}"), &v);
            let v = get(&m1, &format!("concept_head1.{l}"));
            set(&mut m2, &format!("concept_head0.{l}"), &v);
        }

        let batch1 = Batch {
            x: toy_batch(5, 6, 6).x,
            y: vec![0, 1, 2, 0, 1],
            concepts: vec![
                FactorValues::Discrete(vec![0, 1, 1, 0, 1]),
                FactorValues::Continuous(vec![0.3, -0.2, 0.9, -1.0, 0.05]),
            ],
        };
        let batch2 = Batch {
            concepts: vec![batch1.concepts[1].clone(), batch1.concepts[0].clone()],
            ..batch1.clone()
        };
        let mut t1 = Tape::new();
        let (_, p1) = m1.loss_total(&mut t1, &batch1, LossMode::Deterministic).unwrap();
        let mut t2 = Tape::new();
        let (_, p2) = m2.loss_total(&mut t2, &batch2, LossMode::Deterministic).unwrap();
        assert!((p1.total - p2.total).abs() < 1e-9, "{} vs {}", p1.total, p2.total);
        assert!((p1.concept[0] - p2.concept[1]).abs() < 1e-12);
        assert!((p1.concept[1] - p2.concept[0]).abs() < 1e-12);
        assert!((p1.kl[0] - p2.kl[1]).abs() < 1e-12);
    }
}
