//! Joint embedding of compositions and images.
//!
//! A composition is embedded as the concatenation of its state and object
//! latents; `phi_e` and `phi_i` project compositions and image features into
//! a shared `k`-dimensional space scored by dot product. Training minimises
//! the ELBO plus two cross-entropy alignment terms, one normalised over the
//! candidate compositions and one over the images in the batch.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{pair_index, CompositionLabel, ConceptGraph, Dataset, World};
use crate::numerics::{dot, Adam, AdamConfig, NumericsError, Tape, Tensor, Var};
use crate::rng::{stream_rng, Stream};
use crate::vgae::{self, EncoderConfig, EncoderParams, EncoderVars, VgaeError};

#[derive(Debug, thiserror::Error)]
pub enum ComposerError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Vgae(#[from] VgaeError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("pair ({state}, {object}) is out of range")]
    PairOutOfRange { state: usize, object: usize },
    #[error("label ({state}, {object}) is not in the candidate pair table")]
    MissingTarget { state: usize, object: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {component} loss at epoch {epoch}: {source}")]
    NonFiniteLoss {
        component: &'static str,
        epoch: usize,
        #[source]
        source: NumericsError,
    },
}

/// Linear, ReLU, linear; both layers biased.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(input: usize, width: usize, rng: &mut R) -> Self {
        let std1 = (2.0 / (input + width) as f64).sqrt();
        let std2 = (1.0 / width as f64).sqrt();
        Self {
            w1: Tensor::random_normal(input, width, std1, rng),
            b1: Tensor::zeros(1, width),
            w2: Tensor::random_normal(width, width, std2, rng),
            b2: Tensor::zeros(1, width),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ComposerError> {
        let hidden = x.matmul(&self.w1)?.add_row(&self.b1)?.map(|v| v.max(0.0));
        Ok(hidden.matmul(&self.w2)?.add_row(&self.b2)?)
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        MlpVars {
            w1: put(&self.w1),
            b1: put(&self.b1),
            w2: put(&self.w2),
            b2: put(&self.b2),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        let a = tape.matmul(x, self.w1)?;
        let a = tape.add_row(a, self.b1)?;
        let a = tape.relu(a)?;
        let b = tape.matmul(a, self.w2)?;
        tape.add_row(b, self.b2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    /// `R^{2h} → R^k`
    pub phi_e: Mlp,
    /// `R^d → R^k`
    pub phi_i: Mlp,
}

/// All architecture dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Node feature dimension.
    pub m: usize,
    /// Image feature dimension.
    pub d: usize,
    pub hidden: usize,
    /// Latent dimension per concept.
    pub h: usize,
    /// Shared embedding dimension.
    pub k: usize,
    pub layers: usize,
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            m: self.m,
            hidden: self.hidden,
            h: self.h,
            layers: self.layers,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvgaeModel {
    pub encoder: EncoderParams,
    pub projection: ProjectionParams,
}

/// Tape handles for a [`CvgaeModel`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub phi_e: MlpVars,
    pub phi_i: MlpVars,
}

impl ModelVars {
    /// Same order as [`CvgaeModel::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.encoder.all();
        for mlp in [&self.phi_e, &self.phi_i] {
            out.extend([mlp.w1, mlp.b1, mlp.w2, mlp.b2]);
        }
        out
    }
}

impl CvgaeModel {
    /// Seeded from the `Init` stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ComposerError> {
        if config.d == 0 || config.k == 0 {
            return Err(ComposerError::Config(format!("d and k must be positive, got {config:?}")));
        }
        let mut rng = stream_rng(seed, Stream::Init);
        let encoder = EncoderParams::init(&config.encoder(), &mut rng)?;
        let phi_e = Mlp::init(2 * config.h, config.k, &mut rng);
        let phi_i = Mlp::init(config.d, config.k, &mut rng);
        Ok(Self {
            encoder,
            projection: ProjectionParams { phi_e, phi_i },
        })
    }

    pub fn config(&self) -> ModelConfig {
        let enc = self.encoder.config();
        ModelConfig {
            m: enc.m,
            d: self.projection.phi_i.input_dim(),
            hidden: enc.hidden,
            h: enc.h,
            k: self.projection.phi_e.output_dim(),
            layers: enc.layers,
        }
    }

    /// Encoder tensors, then `phi_e`, then `phi_i`; the checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = self.encoder.tensors();
        out.extend(self.projection.phi_e.tensors());
        out.extend(self.projection.phi_i.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.projection.phi_e.tensors_mut());
        out.extend(self.projection.phi_i.tensors_mut());
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = self.encoder.names();
        for head in ["phi_e", "phi_i"] {
            out.extend(["w1", "b1", "w2", "b2"].iter().map(|p| format!("{head}.{p}")));
        }
        out
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            encoder: self.encoder.register(tape, trainable),
            phi_e: self.projection.phi_e.register(tape, trainable),
            phi_i: self.projection.phi_i.register(tape, trainable),
        }
    }

    /// Overwrites every parameter, in `tensors()` order.
    pub fn set_tensors(&mut self, values: &[Tensor]) -> Result<(), ComposerError> {
        let slots = self.tensors_mut();
        if slots.len() != values.len() {
            return Err(ComposerError::Dimension(format!(
                "{} tensors for {} parameters",
                values.len(),
                slots.len()
            )));
        }
        for (slot, value) in slots.into_iter().zip(values) {
            if slot.shape() != value.shape() {
                return Err(ComposerError::Dimension(format!(
                    "parameter shape {:?} vs {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }
}

fn check_pairs(pairs: &[CompositionLabel], n_states: usize, n_objects: usize) -> Result<(), ComposerError> {
    match pairs.iter().find(|p| p.state >= n_states || p.object >= n_objects) {
        Some(p) => Err(ComposerError::PairOutOfRange {
            state: p.state,
            object: p.object,
        }),
        None => Ok(()),
    }
}

/// Rows `concat(z_s, z_{|S|+o})`, one per pair.
pub fn pair_embeddings(z: &Tensor, pairs: &[CompositionLabel], n_states: usize) -> Result<Tensor, ComposerError> {
    check_pairs(pairs, n_states, z.rows().saturating_sub(n_states))?;
    let states: Vec<usize> = pairs.iter().map(|p| p.state).collect();
    let objects: Vec<usize> = pairs.iter().map(|p| n_states + p.object).collect();
    Ok(z.gather_rows(&states)?.concat_cols(&z.gather_rows(&objects)?)?)
}

pub fn pair_embeddings_on_tape(
    tape: &mut Tape,
    z: Var,
    pairs: &[CompositionLabel],
    n_states: usize,
) -> Result<Var, ComposerError> {
    check_pairs(pairs, n_states, tape.value(z).rows().saturating_sub(n_states))?;
    let states: Vec<usize> = pairs.iter().map(|p| p.state).collect();
    let objects: Vec<usize> = pairs.iter().map(|p| n_states + p.object).collect();
    let zs = tape.gather_rows(z, &states)?;
    let zo = tape.gather_rows(z, &objects)?;
    Ok(tape.concat_cols(zs, zo)?)
}

/// The similarity kernel: a dot product.
pub fn similarity(a: &[f64], b: &[f64]) -> Result<f64, ComposerError> {
    if a.len() != b.len() {
        return Err(ComposerError::Dimension(format!("{} vs {}", a.len(), b.len())));
    }
    Ok(dot(a, b))
}

/// Cross-entropy of each image against all candidate pairs.
pub fn loss_e_to_i_on_tape(
    tape: &mut Tape,
    projected_pairs: Var,
    projected_images: Var,
    targets: &[usize],
    temperature: f64,
) -> Result<Var, ComposerError> {
    if targets.is_empty() {
        return Err(ComposerError::EmptyBatch);
    }
    let logits = tape.matmul_nt(projected_images, projected_pairs)?;
    let logits = tape.scale(logits, 1.0 / temperature)?;
    Ok(tape.softmax_cross_entropy(logits, targets)?)
}

/// Cross-entropy of each sample's pair against the images in the batch.
pub fn loss_i_to_e_on_tape(
    tape: &mut Tape,
    projected_batch_pairs: Var,
    projected_images: Var,
    temperature: f64,
) -> Result<Var, ComposerError> {
    let b = tape.value(projected_images).rows();
    if b == 0 {
        return Err(ComposerError::EmptyBatch);
    }
    let logits = tape.matmul_nt(projected_batch_pairs, projected_images)?;
    let logits = tape.scale(logits, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..b).collect();
    Ok(tape.softmax_cross_entropy(logits, &targets)?)
}

fn constant_loss(
    inputs: &[&Tensor],
    build: impl FnOnce(&mut Tape, &[Var]) -> Result<Var, ComposerError>,
) -> Result<f64, ComposerError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|&t| tape.constant(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.scalar_value(loss)?)
}

pub fn loss_e_to_i(projected_pairs: &Tensor, projected_images: &Tensor, targets: &[usize]) -> Result<f64, ComposerError> {
    constant_loss(&[projected_pairs, projected_images], |t, v| {
        loss_e_to_i_on_tape(t, v[0], v[1], targets, 1.0)
    })
}

pub fn loss_i_to_e(projected_batch_pairs: &Tensor, projected_images: &Tensor) -> Result<f64, ComposerError> {
    constant_loss(&[projected_batch_pairs, projected_images], |t, v| loss_i_to_e_on_tape(t, v[0], v[1], 1.0))
}

fn default_lambda_ei() -> f64 {
    10.0
}
fn default_lambda_ie() -> f64 {
    0.01
}
fn default_lr() -> f64 {
    5e-5
}
fn default_batch_size() -> usize {
    128
}
fn default_epochs() -> usize {
    200
}
fn default_one() -> f64 {
    1.0
}
fn default_pair_cap() -> usize {
    50_000
}
fn default_neg_samples() -> usize {
    8192
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lambda_ei")]
    pub lambda_ei: f64,
    #[serde(default = "default_lambda_ie")]
    pub lambda_ie: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_one")]
    pub kl_weight: f64,
    #[serde(default)]
    pub seed: u64,
    /// Above this many candidate pairs the composition-side loss is computed
    /// over sampled negatives plus the batch targets.
    #[serde(default = "default_pair_cap")]
    pub pair_cap: usize,
    #[serde(default = "default_neg_samples")]
    pub neg_samples: usize,
    #[serde(default = "default_one")]
    pub temperature: f64,
    /// Candidate set used in training; defaults to the evaluation world.
    #[serde(default)]
    pub world: World,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_ei: default_lambda_ei(),
            lambda_ie: default_lambda_ie(),
            lr: default_lr(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            kl_weight: 1.0,
            seed: 0,
            pair_cap: default_pair_cap(),
            neg_samples: default_neg_samples(),
            temperature: 1.0,
            world: World::ClosedWorld,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ComposerError> {
        let positive = [("lr", self.lr), ("temperature", self.temperature)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ComposerError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("lambda_ei", self.lambda_ei),
            ("lambda_ie", self.lambda_ie),
            ("kl_weight", self.kl_weight),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ComposerError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.batch_size == 0 || self.pair_cap == 0 {
            return Err(ComposerError::Config("batch_size and pair_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar components of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub elbo: f64,
    pub kl: f64,
    pub edge: f64,
    pub ei: f64,
    pub ie: f64,
}

/// One mini-batch: image features and the ground-truth composition of each.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<CompositionLabel>,
}

/// Candidate pairs for the composition-side loss, with batch targets mapped
/// into it.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTable {
    pub pairs: Vec<CompositionLabel>,
    pub targets: Vec<usize>,
}

impl PairTable {
    /// Exact table when `candidates.len() <= pair_cap`; otherwise
    /// `neg_samples` uniformly drawn candidates plus every batch label.
    pub fn for_batch<R: Rng + ?Sized>(
        candidates: &[CompositionLabel],
        labels: &[CompositionLabel],
        pair_cap: usize,
        neg_samples: usize,
        rng: &mut R,
    ) -> Result<Self, ComposerError> {
        let pairs: Vec<CompositionLabel> = if candidates.len() <= pair_cap {
            candidates.to_vec()
        } else {
            let lookup = pair_index(candidates);
            let mut chosen: BTreeSet<usize> = index::sample(rng, candidates.len(), neg_samples.min(candidates.len()))
                .into_iter()
                .collect();
            for label in labels {
                let &i = lookup.get(label).ok_or(ComposerError::MissingTarget {
                    state: label.state,
                    object: label.object,
                })?;
                chosen.insert(i);
            }
            chosen.into_iter().map(|i| candidates[i]).collect()
        };
        let lookup = pair_index(&pairs);
        let targets = labels
            .iter()
            .map(|l| {
                lookup.get(l).copied().ok_or(ComposerError::MissingTarget {
                    state: l.state,
                    object: l.object,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { pairs, targets })
    }
}

/// Stage tag for non-finite diagnostics.
fn stage<T>(component: &'static str, epoch: usize, r: Result<T, ComposerError>) -> Result<T, ComposerError> {
    r.map_err(|e| match e {
        ComposerError::Numerics(source @ NumericsError::NonFinite(_))
        | ComposerError::Vgae(VgaeError::Numerics(source @ NumericsError::NonFinite(_))) => {
            ComposerError::NonFiniteLoss {
                component,
                epoch,
                source,
            }
        }
        other => other,
    })
}

/// Builds the full objective for one batch on `tape`. `noise = None` uses
/// the posterior means (deterministic evaluation).
#[allow(clippy::too_many_arguments)]
pub fn total_loss_on_tape(
    tape: &mut Tape,
    vars: &ModelVars,
    graph: &ConceptGraph,
    batch: &Batch,
    table: &PairTable,
    noise: Option<&Tensor>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<(Var, [Var; 5]), ComposerError> {
    if batch.labels.is_empty() {
        return Err(ComposerError::EmptyBatch);
    }
    let n_states = graph.n_states();
    let post = stage("encoder", epoch, vgae::encode_on_tape(tape, graph, &vars.encoder).map_err(Into::into))?;
    let z = match noise {
        Some(eps) => stage("encoder", epoch, vgae::reparameterize_on_tape(tape, post, eps).map_err(Into::into))?,
        None => post.mu,
    };
    let elbo = stage(
        "elbo",
        epoch,
        vgae::decode_logits_on_tape(tape, z, n_states)
            .and_then(|logits| vgae::elbo_on_tape(tape, post, logits, graph, config.kl_weight))
            .map_err(Into::into),
    )?;

    let images = stage("ei", epoch, {
        let x = tape.constant(batch.features.clone());
        vars.phi_i.apply(tape, x).map_err(Into::into)
    })?;
    let ei = stage("ei", epoch, {
        pair_embeddings_on_tape(tape, z, &table.pairs, n_states).and_then(|e| {
            let projected = vars.phi_e.apply(tape, e)?;
            loss_e_to_i_on_tape(tape, projected, images, &table.targets, config.temperature)
        })
    })?;
    let ie = stage("ie", epoch, {
        pair_embeddings_on_tape(tape, z, &batch.labels, n_states).and_then(|e| {
            let projected = vars.phi_e.apply(tape, e)?;
            loss_i_to_e_on_tape(tape, projected, images, config.temperature)
        })
    })?;
    let total = stage("total", epoch, {
        (|| {
            let a = tape.scale(ei, config.lambda_ei)?;
            let b = tape.scale(ie, config.lambda_ie)?;
            let s = tape.add(elbo.total, a)?;
            tape.add(s, b)
        })()
        .map_err(ComposerError::from)
    })?;
    Ok((total, [elbo.total, elbo.kl, elbo.edge, ei, ie]))
}

fn breakdown(tape: &Tape, total: Var, parts: [Var; 5]) -> Result<LossBreakdown, ComposerError> {
    let v = |x: Var| tape.scalar_value(x);
    Ok(LossBreakdown {
        total: v(total)?,
        elbo: v(parts[0])?,
        kl: v(parts[1])?,
        edge: v(parts[2])?,
        ei: v(parts[3])?,
        ie: v(parts[4])?,
    })
}

/// Loss and gradients (in `tensors()` order) for one batch.
pub fn batch_loss_and_grads(
    model: &CvgaeModel,
    graph: &ConceptGraph,
    batch: &Batch,
    table: &PairTable,
    noise: Option<&Tensor>,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Vec<Tensor>), ComposerError> {
    batch_loss_and_grads_at(model, graph, batch, table, noise, config, 0)
}

fn batch_loss_and_grads_at(
    model: &CvgaeModel,
    graph: &ConceptGraph,
    batch: &Batch,
    table: &PairTable,
    noise: Option<&Tensor>,
    config: &TrainConfig,
    epoch: usize,
) -> Result<(LossBreakdown, Vec<Tensor>), ComposerError> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, true);
    let (total, parts) = total_loss_on_tape(&mut tape, &vars, graph, batch, table, noise, config, epoch)?;
    tape.backward(total)?;
    let grads = vars.all().into_iter().map(|v| tape.grad_or_zeros(v)).collect();
    Ok((breakdown(&tape, total, parts)?, grads))
}

/// Loss of one batch without gradients.
pub fn batch_loss(
    model: &CvgaeModel,
    graph: &ConceptGraph,
    batch: &Batch,
    table: &PairTable,
    noise: Option<&Tensor>,
    config: &TrainConfig,
) -> Result<LossBreakdown, ComposerError> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let (total, parts) = total_loss_on_tape(&mut tape, &vars, graph, batch, table, noise, config, 0)?;
    breakdown(&tape, total, parts)
}

/// Per-epoch training record; serialised as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_elbo: f64,
    pub loss_kl: f64,
    pub loss_edge: f64,
    pub loss_ei: f64,
    pub loss_ie: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CvgaeModel,
    pub log: Vec<EpochRecord>,
}

/// Candidate pairs of `world`, sorted state-major.
pub fn candidate_pairs(dataset: &Dataset, world: World) -> Vec<CompositionLabel> {
    dataset.splits.output_space(&dataset.vocab, world)
}

fn make_batch(dataset: &Dataset, indices: &[usize]) -> Result<Batch, ComposerError> {
    let train = &dataset.splits.train;
    let ids: Vec<usize> = indices.iter().map(|&i| train[i].image_id).collect();
    Ok(Batch {
        features: dataset.features.features().gather_rows(&ids)?,
        labels: indices.iter().map(|&i| train[i].label).collect(),
    })
}

/// Deterministic objective over the whole training split with posterior
/// means and a fixed pair table; used to compare parameter sets.
pub fn evaluate_losses(
    model: &CvgaeModel,
    dataset: &Dataset,
    graph: &ConceptGraph,
    config: &TrainConfig,
) -> Result<LossBreakdown, ComposerError> {
    let indices: Vec<usize> = (0..dataset.splits.train.len()).collect();
    let batch = make_batch(dataset, &indices)?;
    let candidates = candidate_pairs(dataset, config.world);
    let mut rng = stream_rng(config.seed, Stream::NegativeSampling);
    let table = PairTable::for_batch(&candidates, &batch.labels, config.pair_cap, config.neg_samples, &mut rng)?;
    batch_loss(model, graph, &batch, &table, None, config)
}

/// Adam over shuffled mini-batches of the training split.
///
/// Deterministic for a fixed `config.seed`: shuffling, reparameterisation
/// noise and negative sampling each draw from their own seeded stream.
pub fn train(
    dataset: &Dataset,
    graph: &ConceptGraph,
    mut model: CvgaeModel,
    config: &TrainConfig,
) -> Result<TrainOutcome, ComposerError> {
    config.validate()?;
    if dataset.splits.train.is_empty() && config.epochs > 0 {
        return Err(ComposerError::EmptyBatch);
    }
    let model_config = model.config();
    if dataset.features.dim() != model_config.d {
        return Err(ComposerError::Dimension(format!(
            "image features are {}-dimensional, model expects d = {}",
            dataset.features.dim(),
            model_config.d
        )));
    }
    let candidates = candidate_pairs(dataset, config.world);
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut shuffle_rng: ChaCha8Rng = stream_rng(config.seed, Stream::Shuffle);
    let mut noise_rng = stream_rng(config.seed, Stream::Reparameterize);
    let mut negative_rng = stream_rng(config.seed, Stream::NegativeSampling);
    let (n, h) = (graph.n_nodes(), model_config.h);
    let mut order: Vec<usize> = (0..dataset.splits.train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = make_batch(dataset, chunk)?;
            let table = PairTable::for_batch(
                &candidates,
                &batch.labels,
                config.pair_cap,
                config.neg_samples,
                &mut negative_rng,
            )?;
            let noise = vgae::standard_normal(n, h, &mut noise_rng);
            let (loss, grads) = batch_loss_and_grads_at(&model, graph, &batch, &table, Some(&noise), config, epoch)?;
            adam.step(&mut model.tensors_mut(), &grads)?;
            sums.total += loss.total;
            sums.elbo += loss.elbo;
            sums.kl += loss.kl;
            sums.edge += loss.edge;
            sums.ei += loss.ei;
            sums.ie += loss.ie;
            batches += 1;
        }
        let k = batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            loss_total: sums.total / k,
            loss_elbo: sums.elbo / k,
            loss_kl: sums.kl / k,
            loss_edge: sums.edge / k,
            loss_ei: sums.ei / k,
            loss_ie: sums.ie / k,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::debug!(
            "epoch {epoch}: total {:.5} elbo {:.5} ei {:.5} ie {:.5}",
            record.loss_total,
            record.loss_elbo,
            record.loss_ei,
            record.loss_ie
        );
        log.push(record);
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_graph, generate_synthetic, SyntheticSpec};
    use crate::numerics::finite_difference_check;
    use proptest::prelude::*;

    fn label(s: usize, o: usize) -> CompositionLabel {
        CompositionLabel::new(s, o)
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        generate_synthetic(&SyntheticSpec {
            n_states: 6,
            n_objects: 5,
            seen_fraction: 0.5,
            unseen_fraction: 0.25,
            d: 6,
            m: 4,
            samples_per_pair: 2,
            noise_sigma: 0.1,
            seed,
        })
        .unwrap()
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            m: 4,
            d: 6,
            hidden: 5,
            h: 3,
            k: 4,
            layers: 2,
        }
    }

    #[test]
    fn pair_embedding_examples() {
        let z = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pair_embeddings(&z, &[label(0, 0)], 1).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let dup = pair_embeddings(&z, &[label(0, 0), label(0, 0)], 1).unwrap();
        assert_eq!(dup.row(0), dup.row(1));

        let z = Tensor::new(4, 1, vec![10.0, 20.0, 1.0, 2.0]).unwrap();
        let all = [label(0, 0), label(0, 1), label(1, 0), label(1, 1)];
        let e = pair_embeddings(&z, &all, 2).unwrap();
        assert_eq!(e.data(), &[10.0, 1.0, 10.0, 2.0, 20.0, 1.0, 20.0, 2.0]);
        assert!(matches!(
            pair_embeddings(&z, &[label(2, 0)], 2),
            Err(ComposerError::PairOutOfRange { .. })
        ));
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[1.0, -4.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn composition_side_loss_examples() {
        let one = Tensor::new(1, 2, vec![0.3, 0.4]).unwrap();
        assert!(loss_e_to_i(&one, &one, &[0]).unwrap().abs() < 1e-15);

        // logits [2, 0] via a 1-d space: pairs [2], [0]; image [1]
        let pairs = Tensor::new(2, 1, vec![2.0, 0.0]).unwrap();
        let image = Tensor::new(1, 1, vec![1.0]).unwrap();
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((loss_e_to_i(&pairs, &image, &[0]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.126_928).abs() < 1e-6);

        assert!(matches!(loss_e_to_i(&pairs, &Tensor::zeros(0, 1), &[]), Err(ComposerError::EmptyBatch)));
    }

    #[test]
    fn composition_side_loss_is_shift_invariant() {
        // a constant extra coordinate shared by every pair adds the same
        // amount to each logit of an image
        let pairs = Tensor::new(3, 2, vec![0.2, 1.0, -1.3, 1.0, 0.7, 1.0]).unwrap();
        let images = Tensor::new(2, 2, vec![1.5, 0.0, -0.4, 0.0]).unwrap();
        let shifted = Tensor::new(2, 2, vec![1.5, 3.0, -0.4, -2.0]).unwrap();
        let a = loss_e_to_i(&pairs, &images, &[2, 0]).unwrap();
        let b = loss_e_to_i(&pairs, &shifted, &[2, 0]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn image_side_loss_examples() {
        let one = Tensor::new(1, 2, vec![0.3, 0.4]).unwrap();
        assert!(loss_i_to_e(&one, &one).unwrap().abs() < 1e-15);

        let identity = Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss_i_to_e(&identity, &identity).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.313_262).abs() < 1e-6);

        // duplicated image rows give every pair identical logits over the batch
        let pairs = Tensor::new(4, 2, vec![0.5, 1.0, -2.0, 0.3, 1.1, 0.0, 0.2, 0.2]).unwrap();
        let images = Tensor::new(4, 2, vec![0.7, -0.1, 0.7, -0.1, 0.7, -0.1, 0.7, -0.1]).unwrap();
        assert!((loss_i_to_e(&pairs, &images).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn only_the_composition_side_sees_extra_candidates() {
        let mut rng = stream_rng(3, Stream::Init);
        let pairs = Tensor::random_normal(3, 4, 1.0, &mut rng);
        let images = Tensor::random_normal(2, 4, 1.0, &mut rng);
        let extra = Tensor::random_normal(1, 4, 1.0, &mut rng);
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| pairs.row(i).to_vec()).collect();
        rows.push(extra.row(0).to_vec());
        let larger = Tensor::from_rows(&rows).unwrap();
        let batch_pairs = pairs.gather_rows(&[1, 2]).unwrap();

        let before = loss_e_to_i(&pairs, &images, &[1, 2]).unwrap();
        let after = loss_e_to_i(&larger, &images, &[1, 2]).unwrap();
        assert!(after > before);
        // the image-side loss only depends on the batch's own pairs
        let ie = loss_i_to_e(&batch_pairs, &images).unwrap();
        let ie_again = loss_i_to_e(&larger.gather_rows(&[1, 2]).unwrap(), &images).unwrap();
        assert_eq!(ie, ie_again);
    }

    #[test]
    fn output_space_sizes_follow_the_vocabulary() {
        // UT-Zappos shape: 16 states, 12 objects, 116 closed-world pairs
        let vocab = crate::data::ConceptVocabulary::numbered(16, 12).unwrap();
        let all = vocab.all_pairs();
        let splits = crate::data::DatasetSplits {
            seen_pairs: all[..83].to_vec(),
            unseen_pairs: all[83..116].to_vec(),
            train: vec![],
            val: vec![],
            test: vec![],
            world: World::ClosedWorld,
        };
        assert_eq!(splits.output_space(&vocab, World::ClosedWorld).len(), 116);
        assert_eq!(splits.output_space(&vocab, World::OpenWorld).len(), 192);
    }

    fn batch_of(dataset: &Dataset, n: usize) -> Batch {
        let indices: Vec<usize> = (0..n.min(dataset.splits.train.len())).collect();
        make_batch(dataset, &indices).unwrap()
    }

    #[test]
    fn zero_lambdas_reduce_to_the_elbo() {
        let ds = tiny_dataset(2);
        let graph = build_graph(&ds.vocab, &ds.splits, ds.node_features.clone().unwrap()).unwrap();
        let model = CvgaeModel::init(&tiny_config(), 2).unwrap();
        let batch = batch_of(&ds, 8);
        let candidates = candidate_pairs(&ds, World::ClosedWorld);
        let table = PairTable::for_batch(&candidates, &batch.labels, 50_000, 0, &mut stream_rng(0, Stream::NegativeSampling))
            .unwrap();
        let config = TrainConfig {
            lambda_ei: 0.0,
            lambda_ie: 0.0,
            ..TrainConfig::default()
        };
        let loss = batch_loss(&model, &graph, &batch, &table, None, &config).unwrap();
        assert_eq!(loss.total, loss.elbo);
        let direct = vgae::mean_elbo(&graph, &model.encoder, config.kl_weight).unwrap();
        assert!((loss.elbo - direct).abs() < 1e-12);
    }

    #[test]
    fn loss_is_finite_and_positive_at_init() {
        let ds = tiny_dataset(4);
        let graph = build_graph(&ds.vocab, &ds.splits, ds.node_features.clone().unwrap()).unwrap();
        let batch = batch_of(&ds, 10);
        let candidates = candidate_pairs(&ds, World::ClosedWorld);
        let table =
            PairTable::for_batch(&candidates, &batch.labels, 50_000, 0, &mut stream_rng(0, Stream::NegativeSampling)).unwrap();
        for seed in 0..20 {
            let model = CvgaeModel::init(&tiny_config(), seed).unwrap();
            let noise = vgae::standard_normal(graph.n_nodes(), 3, &mut stream_rng(seed, Stream::Reparameterize));
            let loss = batch_loss(&model, &graph, &batch, &table, Some(&noise), &TrainConfig::default()).unwrap();
            assert!(loss.total.is_finite() && loss.total > 0.0, "seed {seed}: {loss:?}");
        }
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let ds = tiny_dataset(1);
        let graph = build_graph(&ds.vocab, &ds.splits, ds.node_features.clone().unwrap()).unwrap();
        let model = (0..100)
            .map(|seed| CvgaeModel::init(&tiny_config(), seed).unwrap())
            .find(|m| vgae::gradient_resolvable(&graph, &m.encoder).unwrap())
            .unwrap();
        let batch = batch_of(&ds, 6);
        let candidates = candidate_pairs(&ds, World::ClosedWorld);
        let table =
            PairTable::for_batch(&candidates, &batch.labels, 50_000, 0, &mut stream_rng(0, Stream::NegativeSampling)).unwrap();
        let noise = vgae::standard_normal(graph.n_nodes(), 3, &mut stream_rng(5, Stream::Reparameterize));
        let config = TrainConfig::default();
        let f = |values: &[Tensor]| -> Result<(f64, Vec<Tensor>), ComposerError> {
            let mut m = model.clone();
            m.set_tensors(values)?;
            let (loss, grads) = batch_loss_and_grads(&m, &graph, &batch, &table, Some(&noise), &config)?;
            Ok((loss.total, grads))
        };
        let start: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
        let report = finite_difference_check(f, &start, 1e-5, 1e-4).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn sampled_pair_table_keeps_targets() {
        let candidates: Vec<_> = (0..40).map(|i| label(i / 8, i % 8)).collect();
        let labels = vec![label(4, 7), label(0, 0), label(4, 7)];
        let mut rng = stream_rng(1, Stream::NegativeSampling);
        let table = PairTable::for_batch(&candidates, &labels, 10, 5, &mut rng).unwrap();
        assert!(table.pairs.len() <= 7 && table.pairs.len() >= 5);
        for (t, l) in table.targets.iter().zip(&labels) {
            assert_eq!(table.pairs[*t], *l);
        }
        let exact = PairTable::for_batch(&candidates, &labels, 40, 5, &mut rng).unwrap();
        assert_eq!(exact.pairs, candidates);
        assert!(PairTable::for_batch(&candidates, &[label(9, 9)], 40, 5, &mut rng).is_err());
    }

    #[test]
    fn zero_epochs_leave_the_model_unchanged() {
        let ds = tiny_dataset(3);
        let graph = build_graph(&ds.vocab, &ds.splits, ds.node_features.clone().unwrap()).unwrap();
        let model = CvgaeModel::init(&tiny_config(), 3).unwrap();
        let out = train(
            &ds,
            &graph,
            model.clone(),
            &TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.model, model);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let ds = tiny_dataset(3);
        let graph = build_graph(&ds.vocab, &ds.splits, ds.node_features.clone().unwrap()).unwrap();
        let config = TrainConfig {
            epochs: 30,
            lr: 1e-2,
            batch_size: 8,
            kl_weight: 0.01,
            seed: 9,
            ..TrainConfig::default()
        };
        let model = CvgaeModel::init(&tiny_config(), 9).unwrap();
        let before = evaluate_losses(&model, &ds, &graph, &config).unwrap();
        let a = train(&ds, &graph, model.clone(), &config).unwrap();
        let b = train(&ds, &graph, model, &config).unwrap();
        assert_eq!(a.model, b.model);
        let after = evaluate_losses(&a.model, &ds, &graph, &config).unwrap();
        assert!(after.total < before.total, "{before:?} -> {after:?}");
        assert_eq!(a.log.len(), 30);
        assert_eq!(a.log[0].epoch, 1);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let ds = tiny_dataset(3);
        let graph = build_graph(&ds.vocab, &ds.splits, ds.node_features.clone().unwrap()).unwrap();
        let mut config = tiny_config();
        config.d = 7;
        let model = CvgaeModel::init(&config, 0).unwrap();
        assert!(matches!(
            train(&ds, &graph, model, &TrainConfig::default()),
            Err(ComposerError::Dimension(_))
        ));
    }

    #[test]
    fn non_finite_loss_names_the_component() {
        let ds = tiny_dataset(3);
        let graph = build_graph(&ds.vocab, &ds.splits, ds.node_features.clone().unwrap()).unwrap();
        let mut model = CvgaeModel::init(&tiny_config(), 0).unwrap();
        model.projection.phi_i.w2 = model.projection.phi_i.w2.map(|v| v * 1e300);
        model.projection.phi_e.w2 = model.projection.phi_e.w2.map(|v| v * 1e300);
        let err = train(&ds, &graph, model, &TrainConfig::default()).unwrap_err();
        match err {
            ComposerError::NonFiniteLoss { component, epoch, .. } => {
                assert_eq!(component, "ei");
                assert_eq!(epoch, 1);
            }
            other => panic!("unexpected {other}"),
        }
    }

    proptest! {
        #[test]
        fn similarity_is_symmetric(a in proptest::collection::vec(-5.0f64..5.0, 4), b in proptest::collection::vec(-5.0f64..5.0, 4)) {
            prop_assert_eq!(similarity(&a, &b).unwrap(), similarity(&b, &a).unwrap());
        }

        #[test]
        fn contrastive_losses_are_non_negative(values in proptest::collection::vec(-3.0f64..3.0, 18), t0 in 0usize..3, t1 in 0usize..3) {
            let pairs = Tensor::new(3, 3, values[..9].to_vec()).unwrap();
            let images = Tensor::new(3, 3, values[9..].to_vec()).unwrap();
            prop_assert!(loss_e_to_i(&pairs, &images.slice_rows(0, 2).unwrap(), &[t0, t1]).unwrap() >= 0.0);
            prop_assert!(loss_i_to_e(&pairs, &images).unwrap() >= 0.0);
        }
    }
}
