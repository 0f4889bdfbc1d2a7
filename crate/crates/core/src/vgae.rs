//! Variational graph autoencoder over the concept graph.
//!
//! A GraphSAGE-mean encoder maps node features to per-node Gaussian
//! posteriors; latents are decoded into state–object edge probabilities by a
//! sigmoid of their dot product.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::ConceptGraph;
use crate::numerics::{sigmoid, softplus, Adam, AdamConfig, NumericsError, SparseMatrix, Tape, Tensor, Var};
use crate::rng::{stream_rng, Stream};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Debug, thiserror::Error)]
pub enum VgaeError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid encoder config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Node feature dimension.
    pub m: usize,
    pub hidden: usize,
    /// Latent dimension.
    pub h: usize,
    pub layers: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), VgaeError> {
        if self.m == 0 || self.hidden == 0 || self.h == 0 || self.layers == 0 {
            return Err(VgaeError::Config(format!(
                "m, hidden, h and layers must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One mean-aggregation layer: `relu(H·W_self + mean_N(H)·W_neigh)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SageLayer {
    pub w_self: Tensor,
    pub w_neigh: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<SageLayer>,
    pub w_mu: Tensor,
    pub w_logvar: Tensor,
}

fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    Tensor::random_normal(fan_in, fan_out, (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self, VgaeError> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.layers);
        let mut input = config.m;
        for _ in 0..config.layers {
            layers.push(SageLayer {
                w_self: glorot(input, config.hidden, rng),
                w_neigh: glorot(input, config.hidden, rng),
            });
            input = config.hidden;
        }
        Ok(Self {
            layers,
            w_mu: glorot(config.hidden, config.h, rng),
            w_logvar: glorot(config.hidden, config.h, rng),
        })
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            m: self.input_dim(),
            hidden: self.w_mu.rows(),
            h: self.latent_dim(),
            layers: self.layers.len(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(self.w_mu.rows(), |l| l.w_self.rows())
    }

    pub fn latent_dim(&self) -> usize {
        self.w_mu.cols()
    }

    /// Parameters in their fixed serialisation order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.layers.iter().flat_map(|l| [&l.w_self, &l.w_neigh]).collect();
        out.push(&self.w_mu);
        out.push(&self.w_logvar);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.w_self, &mut l.w_neigh])
            .collect();
        out.push(&mut self.w_mu);
        out.push(&mut self.w_logvar);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.layers.len())
            .flat_map(|i| [format!("encoder.{i}.w_self"), format!("encoder.{i}.w_neigh")])
            .collect();
        out.push("encoder.w_mu".into());
        out.push("encoder.w_logvar".into());
        out
    }

    /// Registers every parameter on `tape`, as leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let mut put = |t: &Tensor| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
        EncoderVars {
            layers: self.layers.iter().map(|l| (put(&l.w_self), put(&l.w_neigh))).collect(),
            w_mu: put(&self.w_mu),
            w_logvar: put(&self.w_logvar),
        }
    }
}

/// Tape handles for [`EncoderParams`], same order as `tensors()`.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub layers: Vec<(Var, Var)>,
    pub w_mu: Var,
    pub w_logvar: Var,
}

impl EncoderVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.layers.iter().flat_map(|&(a, b)| [a, b]).collect();
        out.push(self.w_mu);
        out.push(self.w_logvar);
        out
    }
}

/// Per-node `(μ, log σ²)`, each `N×h`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianNodePosteriors {
    pub mu: Tensor,
    pub logvar: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mu: Var,
    pub logvar: Var,
}

/// One reparameterised draw and the noise behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNodes {
    pub z: Tensor,
    pub noise: Tensor,
}

pub fn encode_on_tape(
    tape: &mut Tape,
    graph: &ConceptGraph,
    vars: &EncoderVars,
) -> Result<PosteriorVars, VgaeError> {
    encode_features_on_tape(tape, graph.node_features(), graph.aggregator(), vars)
}

/// The encoder over an arbitrary node set; `aggregator` is the row-mean
/// neighbourhood operator.
pub fn encode_features_on_tape(
    tape: &mut Tape,
    features: &Tensor,
    aggregator: &Arc<SparseMatrix>,
    vars: &EncoderVars,
) -> Result<PosteriorVars, VgaeError> {
    let m = features.cols();
    if let Some(&(w, _)) = vars.layers.first() {
        let expected = tape.value(w).rows();
        if expected != m {
            return Err(VgaeError::Dimension(format!(
                "graph has {m}-dimensional node features, encoder expects {expected}"
            )));
        }
    }
    if aggregator.rows() != features.rows() || aggregator.cols() != features.rows() {
        return Err(VgaeError::Dimension(format!(
            "aggregator is {}x{} for {} nodes",
            aggregator.rows(),
            aggregator.cols(),
            features.rows()
        )));
    }
    let mut hidden = tape.constant(features.clone());
    for &(w_self, w_neigh) in &vars.layers {
        let own = tape.matmul(hidden, w_self)?;
        let mean = tape.sparse_matmul(aggregator.clone(), hidden)?;
        let neigh = tape.matmul(mean, w_neigh)?;
        let pre = tape.add(own, neigh)?;
        hidden = tape.relu(pre)?;
    }
    let hidden = tape.row_l2_normalize(hidden)?;
    let mu = tape.matmul(hidden, vars.w_mu)?;
    let raw_logvar = tape.matmul(hidden, vars.w_logvar)?;
    let logvar = tape.clamp(raw_logvar, LOGVAR_MIN, LOGVAR_MAX)?;
    Ok(PosteriorVars { mu, logvar })
}

/// `z = μ + exp(½ log σ²) ⊙ ε` with `ε` a constant on the tape.
pub fn reparameterize_on_tape(tape: &mut Tape, post: PosteriorVars, noise: &Tensor) -> Result<Var, VgaeError> {
    let half = tape.scale(post.logvar, 0.5)?;
    let std = tape.exp(half)?;
    let eps = tape.constant(noise.clone());
    let spread = tape.elementwise_mul(std, eps)?;
    Ok(tape.add(post.mu, spread)?)
}

/// `|S|×|O|` logits `z_s · z_o`.
pub fn decode_logits_on_tape(tape: &mut Tape, z: Var, n_states: usize) -> Result<Var, VgaeError> {
    let n = tape.value(z).rows();
    if n_states > n {
        return Err(VgaeError::Dimension(format!("{n_states} states but only {n} latent rows")));
    }
    let states: Vec<usize> = (0..n_states).collect();
    let objects: Vec<usize> = (n_states..n).collect();
    let zs = tape.gather_rows(z, &states)?;
    let zo = tape.gather_rows(z, &objects)?;
    Ok(tape.matmul_nt(zs, zo)?)
}

/// `Σ ½(μ² + σ² − 1 − log σ²)` over all nodes and dimensions.
pub fn kl_on_tape(tape: &mut Tape, post: PosteriorVars) -> Result<Var, VgaeError> {
    let mu_sq = tape.elementwise_mul(post.mu, post.mu)?;
    let var = tape.exp(post.logvar)?;
    let a = tape.add(mu_sq, var)?;
    let b = tape.sub(a, post.logvar)?;
    let c = tape.add_scalar(b, -1.0)?;
    let total = tape.reduce_sum(c)?;
    Ok(tape.scale(total, 0.5)?)
}

/// Weighted BCE over the bipartite block, averaged over `|S|·|O|`.
pub fn edge_term_on_tape(tape: &mut Tape, logits: Var, graph: &ConceptGraph) -> Result<Var, VgaeError> {
    Ok(tape.bce_with_logits(logits, &graph.adjacency_block(), graph.pos_weight())?)
}

#[derive(Clone, Copy, Debug)]
pub struct ElboVars {
    pub total: Var,
    pub kl: Var,
    pub edge: Var,
}

pub fn elbo_on_tape(
    tape: &mut Tape,
    post: PosteriorVars,
    logits: Var,
    graph: &ConceptGraph,
    kl_weight: f64,
) -> Result<ElboVars, VgaeError> {
    let kl = kl_on_tape(tape, post)?;
    let edge = edge_term_on_tape(tape, logits, graph)?;
    let weighted = tape.scale(kl, kl_weight)?;
    let total = tape.add(weighted, edge)?;
    Ok(ElboVars { total, kl, edge })
}

/// Posterior parameters without gradient tracking.
pub fn encode(graph: &ConceptGraph, params: &EncoderParams) -> Result<GaussianNodePosteriors, VgaeError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let post = encode_on_tape(&mut tape, graph, &vars)?;
    Ok(GaussianNodePosteriors {
        mu: tape.value(post.mu).clone(),
        logvar: tape.value(post.logvar).clone(),
    })
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(rows, cols, data).expect("consistent shape")
}

pub fn reparameterize<R: Rng + ?Sized>(post: &GaussianNodePosteriors, rng: &mut R) -> Result<LatentNodes, VgaeError> {
    let noise = standard_normal(post.mu.rows(), post.mu.cols(), rng);
    let std = post.logvar.map(|lv| (0.5 * lv).exp());
    let z = post.mu.add(&std.hadamard(&noise)?)?.ensure_finite("reparameterize")?;
    Ok(LatentNodes { z, noise })
}

/// Reparameterisation from the seeded noise stream.
pub fn reparameterize_seeded(post: &GaussianNodePosteriors, seed: u64) -> Result<LatentNodes, VgaeError> {
    reparameterize(post, &mut stream_rng(seed, Stream::Reparameterize))
}

pub fn decode_logits(z: &Tensor, n_states: usize) -> Result<Tensor, VgaeError> {
    if n_states > z.rows() {
        return Err(VgaeError::Dimension(format!("{n_states} states but only {} latent rows", z.rows())));
    }
    let zs = z.slice_rows(0, n_states)?;
    let zo = z.slice_rows(n_states, z.rows())?;
    Ok(zs.matmul_nt(&zo)?)
}

/// `σ(z_s · z_o)` for every state–object pair.
pub fn decode_edges(z: &Tensor, n_states: usize) -> Result<Tensor, VgaeError> {
    Ok(decode_logits(z, n_states)?.map(sigmoid))
}

pub fn kl_term(post: &GaussianNodePosteriors) -> f64 {
    post.mu
        .data()
        .iter()
        .zip(post.logvar.data())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Weighted BCE from logits against a 0/1 block, averaged over entries.
pub fn edge_reconstruction_term(logits: &Tensor, adjacency: &Tensor, pos_weight: f64) -> Result<f64, VgaeError> {
    if logits.shape() != adjacency.shape() {
        return Err(VgaeError::Dimension(format!(
            "logits {:?} vs adjacency {:?}",
            logits.shape(),
            adjacency.shape()
        )));
    }
    let total: f64 = logits
        .data()
        .iter()
        .zip(adjacency.data())
        .map(|(&x, &a)| pos_weight * a * softplus(-x) + (1.0 - a) * softplus(x))
        .sum();
    Ok(total / logits.len().max(1) as f64)
}

pub fn elbo_loss(
    post: &GaussianNodePosteriors,
    logits: &Tensor,
    graph: &ConceptGraph,
    kl_weight: f64,
) -> Result<f64, VgaeError> {
    let edge = edge_reconstruction_term(logits, &graph.adjacency_block(), graph.pos_weight())?;
    Ok(kl_weight * kl_term(post) + edge)
}

/// Settings for fitting the autoencoder on its own.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VgaeFitConfig {
    pub steps: usize,
    pub lr: f64,
    pub kl_weight: f64,
    pub seed: u64,
}

/// Per-step ELBO history of [`fit`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitHistory {
    pub elbo: Vec<f64>,
}

/// ELBO with the posterior mean in place of a sample; the deterministic
/// objective used to compare parameter sets.
pub fn mean_elbo(graph: &ConceptGraph, params: &EncoderParams, kl_weight: f64) -> Result<f64, VgaeError> {
    let post = encode(graph, params)?;
    let logits = decode_logits(&post.mu, graph.n_states())?;
    elbo_loss(&post, &logits, graph, kl_weight)
}

/// Minimises the ELBO alone with Adam, one reparameterised draw per step.
pub fn fit(graph: &ConceptGraph, params: &mut EncoderParams, config: &VgaeFitConfig) -> Result<FitHistory, VgaeError> {
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut noise_rng = stream_rng(config.seed, Stream::Reparameterize);
    let mut history = FitHistory::default();
    let (n, h) = (graph.n_nodes(), params.latent_dim());
    for _ in 0..config.steps {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let post = encode_on_tape(&mut tape, graph, &vars)?;
        let noise = standard_normal(n, h, &mut noise_rng);
        let z = reparameterize_on_tape(&mut tape, post, &noise)?;
        let logits = decode_logits_on_tape(&mut tape, z, graph.n_states())?;
        let elbo = elbo_on_tape(&mut tape, post, logits, graph, config.kl_weight)?;
        history.elbo.push(tape.scalar_value(elbo.total)?);
        tape.backward(elbo.total)?;
        let grads: Vec<Tensor> = vars.all().into_iter().map(|v| tape.grad_or_zeros(v)).collect();
        adam.step(&mut params.tensors_mut(), &grads)?;
    }
    Ok(history)
}

/// Whether central differences can resolve every encoder gradient: each
/// ReLU pre-activation sits at least `1e-3` from the kink and every final
/// hidden row keeps two or more live units (with one, the normalised row is
/// constant and its true gradient is below rounding noise).
pub fn gradient_resolvable(graph: &ConceptGraph, params: &EncoderParams) -> Result<bool, VgaeError> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let mut hidden = tape.constant(graph.node_features().clone());
    for &(w_self, w_neigh) in &vars.layers {
        let own = tape.matmul(hidden, w_self)?;
        let mean = tape.sparse_matmul(graph.aggregator().clone(), hidden)?;
        let neigh = tape.matmul(mean, w_neigh)?;
        let pre = tape.add(own, neigh)?;
        if tape.value(pre).data().iter().any(|v| v.abs() < 1e-3) {
            return Ok(false);
        }
        hidden = tape.relu(pre)?;
    }
    let last = tape.value(hidden);
    Ok((0..last.rows()).all(|i| last.row(i).iter().filter(|&&v| v > 0.0).count() >= 2))
}
