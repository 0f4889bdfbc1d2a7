//! End-to-end steps shared by the command line and the test suites.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::composer::{candidate_pairs, train, ComposerError, CvgaeModel, EpochRecord};
use crate::config::RunConfig;
use crate::data::{build_graph, load_dataset, CompositionLabel, ConceptGraph, DataError, Dataset, Sample, World};
use crate::evaluation::{
    apply_feasibility, build_queries, calibrate_tau, evaluate_gczsl, evaluate_retrieval, feasibility_mask,
    feasibility_scores, posterior_means, predicted_objects, score_matrix, EvalError, EvalReport, FeasibilityMask,
    RetrievalReport, ScoreMatrix,
};
use crate::numerics::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Composer(#[from] ComposerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Which evaluation split to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Val,
    Test,
}

impl Split {
    fn samples(self, dataset: &Dataset) -> &[Sample] {
        match self {
            Split::Val => &dataset.splits.val,
            Split::Test => &dataset.splits.test,
        }
    }
}

/// A loaded dataset and its concept graph.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub graph: ConceptGraph,
}

impl Prepared {
    pub fn new(dataset: Dataset, node_features: Tensor) -> Result<Self, PipelineError> {
        let graph = build_graph(&dataset.vocab, &dataset.splits, node_features)?;
        Ok(Self { dataset, graph })
    }

    pub fn n_states(&self) -> usize {
        self.dataset.vocab.n_states()
    }

    pub fn seen(&self) -> HashSet<CompositionLabel> {
        self.dataset.splits.seen_set()
    }

    pub fn split_features(&self, split: Split) -> Result<(Tensor, Vec<CompositionLabel>), PipelineError> {
        let samples = split.samples(&self.dataset);
        let ids: Vec<usize> = samples.iter().map(|s| s.image_id).collect();
        let features = self
            .dataset
            .features
            .features()
            .gather_rows(&ids)
            .map_err(EvalError::from)?;
        Ok((features, samples.iter().map(|s| s.label).collect()))
    }

    /// Image-by-pair scores of `split` over the output space of `world`.
    pub fn scores(&self, model: &CvgaeModel, split: Split, world: World) -> Result<(ScoreMatrix, Vec<CompositionLabel>), PipelineError> {
        let mu = posterior_means(model, &self.graph)?;
        let (features, labels) = self.split_features(split)?;
        let pairs = candidate_pairs(&self.dataset, world);
        let scores = score_matrix(model, &mu, self.n_states(), &features, &pairs, &self.seen())?;
        Ok((scores, labels))
    }

    pub fn edge_probabilities(&self, model: &CvgaeModel) -> Result<Tensor, PipelineError> {
        let mu = posterior_means(model, &self.graph)?;
        Ok(feasibility_scores(&mu, self.n_states())?)
    }
}

/// Loads the configured dataset. Node features come from the checkpoint
/// when one is given, otherwise from the dataset or a seeded draw.
pub fn prepare(config: &RunConfig, checkpoint: Option<&Checkpoint>) -> Result<Prepared, PipelineError> {
    let dataset = load_dataset(&config.dataset_dir)?.with_world(config.world);
    let node_features = match checkpoint {
        Some(c) => c.node_features.clone(),
        None => {
            let m = dataset.node_features.as_ref().map_or(config.model.node_dim, |nf| nf.cols());
            dataset.node_features_or_init(m, config.train.seed)?
        }
    };
    let prepared = Prepared::new(dataset, node_features)?;
    if let Some(c) = checkpoint {
        let expected = config.model_config(c.node_features.cols(), prepared.dataset.features.dim());
        c.check_compatible(&expected, prepared.graph.n_nodes())?;
    }
    Ok(prepared)
}

pub fn run_train(config: &RunConfig, prepared: &Prepared) -> Result<(Checkpoint, Vec<EpochRecord>), PipelineError> {
    let model_config = config.model_config(prepared.graph.feature_dim(), prepared.dataset.features.dim());
    let model = CvgaeModel::init(&model_config, config.train.seed)?;
    let outcome = train(&prepared.dataset, &prepared.graph, model, &config.train_config())?;
    let checkpoint = Checkpoint {
        model: outcome.model,
        node_features: prepared.graph.node_features().clone(),
        seed: config.train.seed,
    };
    Ok((checkpoint, outcome.log))
}

/// Decides tau for the open world: calibrated on validation when asked,
/// otherwise the configured value.
pub fn choose_tau(config: &RunConfig, prepared: &Prepared, model: &CvgaeModel) -> Result<f64, PipelineError> {
    if !config.eval.calibrate {
        return Ok(config.eval.tau);
    }
    let (val, labels) = prepared.scores(model, Split::Val, World::OpenWorld)?;
    let probs = prepared.edge_probabilities(model)?;
    let calibration = calibrate_tau(&val, &labels, &probs, &config.eval.tau_grid, config.eval.n_bias_points)?;
    log::info!("calibrated tau = {} over {:?}", calibration.tau, calibration.objective);
    Ok(calibration.tau)
}

pub fn feasibility(config: &RunConfig, prepared: &Prepared, model: &CvgaeModel) -> Result<(Tensor, FeasibilityMask), PipelineError> {
    let tau = choose_tau(config, prepared, model)?;
    let probs = prepared.edge_probabilities(model)?;
    let mask = feasibility_mask(&probs, tau, &prepared.seen())?;
    Ok((probs, mask))
}

/// Scores a split in the configured world; the open world is masked by
/// feasibility. Returns the scores, labels and the tau applied.
pub fn scored_split(
    config: &RunConfig,
    prepared: &Prepared,
    model: &CvgaeModel,
    split: Split,
) -> Result<(ScoreMatrix, Vec<CompositionLabel>, Option<f64>), PipelineError> {
    let (scores, labels) = prepared.scores(model, split, config.world)?;
    match config.world {
        World::ClosedWorld => Ok((scores, labels, None)),
        World::OpenWorld => {
            let (_, mask) = feasibility(config, prepared, model)?;
            Ok((apply_feasibility(&scores, &mask)?, labels, Some(mask.tau)))
        }
    }
}

pub fn run_eval(config: &RunConfig, prepared: &Prepared, model: &CvgaeModel) -> Result<EvalReport, PipelineError> {
    let (scores, labels, tau) = scored_split(config, prepared, model, Split::Test)?;
    let mut report = evaluate_gczsl(&scores, &labels, config.eval.n_bias_points, config.world)?;
    report.tau_used = tau;
    Ok(report)
}

/// Test images serve as both queries and database.
pub fn run_retrieval(config: &RunConfig, prepared: &Prepared, model: &CvgaeModel) -> Result<RetrievalReport, PipelineError> {
    let (scores, labels, _) = scored_split(config, prepared, model, Split::Test)?;
    let report = evaluate_gczsl(&scores, &labels, config.eval.n_bias_points, config.world)?;
    let objects = predicted_objects(&scores, report.best_bias)?;
    let queries = build_queries(&labels, config.train.seed);
    let mu = posterior_means(model, &prepared.graph)?;
    let (database, _) = prepared.split_features(Split::Test)?;
    Ok(evaluate_retrieval(
        model,
        &mu,
        prepared.n_states(),
        &database,
        &objects,
        &queries,
        &config.eval.k_list,
    )?)
}
