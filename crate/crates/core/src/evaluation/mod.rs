//! Scoring, feasibility masking, bias-swept accuracy, retrieval and graph
//! size benchmarks.

mod bench;
mod feasibility;
mod gczsl;
mod retrieval;

use std::collections::HashSet;

use rayon::prelude::*;

use crate::composer::{pair_embeddings, ComposerError, CvgaeModel};
use crate::data::{CompositionLabel, ConceptGraph};
use crate::numerics::{NumericsError, Tensor};
use crate::vgae::{self, VgaeError};

pub use bench::{bench_graph, cge_node_counts, benchmark_shapes, BenchConfig, BenchRow, DatasetShape};
pub use feasibility::{
    apply_feasibility, calibrate_tau, default_tau_grid, feasibility_mask, feasibility_scores, FeasibilityMask,
    TauCalibration, DEFAULT_TAU,
};
pub use gczsl::{
    auc, best_harmonic_mean, bias_candidates, evaluate_gczsl, harmonic_mean, predictions_at, CurvePoint,
    EvalReport, DEFAULT_BIAS_POINTS,
};
pub use retrieval::{
    build_queries, evaluate_retrieval, predicted_objects, random_baseline, rank_of, recall_at_k, RetrievalQuery, RetrievalReport,
};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Vgae(#[from] VgaeError),
    #[error(transparent)]
    Composer(#[from] ComposerError),
    #[error("label ({state}, {object}) is missing from the pair table")]
    MissingLabel { state: usize, object: usize },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("tau {0} is outside [0, 1]")]
    InvalidTau(f64),
    #[error("k = {k} exceeds the database size {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// Image-by-pair similarity scores with their column labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Tensor,
    pub pairs: Vec<CompositionLabel>,
    pub seen_mask: Vec<bool>,
}

impl ScoreMatrix {
    pub fn new(scores: Tensor, pairs: Vec<CompositionLabel>, seen: &HashSet<CompositionLabel>) -> Result<Self, EvalError> {
        if scores.cols() != pairs.len() {
            return Err(EvalError::Invalid(format!(
                "{} score columns for {} pairs",
                scores.cols(),
                pairs.len()
            )));
        }
        let seen_mask = pairs.iter().map(|p| seen.contains(p)).collect();
        Ok(Self {
            scores,
            pairs,
            seen_mask,
        })
    }

    pub fn n_images(&self) -> usize {
        self.scores.rows()
    }

    pub fn n_columns(&self) -> usize {
        self.pairs.len()
    }

    pub fn column_of(&self, label: CompositionLabel) -> Option<usize> {
        self.pairs.iter().position(|&p| p == label)
    }

    /// Keeps only the columns whose pair is in `keep`, in existing order.
    pub fn restrict(&self, keep: &HashSet<CompositionLabel>) -> Self {
        let cols: Vec<usize> = (0..self.n_columns()).filter(|&c| keep.contains(&self.pairs[c])).collect();
        let mut scores = Tensor::zeros(self.n_images(), cols.len());
        for i in 0..self.n_images() {
            let src = self.scores.row(i);
            for (dst, &c) in scores.row_mut(i).iter_mut().zip(&cols) {
                *dst = src[c];
            }
        }
        Self {
            scores,
            pairs: cols.iter().map(|&c| self.pairs[c]).collect(),
            seen_mask: cols.iter().map(|&c| self.seen_mask[c]).collect(),
        }
    }
}

/// Runs `work` on a pool capped at `threads` workers.
pub fn with_threads<T: Send>(threads: usize, work: impl FnOnce() -> T + Send) -> Result<T, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| EvalError::ThreadPool(e.to_string()))?;
    Ok(pool.install(work))
}

const ROW_CHUNK: usize = 256;

/// Applies `f` to fixed-size row blocks in parallel and stacks the results in
/// order. Block boundaries do not depend on the thread count, so the output
/// is bitwise independent of it.
fn map_row_blocks(
    input: &Tensor,
    f: impl Fn(&Tensor) -> Result<Tensor, EvalError> + Sync,
) -> Result<Tensor, EvalError> {
    let starts: Vec<usize> = (0..input.rows()).step_by(ROW_CHUNK).collect();
    let blocks: Vec<Tensor> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + ROW_CHUNK).min(input.rows());
            f(&input.slice_rows(start, end)?)
        })
        .collect::<Result<_, _>>()?;
    stack_rows(&blocks, input.rows())
}

fn stack_rows(blocks: &[Tensor], rows: usize) -> Result<Tensor, EvalError> {
    let cols = blocks.first().map_or(0, |b| b.cols());
    let mut data = Vec::with_capacity(rows * cols);
    for b in blocks {
        data.extend_from_slice(b.data());
    }
    Ok(Tensor::new(rows, cols, data)?)
}

/// Posterior means of every concept node.
pub fn posterior_means(model: &CvgaeModel, graph: &ConceptGraph) -> Result<Tensor, EvalError> {
    Ok(vgae::encode(graph, &model.encoder)?.mu)
}

/// `phi_e` applied to the concatenated latents of each pair.
pub fn project_pairs(
    model: &CvgaeModel,
    z: &Tensor,
    n_states: usize,
    pairs: &[CompositionLabel],
) -> Result<Tensor, EvalError> {
    let embeddings = pair_embeddings(z, pairs, n_states)?;
    map_row_blocks(&embeddings, |block| Ok(model.projection.phi_e.forward(block)?))
}

/// `phi_i` applied to image features.
pub fn project_images(model: &CvgaeModel, features: &Tensor) -> Result<Tensor, EvalError> {
    map_row_blocks(features, |block| Ok(model.projection.phi_i.forward(block)?))
}

/// Similarity of every image to every candidate pair, computed with the
/// posterior means `z`. Call inside [`with_threads`] to cap parallelism.
pub fn score_matrix(
    model: &CvgaeModel,
    z: &Tensor,
    n_states: usize,
    features: &Tensor,
    pairs: &[CompositionLabel],
    seen: &HashSet<CompositionLabel>,
) -> Result<ScoreMatrix, EvalError> {
    let projected_pairs = project_pairs(model, z, n_states, pairs)?;
    let projected_images = project_images(model, features)?;
    let scores = map_row_blocks(&projected_images, |block| Ok(block.matmul_nt(&projected_pairs)?))?;
    ScoreMatrix::new(scores, pairs.to_vec(), seen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::ModelConfig;

    #[test]
    fn scores_do_not_depend_on_thread_count() {
        let config = ModelConfig {
            m: 3,
            d: 5,
            hidden: 4,
            h: 2,
            k: 3,
            layers: 2,
        };
        let model = CvgaeModel::init(&config, 1).unwrap();
        let mut rng = crate::rng::stream_rng(1, crate::rng::Stream::Synthetic);
        let z = Tensor::random_normal(7, 2, 1.0, &mut rng);
        let features = Tensor::random_normal(600, 5, 1.0, &mut rng);
        let pairs: Vec<_> = (0..3).flat_map(|s| (0..4).map(move |o| CompositionLabel::new(s, o))).collect();
        let seen: HashSet<_> = pairs[..5].iter().copied().collect();
        let one = with_threads(1, || score_matrix(&model, &z, 3, &features, &pairs, &seen)).unwrap().unwrap();
        let four = with_threads(4, || score_matrix(&model, &z, 3, &features, &pairs, &seen)).unwrap().unwrap();
        assert_eq!(one, four);
        assert_eq!(one.scores.shape(), (600, 12));
        // agrees with a direct single-block computation
        let direct = model
            .projection
            .phi_i
            .forward(&features)
            .unwrap()
            .matmul_nt(&model.projection.phi_e.forward(&pair_embeddings(&z, &pairs, 3).unwrap()).unwrap())
            .unwrap();
        assert_eq!(one.scores, direct);
        assert_eq!(one.seen_mask.iter().filter(|&&s| s).count(), 5);
    }

    #[test]
    fn restrict_keeps_column_order() {
        let pairs: Vec<_> = (0..4).map(|o| CompositionLabel::new(0, o)).collect();
        let seen: HashSet<_> = [pairs[1]].into_iter().collect();
        let m = ScoreMatrix::new(Tensor::new(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap(), pairs.clone(), &seen).unwrap();
        let keep: HashSet<_> = [pairs[3], pairs[1]].into_iter().collect();
        let r = m.restrict(&keep);
        assert_eq!(r.pairs, vec![pairs[1], pairs[3]]);
        assert_eq!(r.scores.data(), &[1.0, 3.0]);
        assert_eq!(r.seen_mask, vec![true, false]);
    }
}
