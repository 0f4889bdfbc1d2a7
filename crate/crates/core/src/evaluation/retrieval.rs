use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::composer::CvgaeModel;
use crate::data::CompositionLabel;
use crate::numerics::Tensor;
use crate::rng::{stream_rng, Stream};

use super::{map_row_blocks, predictions_at, project_images, project_pairs, EvalError, ScoreMatrix};

/// A query image, the state it should be edited to, and the one database
/// image that counts as the correct answer. Indices point into the database.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub query: usize,
    pub target_state: usize,
    pub target: usize,
}

/// One query per database image whose object also appears with some other
/// state. Target state and target image are drawn from the retrieval stream.
pub fn build_queries(labels: &[CompositionLabel], seed: u64) -> Vec<RetrievalQuery> {
    let mut by_label: BTreeMap<CompositionLabel, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut rng = stream_rng(seed, Stream::Retrieval);
    let mut queries = Vec::new();
    for (q, &label) in labels.iter().enumerate() {
        let states: Vec<usize> = by_label
            .keys()
            .filter(|p| p.object == label.object && p.state != label.state)
            .map(|p| p.state)
            .collect();
        let Some(&target_state) = states.choose(&mut rng) else {
            continue;
        };
        let images = &by_label[&CompositionLabel::new(target_state, label.object)];
        let &target = images.choose(&mut rng).expect("label groups are non-empty");
        queries.push(RetrievalQuery {
            query: q,
            target_state,
            target,
        });
    }
    queries
}

/// 1-based rank of `target` when candidates are sorted by descending score,
/// ties broken by lower index, with `exclude` removed from the candidates.
pub fn rank_of(scores: &[f64], target: usize, exclude: usize) -> usize {
    let t = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != exclude && j != target && (s > t || (s == t && j < target)))
        .count()
}

/// Object of each image's predicted pair at the given unseen bias.
pub fn predicted_objects(scores: &ScoreMatrix, bias: f64) -> Result<Vec<usize>, EvalError> {
    predictions_at(scores, bias)
        .into_iter()
        .enumerate()
        .map(|(i, col)| {
            col.map(|c| scores.pairs[c].object)
                .ok_or_else(|| EvalError::Invalid(format!("image {i} has no finite score")))
        })
        .collect()
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Expected recall of a uniformly random ranking.
pub fn random_baseline(k: usize, n_candidates: usize) -> f64 {
    (k as f64 / n_candidates as f64).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub n_queries: usize,
    /// Candidates per query: the database minus the query itself.
    pub n_candidates: usize,
    /// `(k, R@k, random baseline)` in the order of the requested k list.
    pub recall: Vec<(usize, f64, f64)>,
}

impl RetrievalReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("k,recall,baseline\n");
        for (k, r, b) in &self.recall {
            out.push_str(&format!("{k},{r},{b}\n"));
        }
        out
    }
}

/// Ranks the database for each query against the composed target
/// `(target_state, predicted object of the query image)`.
///
/// `predicted_objects[i]` is the model's object prediction for database
/// image `i`; `mu` holds the posterior node means.
pub fn evaluate_retrieval(
    model: &CvgaeModel,
    mu: &Tensor,
    n_states: usize,
    database: &Tensor,
    predicted_objects: &[usize],
    queries: &[RetrievalQuery],
    k_list: &[usize],
) -> Result<RetrievalReport, EvalError> {
    let n_db = database.rows();
    if queries.is_empty() {
        return Err(EvalError::Empty("retrieval query set"));
    }
    if predicted_objects.len() != n_db {
        return Err(EvalError::Invalid(format!(
            "{} object predictions for {} database images",
            predicted_objects.len(),
            n_db
        )));
    }
    let n_candidates = n_db.saturating_sub(1);
    for &k in k_list {
        if k == 0 {
            return Err(EvalError::Invalid("k must be at least 1".into()));
        }
        if k > n_candidates {
            return Err(EvalError::KTooLarge { k, size: n_candidates });
        }
    }
    for q in queries {
        if q.query >= n_db || q.target >= n_db || q.query == q.target {
            return Err(EvalError::Invalid(format!(
                "query {} with target {} over a database of {}",
                q.query, q.target, n_db
            )));
        }
    }
    let targets: Vec<CompositionLabel> = queries
        .iter()
        .map(|q| CompositionLabel::new(q.target_state, predicted_objects[q.query]))
        .collect();
    let composed = project_pairs(model, mu, n_states, &targets)?;
    let images = project_images(model, database)?;
    let scores = map_row_blocks(&composed, |block| Ok(block.matmul_nt(&images)?))?;
    let ranks: Vec<usize> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| rank_of(scores.row(i), q.target, q.query))
        .collect();
    Ok(RetrievalReport {
        n_queries: queries.len(),
        n_candidates,
        recall: k_list
            .iter()
            .map(|&k| (k, recall_at_k(&ranks, k), random_baseline(k, n_candidates)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::ModelConfig;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn label(s: usize, o: usize) -> CompositionLabel {
        CompositionLabel::new(s, o)
    }

    #[test]
    fn queries_target_a_different_state_of_the_same_object() {
        let labels = [label(0, 0), label(1, 0), label(1, 0), label(2, 1), label(0, 2)];
        let queries = build_queries(&labels, 3);
        // images 3 and 4 have no other state for their object
        assert_eq!(queries.iter().map(|q| q.query).collect::<Vec<_>>(), vec![0, 1, 2]);
        for q in &queries {
            let (src, dst) = (labels[q.query], labels[q.target]);
            assert_eq!(dst, label(q.target_state, src.object));
            assert_ne!(q.target_state, src.state);
        }
        assert_eq!(build_queries(&labels, 3), queries);
    }

    #[test]
    fn rank_ties_and_exclusion() {
        let scores = [0.5, 0.9, 0.5, 0.9, 0.1];
        assert_eq!(rank_of(&scores, 3, 4), 2);
        assert_eq!(rank_of(&scores, 3, 1), 1);
        assert_eq!(rank_of(&scores, 2, 4), 4);
        assert_eq!(rank_of(&scores, 4, 0), 4);
    }

    #[test]
    fn single_candidate_is_always_found() {
        let config = ModelConfig {
            m: 2,
            d: 3,
            hidden: 3,
            h: 2,
            k: 2,
            layers: 1,
        };
        let model = CvgaeModel::init(&config, 0).unwrap();
        let mu = Tensor::new(4, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let db = Tensor::new(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let queries = [RetrievalQuery {
            query: 0,
            target_state: 1,
            target: 1,
        }];
        let report = evaluate_retrieval(&model, &mu, 2, &db, &[0, 1], &queries, &[1]).unwrap();
        assert_eq!(report.recall, vec![(1, 1.0, 1.0)]);
        assert!(matches!(
            evaluate_retrieval(&model, &mu, 2, &db, &[0, 1], &queries, &[2]),
            Err(EvalError::KTooLarge { k: 2, size: 1 })
        ));
    }

    #[test]
    fn random_rankings_match_the_baseline() {
        let n = 200;
        let mut rng = stream_rng(11, Stream::Bench);
        let mut ranks = Vec::new();
        for _ in 0..1000 {
            let mut perm: Vec<f64> = (0..n).map(|i| i as f64).collect();
            perm.shuffle(&mut rng);
            ranks.push(rank_of(&perm, 1, 0));
        }
        for k in [1, 10, 50] {
            let p = random_baseline(k, n - 1);
            let se = (p * (1.0 - p) / 1000.0).sqrt();
            let r = recall_at_k(&ranks, k);
            assert!((r - p).abs() <= 4.0 * se, "k={k}: {r} vs {p}");
        }
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(ranks in prop::collection::vec(1usize..40, 1..50)) {
            let mut last = 0.0;
            for k in 1..40 {
                let r = recall_at_k(&ranks, k);
                prop_assert!(r >= last);
                last = r;
            }
            prop_assert_eq!(recall_at_k(&ranks, 40), 1.0);
        }
    }
}
