//! Concepts, composition labels, dataset splits and the state–object graph.
//!
//! Node order is fixed everywhere: all states first, then all objects, so the
//! global node index of object `j` is `n_states + j`.

mod graph;
mod io;
mod synthetic;

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use graph::{build_graph, ConceptGraph};
pub use io::{
    decode_matrix, encode_matrix, load_dataset, read_matrix, save_dataset, write_matrix, Dataset, FeatureStore,
    MATRIX_MAGIC, MATRIX_VERSION,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid metadata: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{file}: {reason}")]
    Format { file: String, reason: String },
    #[error("{file}: shape mismatch: {reason}")]
    Shape { file: String, reason: String },
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("label ({state}, {object}) outside vocabulary of {n_states} states and {n_objects} objects")]
    LabelOutOfRange {
        state: usize,
        object: usize,
        n_states: usize,
        n_objects: usize,
    },
    #[error("split violation: {0}")]
    SplitViolation(String),
    #[error("image id {id} does not resolve to a feature row ({rows} rows)")]
    DanglingImage { id: usize, rows: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
}

/// Ordered, unique state and object names.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptVocabulary {
    states: Vec<String>,
    objects: Vec<String>,
}

impl ConceptVocabulary {
    pub fn new(states: Vec<String>, objects: Vec<String>) -> Result<Self, DataError> {
        for (kind, names) in [("state", &states), ("object", &objects)] {
            if names.is_empty() {
                return Err(DataError::Vocabulary(format!("at least one {kind} is required")));
            }
            let mut seen = HashSet::new();
            for name in names {
                if name.is_empty() {
                    return Err(DataError::Vocabulary(format!("empty {kind} name")));
                }
                if !seen.insert(name.as_str()) {
                    return Err(DataError::Vocabulary(format!("duplicate {kind} name {name:?}")));
                }
            }
        }
        Ok(Self { states, objects })
    }

    /// `state_0..`, `object_0..` placeholder names.
    pub fn numbered(n_states: usize, n_objects: usize) -> Result<Self, DataError> {
        Self::new(
            (0..n_states).map(|i| format!("state_{i}")).collect(),
            (0..n_objects).map(|j| format!("object_{j}")).collect(),
        )
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.states.len() + self.objects.len()
    }

    pub fn object_node(&self, object: usize) -> usize {
        self.states.len() + object
    }

    pub fn check_label(&self, label: CompositionLabel) -> Result<(), DataError> {
        if label.state >= self.n_states() || label.object >= self.n_objects() {
            return Err(DataError::LabelOutOfRange {
                state: label.state,
                object: label.object,
                n_states: self.n_states(),
                n_objects: self.n_objects(),
            });
        }
        Ok(())
    }

    /// Every pair in `S×O`, state-major.
    pub fn all_pairs(&self) -> Vec<CompositionLabel> {
        (0..self.n_states())
            .flat_map(|s| (0..self.n_objects()).map(move |o| CompositionLabel::new(s, o)))
            .collect()
    }
}

/// A `(state, object)` composition, by index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct CompositionLabel {
    pub state: usize,
    pub object: usize,
}

impl CompositionLabel {
    pub fn new(state: usize, object: usize) -> Self {
        Self { state, object }
    }
}

impl From<[usize; 2]> for CompositionLabel {
    fn from([state, object]: [usize; 2]) -> Self {
        Self { state, object }
    }
}

impl From<CompositionLabel> for [usize; 2] {
    fn from(label: CompositionLabel) -> Self {
        [label.state, label.object]
    }
}

/// Which compositions a model may predict.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum World {
    /// Seen and unseen pairs only.
    #[default]
    #[serde(rename = "closed")]
    ClosedWorld,
    /// Every state–object pair.
    #[serde(rename = "open")]
    OpenWorld,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image_id: usize,
    pub label: CompositionLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub seen_pairs: Vec<CompositionLabel>,
    pub unseen_pairs: Vec<CompositionLabel>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub world: World,
}

impl DatasetSplits {
    /// Checks labels against the vocabulary, `seen ∩ unseen = ∅`,
    /// `train ⊆ seen` and `val, test ⊆ seen ∪ unseen`.
    pub fn validate(&self, vocab: &ConceptVocabulary) -> Result<(), DataError> {
        let seen: HashSet<_> = self.seen_pairs.iter().copied().collect();
        let unseen: HashSet<_> = self.unseen_pairs.iter().copied().collect();
        for &pair in seen.iter().chain(&unseen) {
            vocab.check_label(pair)?;
        }
        if let Some(pair) = self.seen_pairs.iter().find(|p| unseen.contains(p)) {
            return Err(DataError::SplitViolation(format!(
                "pair ({}, {}) is both seen and unseen",
                pair.state, pair.object
            )));
        }
        for sample in &self.train {
            vocab.check_label(sample.label)?;
            if !seen.contains(&sample.label) {
                return Err(DataError::SplitViolation(format!(
                    "train image {} has label ({}, {}) outside the seen pairs",
                    sample.image_id, sample.label.state, sample.label.object
                )));
            }
        }
        for (name, split) in [("val", &self.val), ("test", &self.test)] {
            for sample in split {
                vocab.check_label(sample.label)?;
                if !seen.contains(&sample.label) && !unseen.contains(&sample.label) {
                    return Err(DataError::SplitViolation(format!(
                        "{name} image {} has label ({}, {}) outside seen ∪ unseen",
                        sample.image_id, sample.label.state, sample.label.object
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn seen_set(&self) -> HashSet<CompositionLabel> {
        self.seen_pairs.iter().copied().collect()
    }

    /// Candidate compositions for `world`, sorted state-major: `Y_s ∪ Y_u`
    /// in the closed world, `S×O` in the open world.
    pub fn output_space(&self, vocab: &ConceptVocabulary, world: World) -> Vec<CompositionLabel> {
        match world {
            World::ClosedWorld => {
                let mut pairs: Vec<_> = self.seen_pairs.iter().chain(&self.unseen_pairs).copied().collect();
                pairs.sort_unstable();
                pairs.dedup();
                pairs
            }
            World::OpenWorld => vocab.all_pairs(),
        }
    }

    /// Pairs with no images at all (only present in the open world).
    pub fn hypothetical_pairs(&self, vocab: &ConceptVocabulary) -> Vec<CompositionLabel> {
        let real: HashSet<_> = self.seen_pairs.iter().chain(&self.unseen_pairs).collect();
        vocab.all_pairs().into_iter().filter(|p| !real.contains(p)).collect()
    }
}

/// Column lookup for a list of candidate pairs.
pub fn pair_index(pairs: &[CompositionLabel]) -> HashMap<CompositionLabel, usize> {
    pairs.iter().enumerate().map(|(i, &p)| (p, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(s: usize, o: usize) -> CompositionLabel {
        CompositionLabel::new(s, o)
    }

    fn splits() -> DatasetSplits {
        DatasetSplits {
            seen_pairs: vec![label(0, 0), label(1, 1)],
            unseen_pairs: vec![label(0, 1)],
            train: vec![Sample {
                image_id: 0,
                label: label(0, 0),
            }],
            val: vec![],
            test: vec![Sample {
                image_id: 1,
                label: label(0, 1),
            }],
            world: World::ClosedWorld,
        }
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_empties() {
        assert!(ConceptVocabulary::new(vec!["a".into(), "a".into()], vec!["x".into()]).is_err());
        assert!(ConceptVocabulary::new(vec![], vec!["x".into()]).is_err());
        assert!(ConceptVocabulary::new(vec!["".into()], vec!["x".into()]).is_err());
        let v = ConceptVocabulary::numbered(3, 2).unwrap();
        assert_eq!(v.n_nodes(), 5);
        assert_eq!(v.object_node(1), 4);
    }

    #[test]
    fn output_space_sizes() {
        let vocab = ConceptVocabulary::numbered(2, 2).unwrap();
        let s = splits();
        assert_eq!(s.output_space(&vocab, World::ClosedWorld), vec![label(0, 0), label(0, 1), label(1, 1)]);
        assert_eq!(s.output_space(&vocab, World::OpenWorld).len(), 4);
        assert_eq!(s.hypothetical_pairs(&vocab), vec![label(1, 0)]);
        // open-world output space is |S|·|O| (C-GQA: 453·870 = 394110)
        let cgqa = ConceptVocabulary::numbered(453, 870).unwrap();
        assert_eq!(s.output_space(&cgqa, World::OpenWorld).len(), 394_110);
    }

    #[test]
    fn split_violations_are_detected() {
        let vocab = ConceptVocabulary::numbered(2, 2).unwrap();
        assert!(splits().validate(&vocab).is_ok());

        let mut overlap = splits();
        overlap.unseen_pairs.push(label(1, 1));
        assert!(matches!(overlap.validate(&vocab), Err(DataError::SplitViolation(_))));

        let mut bad_train = splits();
        bad_train.train[0].label = label(0, 1);
        assert!(matches!(bad_train.validate(&vocab), Err(DataError::SplitViolation(_))));

        let mut bad_test = splits();
        bad_test.test[0].label = label(1, 0);
        assert!(matches!(bad_test.validate(&vocab), Err(DataError::SplitViolation(_))));

        let mut out_of_range = splits();
        out_of_range.test[0].label = label(5, 0);
        assert!(matches!(out_of_range.validate(&vocab), Err(DataError::LabelOutOfRange { .. })));
    }

    #[test]
    fn labels_serialize_as_pairs() {
        let json = serde_json::to_string(&label(3, 4)).unwrap();
        assert_eq!(json, "[3,4]");
        let back: CompositionLabel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, label(3, 4));
        assert_eq!(serde_json::to_string(&World::OpenWorld).unwrap(), "\"open\"");
    }
}
