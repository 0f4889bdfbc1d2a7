use std::sync::Arc;

use crate::numerics::{SparseMatrix, Tensor};

use super::{CompositionLabel, ConceptVocabulary, DataError, DatasetSplits};

/// Bipartite state–object graph with node features.
///
/// Edges are stored once as `(state, object)`; the symmetric `N×N` view is
/// exposed through `neighbors` and the mean-aggregation operator.
#[derive(Clone, Debug)]
pub struct ConceptGraph {
    n_states: usize,
    n_objects: usize,
    edges: Vec<CompositionLabel>,
    neighbors: Vec<Vec<usize>>,
    node_features: Tensor,
    aggregator: Arc<SparseMatrix>,
}

/// Builds the training graph: one undirected edge per seen pair.
pub fn build_graph(
    vocab: &ConceptVocabulary,
    splits: &DatasetSplits,
    node_features: Tensor,
) -> Result<ConceptGraph, DataError> {
    ConceptGraph::from_edges(vocab.n_states(), vocab.n_objects(), &splits.seen_pairs, node_features)
}

impl ConceptGraph {
    /// Duplicate edges collapse to one.
    pub fn from_edges(
        n_states: usize,
        n_objects: usize,
        pairs: &[CompositionLabel],
        node_features: Tensor,
    ) -> Result<Self, DataError> {
        let n = n_states + n_objects;
        if node_features.rows() != n {
            return Err(DataError::Dimension(format!(
                "node features have {} rows, expected {} ({} states + {} objects)",
                node_features.rows(),
                n,
                n_states,
                n_objects
            )));
        }
        if !node_features.is_finite() {
            return Err(DataError::Dimension("node features contain non-finite values".into()));
        }
        let mut edges = pairs.to_vec();
        for &pair in &edges {
            if pair.state >= n_states || pair.object >= n_objects {
                return Err(DataError::LabelOutOfRange {
                    state: pair.state,
                    object: pair.object,
                    n_states,
                    n_objects,
                });
            }
        }
        edges.sort_unstable();
        edges.dedup();

        let mut neighbors = vec![Vec::new(); n];
        for pair in &edges {
            let o = n_states + pair.object;
            neighbors[pair.state].push(o);
            neighbors[o].push(pair.state);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let aggregator = Arc::new(SparseMatrix::mean_aggregator(&neighbors));
        Ok(Self {
            n_states,
            n_objects,
            edges,
            neighbors,
            node_features,
            aggregator,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_states + self.n_objects
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    /// Sorted, unique `(state, object)` edges.
    pub fn edges(&self) -> &[CompositionLabel] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn has_edge(&self, state: usize, object: usize) -> bool {
        self.edges.binary_search(&CompositionLabel::new(state, object)).is_ok()
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    /// Row-stochastic neighbour-mean operator; isolated rows are zero.
    pub fn aggregator(&self) -> &Arc<SparseMatrix> {
        &self.aggregator
    }

    /// The `|S|×|O|` block of `A`.
    pub fn adjacency_block(&self) -> Tensor {
        let mut block = Tensor::zeros(self.n_states, self.n_objects);
        for pair in &self.edges {
            block.set(pair.state, pair.object, 1.0);
        }
        block
    }

    /// Non-edges over edges in the bipartite block; 1 for an edgeless graph.
    pub fn pos_weight(&self) -> f64 {
        let total = self.n_states * self.n_objects;
        let edges = self.edges.len();
        if edges == 0 {
            1.0
        } else {
            (total - edges) as f64 / edges as f64
        }
    }
}
