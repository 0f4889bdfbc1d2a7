use std::sync::Arc;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::numerics::{SparseMatrix, Tape, Tensor};
use crate::rng::{stream_rng, Stream};
use crate::vgae::{encode_features_on_tape, kl_on_tape, EncoderConfig, EncoderParams};

use super::EvalError;

/// Sizes of a benchmark's primitive vocabulary and output spaces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetShape {
    pub name: String,
    pub n_states: usize,
    pub n_objects: usize,
    /// Closed-world output space `|Y_s ∪ Y_u|`.
    pub n_cw_pairs: usize,
    /// Seen training pairs, i.e. graph edges.
    pub n_seen: usize,
}

impl DatasetShape {
    pub fn new(name: &str, n_states: usize, n_objects: usize, n_cw_pairs: usize, n_seen: usize) -> Self {
        Self {
            name: name.to_string(),
            n_states,
            n_objects,
            n_cw_pairs,
            n_seen,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_states + self.n_objects
    }

    pub fn n_ow_pairs(&self) -> usize {
        self.n_states * self.n_objects
    }
}

/// MIT-States, UT-Zappos and C-GQA.
pub fn benchmark_shapes() -> Vec<DatasetShape> {
    vec![
        DatasetShape::new("mit-states", 115, 245, 1962, 1262),
        DatasetShape::new("ut-zappos", 16, 12, 116, 83),
        DatasetShape::new("c-gqa", 453, 870, 9378, 6963),
    ]
}

/// Node counts of a graph with one node per primitive plus one per output
/// pair, for the closed and open world.
pub fn cge_node_counts(shape: &DatasetShape) -> (usize, usize) {
    (shape.n_nodes() + shape.n_cw_pairs, shape.n_nodes() + shape.n_ow_pairs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub m: usize,
    pub hidden: usize,
    pub h: usize,
    pub layers: usize,
    pub seed: u64,
    /// Timed passes per graph; the minimum is reported.
    pub repeats: usize,
    /// Skip timing and report counts only.
    pub measure: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            m: 8,
            hidden: 8,
            h: 8,
            layers: 2,
            seed: 0,
            repeats: 3,
            measure: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub name: String,
    pub n_states: usize,
    pub n_objects: usize,
    pub n_nodes: usize,
    pub n_cge_cw: usize,
    pub n_cge_ow: usize,
    /// Predicted per-epoch cost ratio under `O(L N m²)`.
    pub ratio_cw: f64,
    pub ratio_ow: f64,
    pub ms_primitive: Option<f64>,
    pub ms_cge_ow: Option<f64>,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str =
        "dataset,n_states,n_objects,n_nodes,n_cge_cw,n_cge_ow,ratio_cw,ratio_ow,ms_primitive,ms_cge_ow";

    pub fn csv_line(&self) -> String {
        let ms = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:.4},{:.4},{},{}",
            self.name,
            self.n_states,
            self.n_objects,
            self.n_nodes,
            self.n_cge_cw,
            self.n_cge_ow,
            self.ratio_cw,
            self.ratio_ow,
            ms(self.ms_primitive),
            ms(self.ms_cge_ow)
        )
    }

    pub fn csv(rows: &[BenchRow]) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in rows {
            out.push_str(&r.csv_line());
            out.push('\n');
        }
        out
    }
}

pub fn bench_graph(shapes: &[DatasetShape], config: &BenchConfig) -> Result<Vec<BenchRow>, EvalError> {
    if shapes.is_empty() {
        return Err(EvalError::Empty("shape list"));
    }
    let encoder = EncoderConfig {
        m: config.m,
        hidden: config.hidden,
        h: config.h,
        layers: config.layers,
    };
    let params = EncoderParams::init(&encoder, &mut stream_rng(config.seed, Stream::Init))?;
    shapes
        .iter()
        .map(|shape| {
            let n = shape.n_nodes();
            let (cw, ow) = cge_node_counts(shape);
            let (ms_primitive, ms_cge_ow) = if config.measure {
                let mut rng = stream_rng(config.seed, Stream::Bench);
                let primitive = primitive_neighbors(shape, &mut rng);
                let cge = cge_neighbors(shape);
                (
                    Some(time_epoch(&primitive, &params, config, &mut rng)?),
                    Some(time_epoch(&cge, &params, config, &mut rng)?),
                )
            } else {
                (None, None)
            };
            log::info!("{}: N={} N_CGE(OW)={} primitive={:?}ms cge={:?}ms", shape.name, n, ow, ms_primitive, ms_cge_ow);
            Ok(BenchRow {
                name: shape.name.clone(),
                n_states: shape.n_states,
                n_objects: shape.n_objects,
                n_nodes: n,
                n_cge_cw: cw,
                n_cge_ow: ow,
                ratio_cw: cw as f64 / n as f64,
                ratio_ow: ow as f64 / n as f64,
                ms_primitive,
                ms_cge_ow,
            })
        })
        .collect()
}

/// States and objects joined by `n_seen` random pairs.
fn primitive_neighbors(shape: &DatasetShape, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let (s, o) = (shape.n_states, shape.n_objects);
    let mut nbrs = vec![Vec::new(); s + o];
    let picked = index::sample(rng, s * o, shape.n_seen.min(s * o));
    let mut pairs: Vec<usize> = picked.into_iter().collect();
    pairs.sort_unstable();
    for p in pairs {
        let (i, j) = (p / o, s + p % o);
        nbrs[i].push(j);
        nbrs[j].push(i);
    }
    nbrs
}

/// Primitives plus one node per open-world pair, each pair node linked to
/// its state and its object.
fn cge_neighbors(shape: &DatasetShape) -> Vec<Vec<usize>> {
    let (s, o) = (shape.n_states, shape.n_objects);
    let base = s + o;
    let mut nbrs = vec![Vec::new(); base + s * o];
    for i in 0..s {
        for j in 0..o {
            let p = base + i * o + j;
            nbrs[p] = vec![i, s + j];
            nbrs[i].push(p);
            nbrs[s + j].push(p);
        }
    }
    nbrs
}

/// Minimum wall time of one encoder forward and backward pass, in ms.
fn time_epoch(
    neighbors: &[Vec<usize>],
    params: &EncoderParams,
    config: &BenchConfig,
    rng: &mut impl rand::Rng,
) -> Result<f64, EvalError> {
    let aggregator = Arc::new(SparseMatrix::mean_aggregator(neighbors));
    let features = Tensor::random_normal(neighbors.len(), config.m, 1.0, rng);
    let mut best = f64::INFINITY;
    for _ in 0..config.repeats.max(1) {
        let start = Instant::now();
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let post = encode_features_on_tape(&mut tape, &features, &aggregator, &vars)?;
        let loss = kl_on_tape(&mut tape, post)?;
        tape.backward(loss)?;
        best = best.min(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(best)
}
