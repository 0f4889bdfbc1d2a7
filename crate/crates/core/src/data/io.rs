use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::rng::{stream_rng, Stream};

use super::{CompositionLabel, ConceptVocabulary, DataError, DatasetSplits, Sample, World};

pub const MATRIX_MAGIC: &[u8; 4] = b"VGCF";
pub const MATRIX_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub const METADATA_FILE: &str = "metadata.json";
pub const FEATURES_FILE: &str = "features.bin";
pub const NODE_FEATURES_FILE: &str = "node_features.bin";

/// Image features; image ids are the row indices.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    features: Tensor,
}

impl FeatureStore {
    pub fn new(features: Tensor) -> Result<Self, DataError> {
        if !features.is_finite() {
            return Err(DataError::Format {
                file: FEATURES_FILE.into(),
                reason: "non-finite feature value".into(),
            });
        }
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn image_ids(&self) -> std::ops::Range<usize> {
        0..self.features.rows()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn row(&self, image_id: usize) -> &[f64] {
        self.features.row(image_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: ConceptVocabulary,
    pub splits: DatasetSplits,
    pub features: FeatureStore,
    pub node_features: Option<Tensor>,
}

impl Dataset {
    /// Checks split invariants and that every referenced image has a row.
    pub fn validate(&self) -> Result<(), DataError> {
        self.splits.validate(&self.vocab)?;
        let rows = self.features.len();
        for sample in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if sample.image_id >= rows {
                return Err(DataError::DanglingImage {
                    id: sample.image_id,
                    rows,
                });
            }
        }
        if let Some(nf) = &self.node_features {
            if nf.rows() != self.vocab.n_nodes() {
                return Err(DataError::Shape {
                    file: NODE_FEATURES_FILE.into(),
                    reason: format!("{} rows, expected {} concept nodes", nf.rows(), self.vocab.n_nodes()),
                });
            }
            if !nf.is_finite() {
                return Err(DataError::Format {
                    file: NODE_FEATURES_FILE.into(),
                    reason: "non-finite value".into(),
                });
            }
        }
        Ok(())
    }

    /// Ingested node features, or a seeded `N(0, 1/m)` draw when absent.
    pub fn node_features_or_init(&self, m: usize, seed: u64) -> Result<Tensor, DataError> {
        match &self.node_features {
            Some(nf) if nf.cols() != m => Err(DataError::Dimension(format!(
                "node features are {}-dimensional, model expects m = {m}",
                nf.cols()
            ))),
            Some(nf) => Ok(nf.clone()),
            None => {
                let mut rng = stream_rng(seed, Stream::NodeFeatures);
                Ok(Tensor::random_normal(self.vocab.n_nodes(), m, 1.0 / (m as f64).sqrt(), &mut rng))
            }
        }
    }

    pub fn with_world(mut self, world: World) -> Self {
        self.splits.world = world;
        self
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    states: Vec<String>,
    objects: Vec<String>,
    seen_pairs: Vec<[usize; 2]>,
    unseen_pairs: Vec<[usize; 2]>,
    train: Vec<[usize; 3]>,
    val: Vec<[usize; 3]>,
    test: Vec<[usize; 3]>,
}

fn to_samples(rows: &[[usize; 3]]) -> Vec<Sample> {
    rows.iter()
        .map(|&[image_id, s, o]| Sample {
            image_id,
            label: CompositionLabel::new(s, o),
        })
        .collect()
}

fn from_samples(samples: &[Sample]) -> Vec<[usize; 3]> {
    samples
        .iter()
        .map(|s| [s.image_id, s.label.state, s.label.object])
        .collect()
}

/// Serialises a matrix as `VGCF` bytes (values narrowed to f32).
pub fn encode_matrix(matrix: &Tensor) -> Result<Vec<u8>, DataError> {
    let dims = |n: usize| {
        u32::try_from(n).map_err(|_| DataError::Dimension(format!("dimension {n} exceeds u32")))
    };
    let (rows, cols) = (dims(matrix.rows())?, dims(matrix.cols())?);
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.len() * 4);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for &v in matrix.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses one `VGCF` block from the front of `bytes`; returns the matrix and
/// the number of bytes consumed.
pub fn decode_matrix(bytes: &[u8], file: &str) -> Result<(Tensor, usize), DataError> {
    let format = |reason: String| DataError::Format {
        file: file.to_string(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(format(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MATRIX_MAGIC {
        return Err(format(format!("bad magic bytes {:?}", &bytes[0..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let version = word(4);
    if version != MATRIX_VERSION {
        return Err(format(format!("unsupported version {version}")));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format(format!("header declares {rows}x{cols}, too large")))?;
    if bytes.len() < HEADER_LEN + payload {
        return Err(DataError::Shape {
            file: file.to_string(),
            reason: format!(
                "header declares {rows}x{cols} but only {} payload bytes present",
                bytes.len() - HEADER_LEN
            ),
        });
    }
    let data = bytes[HEADER_LEN..HEADER_LEN + payload]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    let tensor = Tensor::new(rows, cols, data).map_err(|e| format(e.to_string()))?;
    Ok((tensor, HEADER_LEN + payload))
}

pub fn write_matrix(path: &Path, matrix: &Tensor) -> Result<(), DataError> {
    let bytes = encode_matrix(matrix)?;
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a whole `VGCF` file; trailing bytes are a shape error.
pub fn read_matrix(path: &Path) -> Result<Tensor, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file = path.file_name().map_or_else(|| path.display().to_string(), |f| f.to_string_lossy().into_owned());
    let (tensor, used) = decode_matrix(&bytes, &file)?;
    if used != bytes.len() {
        return Err(DataError::Shape {
            file,
            reason: format!(
                "header declares {}x{} but file carries {} extra bytes",
                tensor.rows(),
                tensor.cols(),
                bytes.len() - used
            ),
        });
    }
    if !tensor.is_finite() {
        return Err(DataError::Format {
            file,
            reason: "non-finite value".into(),
        });
    }
    Ok(tensor)
}

/// Loads and validates a dataset directory. `node_features.bin` is optional.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta_path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|source| DataError::Io {
        path: meta_path.clone(),
        source,
    })?;
    let meta: Metadata = serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: meta_path.clone(),
        source,
    })?;
    let vocab = ConceptVocabulary::new(meta.states, meta.objects)?;
    let splits = DatasetSplits {
        seen_pairs: meta.seen_pairs.into_iter().map(CompositionLabel::from).collect(),
        unseen_pairs: meta.unseen_pairs.into_iter().map(CompositionLabel::from).collect(),
        train: to_samples(&meta.train),
        val: to_samples(&meta.val),
        test: to_samples(&meta.test),
        world: World::ClosedWorld,
    };
    let features = FeatureStore::new(read_matrix(&dir.join(FEATURES_FILE))?)?;
    let nf_path = dir.join(NODE_FEATURES_FILE);
    let node_features = if nf_path.exists() {
        Some(read_matrix(&nf_path)?)
    } else {
        None
    };
    let dataset = Dataset {
        vocab,
        splits,
        features,
        node_features,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), DataError> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let meta = Metadata {
        states: dataset.vocab.states().to_vec(),
        objects: dataset.vocab.objects().to_vec(),
        seen_pairs: dataset.splits.seen_pairs.iter().map(|&p| p.into()).collect(),
        unseen_pairs: dataset.splits.unseen_pairs.iter().map(|&p| p.into()).collect(),
        train: from_samples(&dataset.splits.train),
        val: from_samples(&dataset.splits.val),
        test: from_samples(&dataset.splits.test),
    };
    let mut text = serde_json::to_string(&meta).expect("metadata serialises");
    text.push('\n');
    let meta_path = dir.join(METADATA_FILE);
    fs::write(&meta_path, text).map_err(|source| DataError::Io {
        path: meta_path,
        source,
    })?;
    write_matrix(&dir.join(FEATURES_FILE), dataset.features.features())?;
    if let Some(nf) = &dataset.node_features {
        write_matrix(&dir.join(NODE_FEATURES_FILE), nf)?;
    }
    Ok(())
}
