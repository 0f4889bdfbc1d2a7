//! Binary model checkpoints.
//!
//! Layout: `VGCM`, u32 version, u32 header length, a JSON header naming every
//! tensor and its shape, then the tensors as little-endian f64 in header
//! order. Parameters round-trip exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::composer::{ComposerError, CvgaeModel, ModelConfig};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VGCM";
pub const CHECKPOINT_VERSION: u32 = 1;
const NODE_FEATURES: &str = "node_features";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint does not match the configuration: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Composer(#[from] ComposerError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

/// Trained parameters together with the node features they were trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CvgaeModel,
    pub node_features: Tensor,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut tensors: Vec<(String, &Tensor)> = self.model.names().into_iter().zip(self.model.tensors()).collect();
        tensors.push((NODE_FEATURES.to_string(), &self.node_features));
        let header = Header {
            model: self.model.config(),
            seed: self.seed,
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let json_len = u32::try_from(json.len()).map_err(|_| CheckpointError::Format("header too large".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&json_len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let format = |s: String| CheckpointError::Format(s);
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(format("missing VGCM magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
        if word(4) != CHECKPOINT_VERSION {
            return Err(format(format!("unsupported version {}", word(4))));
        }
        let json_end = 12 + word(8) as usize;
        let header_bytes = bytes.get(12..json_end).ok_or_else(|| format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| format(e.to_string()))?;

        let mut model = CvgaeModel::init(&header.model, header.seed)?;
        let expected = model.names();
        let names: Vec<&str> = header.tensors.iter().map(|t| t.name.as_str()).collect();
        if names.len() != expected.len() + 1
            || names[..expected.len()].iter().zip(&expected).any(|(a, b)| a != b)
            || names[expected.len()] != NODE_FEATURES
        {
            return Err(format(format!("unexpected tensor list {names:?}")));
        }
        let mut offset = json_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n = entry.rows * entry.cols;
            let end = offset + 8 * n;
            let raw = bytes
                .get(offset..end)
                .ok_or_else(|| format(format!("truncated tensor {}", entry.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Tensor::new(entry.rows, entry.cols, data).map_err(|e| format(e.to_string()))?);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(format(format!("{} trailing bytes", bytes.len() - offset)));
        }
        let node_features = tensors.pop().expect("node features entry checked above");
        model.set_tensors(&tensors)?;
        Ok(Self {
            model,
            node_features,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless the stored architecture equals `expected`.
    pub fn check_compatible(&self, expected: &ModelConfig, n_nodes: usize) -> Result<(), CheckpointError> {
        let actual = self.model.config();
        if &actual != expected {
            return Err(CheckpointError::Mismatch(format!("stored {actual:?}, configured {expected:?}")));
        }
        if self.node_features.rows() != n_nodes || self.node_features.cols() != actual.m {
            return Err(CheckpointError::Mismatch(format!(
                "node features are {}x{}, dataset needs {}x{}",
                self.node_features.rows(),
                self.node_features.cols(),
                n_nodes,
                actual.m
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    fn sample() -> Checkpoint {
        let config = ModelConfig {
            m: 3,
            d: 4,
            hidden: 5,
            h: 2,
            k: 3,
            layers: 2,
        };
        let mut rng = stream_rng(9, Stream::NodeFeatures);
        Checkpoint {
            model: CvgaeModel::init(&config, 9).unwrap(),
            node_features: Tensor::random_normal(6, 3, 1.0, &mut rng),
            seed: 9,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"VGCM");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
        assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(CheckpointError::Io { .. })));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
    }

    #[test]
    fn incompatible_dimensions_are_rejected() {
        let ckpt = sample();
        let mut other = ckpt.model.config();
        assert!(ckpt.check_compatible(&other, 6).is_ok());
        assert!(matches!(ckpt.check_compatible(&other, 7), Err(CheckpointError::Mismatch(_))));
        other.k = 4;
        assert!(matches!(ckpt.check_compatible(&other, 6), Err(CheckpointError::Mismatch(_))));
    }
}
