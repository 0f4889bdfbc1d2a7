//! Compositional zero-shot recognition with variational graph embeddings of
//! primitive concepts.
//!
//! States and objects form a bipartite graph encoded by a variational graph
//! autoencoder; composition embeddings are aligned with image features in a
//! shared space and scored for both seen and unseen pairs.

pub mod data;
pub mod numerics;
pub mod rng;
pub mod vgae;
pub mod composer;
pub mod evaluation;
pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod cli;
