//! Joint learning of unit-norm subspace embeddings and soft cluster
//! memberships from pre-extracted features, by maximizing coding rate
//! reduction while a normalized-cut loss on a sparse affinity graph of the
//! embeddings guides the memberships.

pub mod checkpoint;
pub mod cli;
pub mod coding_rate;
pub mod data;
pub mod error;
pub mod graph_cut;
pub mod kmeans;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
