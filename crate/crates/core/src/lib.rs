//! Mini-batch graph neural network training with topological compensation.
//!
//! Subgraph sampling drops the messages that out-of-batch neighbors send
//! into a mini-batch. Topological compensation replaces those messages by
//! linear combinations of in-batch embeddings, with coefficients fitted
//! once on the embeddings of randomly initialized models. Training then
//! touches only in-batch embeddings, yet reproduces whole-graph message
//! passing wherever the out-of-batch embeddings are linearly recoverable.

pub mod baseline;
mod bytes;
pub mod compensation;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod sampler;
pub mod seed;
pub mod train;
pub mod wl;

pub use compensation::{BasicEmbeddings, CompMode, Compensation, PrecomputeConfig};
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use graph::{graph_cut, BatchContext, GraphCut, PropagationKind, SparseGraph};
pub use linalg::{Csr, DenseMatrix};
pub use model::{Arch, GnnModel};
pub use sampler::Partition;
pub use train::{Method, MetricsRow, TrainConfig};
