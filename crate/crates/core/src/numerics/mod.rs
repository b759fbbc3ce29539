//! Dense tensors, reverse-mode autodiff and the neural building blocks used by
//! the node encoder and the path ranker.

mod checkpoint;
mod functions;
pub mod gradcheck;
mod layers;
mod optim;
mod param;
mod tape;
mod tensor;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, ManifestEntry,
};
pub use functions::{
    cosine_similarity, expand_factors, softmax, trilinear_dense, trilinear_factorized,
};
pub use layers::{Linear, Mlp, MultiHeadAttention, Trilinear};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("expected rank {expected}, got shape {shape:?}")]
    RankMismatch { expected: usize, shape: Vec<usize> },
    #[error("expected a single element, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("axis {axis} out of range for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("variable belongs to a different tape")]
    ForeignVar,
    #[error("tape was created without gradient recording")]
    NotRecording,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
    #[error("parameter {name:?}: expected shape {expected:?}, found {found:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,
    #[error("configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
