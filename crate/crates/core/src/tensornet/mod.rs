//! Dense-tensor autodiff engine and the U-Net family built on it.

pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod train;
pub mod unet;

use thiserror::Error;

use crate::container::ContainerError;

pub use exec::ForwardOpts;
pub use gradcheck::{grad_check, GradReport};
pub use graph::{Activation, ConvRole, Dims, Graph, LayerKind, Padding};
pub use loss::CostFunction;
pub use model::{build_unet, Model, StepRecord, MODEL_MAGIC, MODEL_VERSION};
pub use optim::OptimizerKind;
pub use train::{train, JsonLinesHistory, TrainCallback, TrainConfig, TrainingSet};
pub use unet::{unet_graph, BlockOrder, BlockStyle, UNetConfig};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    VersionUnsupported(u32),
    #[error("model blob {name:?} checksum mismatch")]
    ChecksumMismatch { name: String },
    #[error("model file truncated: {0}")]
    Truncated(String),
    #[error("malformed model manifest: {0}")]
    Manifest(String),
    #[error("training data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ContainerError> for NetError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::BadMagic { .. } => Self::BadMagic,
            ContainerError::VersionUnsupported(v) => Self::VersionUnsupported(v),
            ContainerError::ChecksumMismatch { name, .. } => Self::ChecksumMismatch { name },
            ContainerError::Truncated(s) => Self::Truncated(s),
            ContainerError::Manifest(s) => Self::Manifest(s),
        }
    }
}
