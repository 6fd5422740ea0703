//! Command-line pipelines over `neuropipe-core`: skull stripping and a
//! two-stage glioblastoma cascade, training jobs, and a checksummed model
//! registry.

pub mod assets;
pub mod cli;
pub mod pipeline;
pub mod registry;
pub mod training;

pub use neuropipe_core::{AffineVolume, DataCollection, Tensor};
