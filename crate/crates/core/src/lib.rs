//! Core of the neuroimaging pipeline engine: volumes and NIfTI I/O,
//! case-oriented collections, pre/post-processing transforms, augmentation,
//! a small U-Net training engine, and patch-based inference.

pub mod augment;
pub mod collection;
pub mod container;
pub mod infer;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod tensornet;
pub mod transforms;
pub mod volio;
pub mod volume;

pub use collection::{Case, DataCollection, DataGroup, SamplingMode, Source};
pub use tensor::Tensor;
pub use volume::{Affine, AffineVolume, IDENTITY_AFFINE};
