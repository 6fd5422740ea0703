//! Data compiled into the binary: pipeline definitions, the registry
//! manifest and the toy models it points at.

use std::path::PathBuf;

pub const REGISTRY_MANIFEST: &str = include_str!("../assets/registry.json");
pub const SKULLSTRIP_PIPELINE: &str = include_str!("../assets/pipelines/skullstrip.json");
pub const SEGMENT_GBM_PIPELINE: &str = include_str!("../assets/pipelines/segment_gbm.json");

const MODELS: &[(&str, &[u8])] = &[
    (
        "skullstrip_toy.dnmd",
        include_bytes!("../assets/models/skullstrip_toy.dnmd"),
    ),
    (
        "gbm_wholetumor_toy.dnmd",
        include_bytes!("../assets/models/gbm_wholetumor_toy.dnmd"),
    ),
    (
        "gbm_enhancing_toy.dnmd",
        include_bytes!("../assets/models/gbm_enhancing_toy.dnmd"),
    ),
];

pub fn bundled_model(file: &str) -> Option<&'static [u8]> {
    MODELS.iter().find(|(n, _)| *n == file).map(|(_, b)| *b)
}

pub fn bundled_model_names() -> impl Iterator<Item = &'static str> {
    MODELS.iter().map(|(n, _)| *n)
}

/// Shipped pipeline definition by name.
pub fn pipeline(name: &str) -> Option<&'static str> {
    match name {
        "skullstrip" => Some(SKULLSTRIP_PIPELINE),
        "segment_gbm" | "segment-gbm" => Some(SEGMENT_GBM_PIPELINE),
        _ => None,
    }
}

/// Source-tree location of the assets, for the generator and tests.
pub fn source_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets")
}
