//! Pre- and post-processing.
//!
//! Individual operations are plain functions on [`AffineVolume`]s. A
//! [`TransformChain`] strings [`TransformNode`]s together; each node names the
//! groups it applies to, so a chain can be run over a whole case (group →
//! volume map) or a [`DataCollection`] while leaving other groups untouched.
//!
//! Chains are written as JSON:
//!
//! ```json
//! [{"kind": "clip_percentiles", "params": {"lo": 1, "hi": 99}, "applies_to": ["input_data"]},
//!  {"kind": "zero_mean_unit_std", "name": "normalization"}]
//! ```
//!
//! `name` defaults to `kind` and is what step-skipping refers to. A missing
//! `applies_to` takes the chain's default group.

mod external;
mod intensity;
mod morphology;
mod resample;

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::collection::{Case, CollectionError, DataCollection, Source, GROUND_TRUTH};
use crate::volio::VolioError;
use crate::volume::{AffineVolume, VolumeError};

pub use external::{run_external, set_max_concurrent, DEFAULT_TIMEOUT};
pub use intensity::{
    apply_mask, binarize, clip_percentiles, percentile_sorted, zero_mean_unit_std,
};
pub use morphology::{hole_fill, island_removal, Connectivity};
pub use resample::{resample, Interp};

/// Group name used for model outputs in post-processing chains.
pub const PREDICTION: &str = "prediction";

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("mask spatial shape {got:?} differs from volume {expected:?}")]
    MaskShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("mask selects fewer than 2 voxels")]
    EmptyMask,
    #[error("percentile range must satisfy 0 <= lo < hi <= 100, got lo={lo} hi={hi}")]
    BadPercentileRange { lo: f64, hi: f64 },
    #[error("volume is not binary (values other than 0 and 1)")]
    NonBinaryMask,
    #[error("{connectivity}-connectivity does not apply to a {rank}-D volume")]
    BadConnectivity { connectivity: u32, rank: usize },
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("external command failed with exit code {code:?}: {stderr}")]
    CommandFailed { code: Option<i32>, stderr: String },
    #[error("external command produced no output file: {0}")]
    OutputMissing(String),
    #[error("external command timed out after {0:?}")]
    Timeout(Duration),
    #[error("group {0:?} needed by this transform is not present")]
    MissingGroup(String),
    #[error(transparent)]
    Volio(#[from] VolioError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Collection(#[from] Box<CollectionError>),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// A chain failure: the index and name of the node that failed.
#[derive(Debug, Error)]
#[error("transform #{index} ({name}) failed: {source}")]
pub struct ChainError {
    pub index: usize,
    pub name: String,
    #[source]
    pub source: TransformError,
}

/// One operation with validated parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformOp {
    ZeroMeanUnitStd {
        per_channel: bool,
        /// Compute statistics inside this group's (binary) mask.
        mask_group: Option<String>,
    },
    ClipPercentiles {
        lo: f64,
        hi: f64,
    },
    Resample {
        spacing: Vec<f64>,
        interp: Interp,
    },
    ApplyMask {
        mask_group: String,
    },
    Binarize {
        threshold: f32,
    },
    IslandRemoval {
        min_voxels: usize,
        connectivity: Option<Connectivity>,
    },
    HoleFill {
        connectivity: Option<Connectivity>,
    },
    ExternalCommand {
        command: String,
        timeout: Duration,
    },
}

impl TransformOp {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::ZeroMeanUnitStd { .. } => "zero_mean_unit_std",
            Self::ClipPercentiles { .. } => "clip_percentiles",
            Self::Resample { .. } => "resample",
            Self::ApplyMask { .. } => "apply_mask",
            Self::Binarize { .. } => "binarize",
            Self::IslandRemoval { .. } => "island_removal",
            Self::HoleFill { .. } => "hole_fill",
            Self::ExternalCommand { .. } => "external_command",
        }
    }

    fn validate(&self) -> Result<(), TransformError> {
        match self {
            Self::ClipPercentiles { lo, hi } if !(0.0 <= *lo && lo < hi && *hi <= 100.0) => {
                Err(TransformError::BadPercentileRange { lo: *lo, hi: *hi })
            }
            Self::Binarize { threshold } if !threshold.is_finite() => Err(
                TransformError::BadParam(format!("threshold {threshold} is not finite")),
            ),
            Self::IslandRemoval { min_voxels: 0, .. } => {
                Err(TransformError::BadParam("min_voxels must be >= 1".into()))
            }
            Self::Resample { spacing, .. }
                if spacing.is_empty() || spacing.iter().any(|&s| s.is_nan() || s <= 0.0) =>
            {
                Err(TransformError::BadParam(format!(
                    "resample spacing {spacing:?} must be positive"
                )))
            }
            Self::ExternalCommand { command, .. }
                if !(command.contains("{input}") && command.contains("{output}")) =>
            {
                Err(TransformError::BadParam(
                    "command needs {input} and {output} placeholders".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    fn params_json(&self) -> Value {
        match self {
            Self::ZeroMeanUnitStd {
                per_channel,
                mask_group,
            } => {
                let mut v = json!({ "per_channel": per_channel });
                if let Some(m) = mask_group {
                    v["mask_group"] = json!(m);
                }
                v
            }
            Self::ClipPercentiles { lo, hi } => json!({ "lo": lo, "hi": hi }),
            Self::Resample { spacing, interp } => json!({ "spacing": spacing, "interp": interp }),
            Self::ApplyMask { mask_group } => json!({ "mask_group": mask_group }),
            Self::Binarize { threshold } => json!({ "threshold": threshold }),
            Self::IslandRemoval {
                min_voxels,
                connectivity,
            } => {
                let mut v = json!({ "min_voxels": min_voxels });
                if let Some(c) = connectivity {
                    v["connectivity"] = json!(c.count());
                }
                v
            }
            Self::HoleFill { connectivity } => match connectivity {
                Some(c) => json!({ "connectivity": c.count() }),
                None => json!({}),
            },
            Self::ExternalCommand { command, timeout } => {
                json!({ "command": command, "timeout_s": timeout.as_secs_f64() })
            }
        }
    }

    fn apply(
        &self,
        group: &str,
        v: &AffineVolume,
        case: &BTreeMap<String, AffineVolume>,
    ) -> Result<AffineVolume, TransformError> {
        let conn = |c: &Option<Connectivity>| {
            c.unwrap_or_else(|| Connectivity::default_for(v.spatial_rank()))
        };
        match self {
            Self::ZeroMeanUnitStd {
                per_channel,
                mask_group,
            } => {
                let mask = mask_group
                    .as_ref()
                    .map(|m| {
                        case.get(m)
                            .ok_or_else(|| TransformError::MissingGroup(m.clone()))
                    })
                    .transpose()?;
                zero_mean_unit_std(v, *per_channel, mask)
            }
            Self::ClipPercentiles { lo, hi } => clip_percentiles(v, *lo, *hi),
            Self::Resample { spacing, interp } => {
                let interp = if group == GROUND_TRUTH {
                    Interp::Nearest
                } else {
                    *interp
                };
                resample(v, spacing, interp)
            }
            Self::ApplyMask { mask_group } => {
                let mask = case
                    .get(mask_group)
                    .ok_or_else(|| TransformError::MissingGroup(mask_group.clone()))?;
                apply_mask(v, mask)
            }
            Self::Binarize { threshold } => binarize(v, *threshold),
            Self::IslandRemoval {
                min_voxels,
                connectivity,
            } => island_removal(v, *min_voxels, conn(connectivity)),
            Self::HoleFill { connectivity } => hole_fill(v, conn(connectivity)),
            Self::ExternalCommand { command, timeout } => run_external(command, v, *timeout),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformNode {
    pub name: String,
    pub op: TransformOp,
    pub applies_to: BTreeSet<String>,
}

impl TransformNode {
    pub fn new(op: TransformOp, applies_to: &[&str]) -> Result<Self, TransformError> {
        op.validate()?;
        Ok(Self {
            name: op.kind().to_string(),
            op,
            applies_to: applies_to.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    kind: String,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    params: Option<Value>,
    #[serde(default)]
    applies_to: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NormParams {
    #[serde(default = "yes")]
    per_channel: bool,
    #[serde(default)]
    mask_group: Option<String>,
}

fn yes() -> bool {
    true
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipParams {
    lo: f64,
    hi: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResampleParams {
    spacing: Vec<f64>,
    #[serde(default = "trilinear")]
    interp: Interp,
}

fn trilinear() -> Interp {
    Interp::Trilinear
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskParams {
    mask_group: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BinarizeParams {
    #[serde(default = "half")]
    threshold: f32,
}

fn half() -> f32 {
    0.5
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IslandParams {
    #[serde(default = "ten")]
    min_voxels: usize,
    #[serde(default)]
    connectivity: Option<u32>,
}

fn ten() -> usize {
    10
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FillParams {
    #[serde(default)]
    connectivity: Option<u32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExternalParams {
    command: String,
    #[serde(default)]
    timeout_s: Option<f64>,
}

fn params<T: DeserializeOwned>(kind: &str, v: Value) -> Result<T, TransformError> {
    serde_json::from_value(v).map_err(|e| TransformError::BadParam(format!("{kind}: {e}")))
}

fn connectivity(n: Option<u32>) -> Result<Option<Connectivity>, TransformError> {
    n.map(|n| {
        Connectivity::from_count(n).ok_or_else(|| {
            TransformError::BadParam(format!("connectivity {n} (use 4, 8, 6 or 26)"))
        })
    })
    .transpose()
}

impl TransformNode {
    fn from_raw(raw: RawNode, default_group: &str) -> Result<Self, TransformError> {
        let p = raw.params.unwrap_or_else(|| json!({}));
        let kind = raw.kind.as_str();
        let op = match kind {
            "zero_mean_unit_std" => {
                let p: NormParams = params(kind, p)?;
                TransformOp::ZeroMeanUnitStd {
                    per_channel: p.per_channel,
                    mask_group: p.mask_group,
                }
            }
            "clip_percentiles" => {
                let p: ClipParams = params(kind, p)?;
                TransformOp::ClipPercentiles { lo: p.lo, hi: p.hi }
            }
            "resample" => {
                let p: ResampleParams = params(kind, p)?;
                TransformOp::Resample {
                    spacing: p.spacing,
                    interp: p.interp,
                }
            }
            "apply_mask" => {
                let p: MaskParams = params(kind, p)?;
                TransformOp::ApplyMask {
                    mask_group: p.mask_group,
                }
            }
            "binarize" => {
                let p: BinarizeParams = params(kind, p)?;
                TransformOp::Binarize {
                    threshold: p.threshold,
                }
            }
            "island_removal" => {
                let p: IslandParams = params(kind, p)?;
                TransformOp::IslandRemoval {
                    min_voxels: p.min_voxels,
                    connectivity: connectivity(p.connectivity)?,
                }
            }
            "hole_fill" => {
                let p: FillParams = params(kind, p)?;
                TransformOp::HoleFill {
                    connectivity: connectivity(p.connectivity)?,
                }
            }
            "external_command" => {
                let p: ExternalParams = params(kind, p)?;
                let timeout = match p.timeout_s {
                    Some(s) if s > 0.0 && s.is_finite() => Duration::from_secs_f64(s),
                    Some(s) => return Err(TransformError::BadParam(format!("timeout_s {s}"))),
                    None => DEFAULT_TIMEOUT,
                };
                TransformOp::ExternalCommand {
                    command: p.command,
                    timeout,
                }
            }
            other => {
                return Err(TransformError::BadParam(format!(
                    "unknown transform kind {other:?}"
                )))
            }
        };
        op.validate()?;
        let applies_to = match raw.applies_to {
            Some(g) if g.is_empty() => {
                return Err(TransformError::BadParam("applies_to is empty".into()))
            }
            Some(g) => g.into_iter().collect(),
            None => BTreeSet::from([default_group.to_string()]),
        };
        Ok(Self {
            name: raw.name.unwrap_or_else(|| op.kind().to_string()),
            op,
            applies_to,
        })
    }

    fn to_raw(&self) -> RawNode {
        RawNode {
            kind: self.op.kind().to_string(),
            name: (self.name != self.op.kind()).then(|| self.name.clone()),
            params: Some(self.op.params_json()),
            applies_to: Some(self.applies_to.iter().cloned().collect()),
        }
    }
}

/// Ordered transform nodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransformChain {
    pub nodes: Vec<TransformNode>,
}

impl TransformChain {
    pub fn new(nodes: Vec<TransformNode>) -> Self {
        Self { nodes }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parses the JSON chain schema; nodes without `applies_to` get
    /// `default_group`.
    pub fn from_json_value(v: &Value, default_group: &str) -> Result<Self, TransformError> {
        let raws: Vec<RawNode> = serde_json::from_value(v.clone())
            .map_err(|e| TransformError::BadParam(format!("chain: {e}")))?;
        let nodes = raws
            .into_iter()
            .map(|r| TransformNode::from_raw(r, default_group))
            .collect::<Result<_, _>>()?;
        Ok(Self { nodes })
    }

    pub fn from_json(s: &str, default_group: &str) -> Result<Self, TransformError> {
        let v: Value =
            serde_json::from_str(s).map_err(|e| TransformError::BadParam(format!("chain: {e}")))?;
        Self::from_json_value(&v, default_group)
    }

    pub fn to_json_value(&self) -> Value {
        serde_json::to_value(
            self.nodes
                .iter()
                .map(TransformNode::to_raw)
                .collect::<Vec<_>>(),
        )
        .expect("chain serializes")
    }

    /// The chain minus nodes whose name is listed.
    pub fn without(&self, skip: &[String]) -> Self {
        Self {
            nodes: self
                .nodes
                .iter()
                .filter(|n| !skip.contains(&n.name))
                .cloned()
                .collect(),
        }
    }

    pub fn names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }

    /// Applies every node, in order, to the groups it names. Groups a node
    /// names but the case lacks are skipped.
    pub fn apply_case(&self, case: &mut BTreeMap<String, AffineVolume>) -> Result<(), ChainError> {
        for (index, node) in self.nodes.iter().enumerate() {
            let targets: Vec<String> = node
                .applies_to
                .iter()
                .filter(|g| case.contains_key(*g))
                .cloned()
                .collect();
            for g in targets {
                let out = node
                    .op
                    .apply(&g, &case[&g], case)
                    .map_err(|source| ChainError {
                        index,
                        name: node.name.clone(),
                        source,
                    })?;
                case.insert(g, out);
            }
        }
        Ok(())
    }

    /// Treats `v` as the only member of `group`.
    pub fn apply_volume(&self, v: &AffineVolume, group: &str) -> Result<AffineVolume, ChainError> {
        let mut case = BTreeMap::from([(group.to_string(), v.clone())]);
        self.apply_case(&mut case)?;
        Ok(case.remove(group).expect("group retained"))
    }

    /// Applies the chain case by case; the result is memory-backed.
    pub fn apply_collection(&self, c: &DataCollection) -> Result<DataCollection, ChainError> {
        let wrap = |e: CollectionError| ChainError {
            index: 0,
            name: "load".into(),
            source: TransformError::Collection(Box::new(e)),
        };
        let mut out = DataCollection::new(c.groups().to_vec()).map_err(wrap)?;
        for (i, case) in c.cases().iter().enumerate() {
            if self.is_empty() {
                out.add_case(case.clone()).map_err(wrap)?;
                continue;
            }
            let mut tensors = BTreeMap::new();
            for g in case.sources.keys() {
                tensors.insert(
                    g.clone(),
                    c.case_tensor_at(i, g).map_err(wrap)?.as_ref().clone(),
                );
            }
            self.apply_case(&mut tensors)?;
            let mut new_case = Case::new(case.id.clone());
            for (g, v) in tensors {
                let sources = if self.nodes.iter().any(|n| n.applies_to.contains(&g)) {
                    v.split_channels().into_iter().map(Source::from).collect()
                } else {
                    case.sources[&g].clone()
                };
                new_case.sources.insert(g, sources);
            }
            out.add_case(new_case).map_err(wrap)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collection::INPUT_DATA;
    use crate::volume::IDENTITY_AFFINE;

    fn ramp(n: usize) -> AffineVolume {
        AffineVolume::from_fn(&[n, 2, 2], 1, IDENTITY_AFFINE, |i, _| {
            (i[0] * 4 + i[1] * 2 + i[2]) as f32
        })
        .unwrap()
    }

    #[test]
    fn parse_and_serialize() {
        let chain = TransformChain::from_json(
            r#"[{"kind":"clip_percentiles","params":{"lo":1,"hi":99},"applies_to":["input_data"]},
                {"kind":"zero_mean_unit_std","name":"normalization"},
                {"kind":"island_removal","params":{"min_voxels":5,"connectivity":26},"applies_to":["prediction"]}]"#,
            INPUT_DATA,
        )
        .unwrap();
        assert_eq!(
            chain.names(),
            ["clip_percentiles", "normalization", "island_removal"]
        );
        assert!(chain.nodes[1].applies_to.contains(INPUT_DATA));
        let again = TransformChain::from_json_value(&chain.to_json_value(), "other").unwrap();
        assert_eq!(again, chain);
        assert_eq!(chain.without(&["normalization".into()]).nodes.len(), 2);
    }

    #[test]
    fn construction_validation() {
        for bad in [
            r#"[{"kind":"clip_percentiles","params":{"lo":50,"hi":10}}]"#,
            r#"[{"kind":"island_removal","params":{"min_voxels":0}}]"#,
            r#"[{"kind":"island_removal","params":{"connectivity":5}}]"#,
            r#"[{"kind":"binarize","params":{"threshold":0.5,"extra":1}}]"#,
            r#"[{"kind":"external_command","params":{"command":"cp {input} x"}}]"#,
            r#"[{"kind":"warp"}]"#,
        ] {
            assert!(TransformChain::from_json(bad, INPUT_DATA).is_err(), "{bad}");
        }
    }

    #[test]
    fn empty_chain_is_identity() {
        let v = ramp(4);
        assert_eq!(
            TransformChain::default()
                .apply_volume(&v, INPUT_DATA)
                .unwrap(),
            v
        );
    }

    #[test]
    fn composition_matches_manual_steps() {
        let v = ramp(25);
        let chain = TransformChain::new(vec![
            TransformNode::new(
                TransformOp::ClipPercentiles { lo: 1.0, hi: 99.0 },
                &[INPUT_DATA],
            )
            .unwrap(),
            TransformNode::new(
                TransformOp::ZeroMeanUnitStd {
                    per_channel: true,
                    mask_group: None,
                },
                &[INPUT_DATA],
            )
            .unwrap(),
        ]);
        let manual =
            zero_mean_unit_std(&clip_percentiles(&v, 1.0, 99.0).unwrap(), true, None).unwrap();
        assert_eq!(chain.apply_volume(&v, INPUT_DATA).unwrap(), manual);
    }

    #[test]
    fn selectivity_and_error_index() {
        let v = ramp(4);
        let chain = TransformChain::new(vec![TransformNode::new(
            TransformOp::Binarize { threshold: 3.0 },
            &[GROUND_TRUTH],
        )
        .unwrap()]);
        assert_eq!(chain.apply_volume(&v, INPUT_DATA).unwrap(), v);
        let failing = TransformChain::new(vec![
            TransformNode::new(TransformOp::Binarize { threshold: 3.0 }, &[INPUT_DATA]).unwrap(),
            TransformNode::new(
                TransformOp::ZeroMeanUnitStd {
                    per_channel: true,
                    mask_group: Some("brain".into()),
                },
                &[INPUT_DATA],
            )
            .unwrap(),
        ]);
        let err = failing.apply_volume(&v, INPUT_DATA).unwrap_err();
        assert_eq!(err.index, 1);
        assert!(matches!(err.source, TransformError::MissingGroup(_)));
    }

    #[test]
    fn labels_resample_nearest() {
        let node = TransformNode::new(
            TransformOp::Resample {
                spacing: vec![0.5, 0.5, 0.5],
                interp: Interp::Trilinear,
            },
            &[INPUT_DATA, GROUND_TRUTH],
        )
        .unwrap();
        let mask = AffineVolume::from_fn(&[2, 2, 2], 1, IDENTITY_AFFINE, |i, _| {
            (i[0] == 1) as u8 as f32
        })
        .unwrap();
        let mut case = BTreeMap::from([
            (INPUT_DATA.to_string(), mask.clone()),
            (GROUND_TRUTH.to_string(), mask),
        ]);
        TransformChain::new(vec![node])
            .apply_case(&mut case)
            .unwrap();
        assert!(case[GROUND_TRUTH].is_binary());
        assert!(!case[INPUT_DATA].is_binary());
    }
}
