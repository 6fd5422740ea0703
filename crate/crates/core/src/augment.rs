//! Recursive augmentation. An ordered list of nodes, each with a
//! multiplicity, expands every case into `Π multiplicity` samples. Sample
//! `i` is addressed by mixed-radix digits (one per node) and materialized on
//! demand; node `k`'s random draws depend only on the case and digits
//! `0..=k`, so samples sharing a prefix share their upstream transforms and
//! any sample can be built in isolation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::collection::{Case, CollectionError, DataCollection, Source, GROUND_TRUTH, INPUT_DATA};
use crate::rng::{rng_for, Rng};
use crate::tensornet::{NetError, TrainingSet};
use crate::volume::{Affine, AffineVolume, VolumeError};

/// Group name → volume for one sample.
pub type Groups = BTreeMap<String, AffineVolume>;

/// Attempts at a label-centered patch before the last one is accepted.
pub const MAX_PATCH_ATTEMPTS: usize = 100;

const STREAM_TAG: u64 = 0xa06;
const SHUFFLE_TAG: u64 = 0x5f1e;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("case {case:?}: patch {patch:?} does not fit in volume {volume:?}")]
    PatchLargerThanVolume {
        case: String,
        patch: Vec<usize>,
        volume: Vec<usize>,
    },
    #[error("case {case:?}: channel dropout needs at least 2 channels in group {group:?}")]
    SingleChannelDropout { case: String, group: String },
    #[error("label group {0:?} is empty")]
    NoLabelVoxels(String),
    #[error("invalid augmentation: {0}")]
    Invalid(String),
    #[error("sample index {index} out of range for stream of length {len}")]
    OutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Collection(#[from] CollectionError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum AugmentKind {
    /// Independent flips along `axes` (all spatial axes when `None`).
    Flip {
        axes: Option<Vec<usize>>,
    },
    /// Quarter turns in every pair of `axes`, optionally combined with flips.
    Rotate90 {
        axes: Option<Vec<usize>>,
        flips: bool,
    },
    IntensityScale {
        range: [f64; 2],
    },
    IntensityShift {
        range: [f64; 2],
    },
    PatchExtract {
        shape: Vec<usize>,
        label_fraction: f64,
        label_group: String,
        min_label_voxels: usize,
    },
    ChannelDropout {
        probability: f64,
    },
    DownsampleNn {
        factor: usize,
    },
}

impl AugmentKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Flip { .. } => "flip",
            Self::Rotate90 { .. } => "rotate90",
            Self::IntensityScale { .. } => "intensity_scale",
            Self::IntensityShift { .. } => "intensity_shift",
            Self::PatchExtract { .. } => "patch_extract",
            Self::ChannelDropout { .. } => "channel_dropout",
            Self::DownsampleNn { .. } => "downsample_nn",
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(
            self,
            Self::Flip { .. }
                | Self::Rotate90 { .. }
                | Self::PatchExtract { .. }
                | Self::DownsampleNn { .. }
        )
    }

    fn params_json(&self) -> Value {
        match self {
            Self::Flip { axes } => json!({ "axes": axes }),
            Self::Rotate90 { axes, flips } => json!({ "axes": axes, "flips": flips }),
            Self::IntensityScale { range } | Self::IntensityShift { range } => {
                json!({ "range": range })
            }
            Self::PatchExtract {
                shape,
                label_fraction,
                label_group,
                min_label_voxels,
            } => json!({
                "shape": shape,
                "label_fraction": label_fraction,
                "label_group": label_group,
                "min_label_voxels": min_label_voxels,
            }),
            Self::ChannelDropout { probability } => json!({ "probability": probability }),
            Self::DownsampleNn { factor } => json!({ "factor": factor }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationNode {
    pub kind: AugmentKind,
    pub multiplicity: usize,
    /// Groups the node touches; `None` means the kind's default.
    pub applies_to: Option<Vec<String>>,
}

impl AugmentationNode {
    pub fn new(kind: AugmentKind, multiplicity: usize) -> Result<Self, AugmentError> {
        let node = Self {
            kind,
            multiplicity,
            applies_to: None,
        };
        node.validate()?;
        Ok(node)
    }

    pub fn applied_to(mut self, groups: &[&str]) -> Self {
        self.applies_to = Some(groups.iter().map(|g| g.to_string()).collect());
        self
    }

    fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::Invalid(format!("{}: {m}", self.kind.name())));
        if self.multiplicity == 0 {
            return bad("multiplicity must be at least 1".into());
        }
        if self.kind.is_spatial() && self.applies_to.is_some() {
            return bad("spatial nodes apply to every group".into());
        }
        match &self.kind {
            AugmentKind::Flip { axes } | AugmentKind::Rotate90 { axes, .. } => {
                if let Some(a) = axes {
                    if a.iter().any(|&x| x > 2) {
                        return bad(format!("axes {a:?} out of range"));
                    }
                }
            }
            AugmentKind::IntensityScale { range } => {
                if !(range[0] > 0.0 && range[0] <= range[1] && range[1].is_finite()) {
                    return bad(format!("scale range {range:?} must satisfy 0 < a <= b"));
                }
            }
            AugmentKind::IntensityShift { range } => {
                if !(range[0] <= range[1] && range[0].is_finite() && range[1].is_finite()) {
                    return bad(format!("shift range {range:?} must satisfy c <= d"));
                }
            }
            AugmentKind::PatchExtract {
                shape,
                label_fraction,
                ..
            } => {
                if shape.is_empty() || shape.contains(&0) {
                    return bad(format!("patch shape {shape:?}"));
                }
                if !(0.0..=1.0).contains(label_fraction) {
                    return bad(format!("label_fraction {label_fraction} outside [0, 1]"));
                }
            }
            AugmentKind::ChannelDropout { probability } => {
                if !(0.0..1.0).contains(probability) {
                    return bad(format!("probability {probability} outside [0, 1)"));
                }
            }
            AugmentKind::DownsampleNn { factor } => {
                if *factor < 2 {
                    return bad(format!("factor {factor} must be at least 2"));
                }
            }
        }
        Ok(())
    }

    fn targets(&self, groups: &Groups) -> Vec<String> {
        match &self.applies_to {
            Some(g) => g
                .iter()
                .filter(|g| groups.contains_key(*g))
                .cloned()
                .collect(),
            None if self.kind.is_spatial() => groups.keys().cloned().collect(),
            None => groups
                .keys()
                .filter(|g| *g == INPUT_DATA)
                .cloned()
                .collect(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    kind: String,
    #[serde(default)]
    params: Option<Value>,
    #[serde(default)]
    multiplicity: Option<usize>,
    #[serde(default)]
    applies_to: Option<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AxesParams {
    #[serde(default)]
    axes: Option<Vec<usize>>,
    #[serde(default)]
    flips: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RangeParams {
    range: [f64; 2],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchParams {
    shape: Vec<usize>,
    #[serde(default)]
    count: Option<usize>,
    #[serde(default)]
    label_fraction: f64,
    #[serde(default = "gt")]
    label_group: String,
    #[serde(default = "one")]
    min_label_voxels: usize,
}

fn gt() -> String {
    GROUND_TRUTH.into()
}

fn one() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DropoutParams {
    probability: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorParams {
    factor: usize,
}

fn params<T: DeserializeOwned>(kind: &str, v: Value) -> Result<T, AugmentError> {
    serde_json::from_value(v).map_err(|e| AugmentError::Invalid(format!("{kind}: {e}")))
}

/// Parses `[{"kind", "params", "multiplicity", "applies_to"}]`.
pub fn nodes_from_json(s: &str) -> Result<Vec<AugmentationNode>, AugmentError> {
    let v: Value = serde_json::from_str(s).map_err(|e| AugmentError::Invalid(e.to_string()))?;
    nodes_from_json_value(&v)
}

pub fn nodes_from_json_value(v: &Value) -> Result<Vec<AugmentationNode>, AugmentError> {
    let raw: Vec<RawNode> =
        serde_json::from_value(v.clone()).map_err(|e| AugmentError::Invalid(e.to_string()))?;
    raw.into_iter()
        .map(|r| {
            let p = r.params.unwrap_or_else(|| json!({}));
            let k = r.kind.as_str();
            let mut multiplicity = r.multiplicity;
            let kind = match k {
                "flip" => {
                    let a: AxesParams = params(k, p)?;
                    if a.flips {
                        return Err(AugmentError::Invalid("flip: unknown field `flips`".into()));
                    }
                    AugmentKind::Flip { axes: a.axes }
                }
                "rotate90" => {
                    let a: AxesParams = params(k, p)?;
                    AugmentKind::Rotate90 {
                        axes: a.axes,
                        flips: a.flips,
                    }
                }
                "intensity_scale" => AugmentKind::IntensityScale {
                    range: params::<RangeParams>(k, p)?.range,
                },
                "intensity_shift" => AugmentKind::IntensityShift {
                    range: params::<RangeParams>(k, p)?.range,
                },
                "patch_extract" => {
                    let pp: PatchParams = params(k, p)?;
                    match (pp.count, multiplicity) {
                        (Some(c), Some(m)) if c != m => {
                            return Err(AugmentError::Invalid(format!(
                                "patch_extract: count {c} differs from multiplicity {m}"
                            )))
                        }
                        (Some(c), None) => multiplicity = Some(c),
                        _ => {}
                    }
                    AugmentKind::PatchExtract {
                        shape: pp.shape,
                        label_fraction: pp.label_fraction,
                        label_group: pp.label_group,
                        min_label_voxels: pp.min_label_voxels,
                    }
                }
                "channel_dropout" => AugmentKind::ChannelDropout {
                    probability: params::<DropoutParams>(k, p)?.probability,
                },
                "downsample_nn" => AugmentKind::DownsampleNn {
                    factor: params::<FactorParams>(k, p)?.factor,
                },
                other => {
                    return Err(AugmentError::Invalid(format!(
                        "unknown augmentation kind {other:?}"
                    )))
                }
            };
            let node = AugmentationNode {
                kind,
                multiplicity: multiplicity.unwrap_or(1),
                applies_to: r.applies_to,
            };
            node.validate()?;
            Ok(node)
        })
        .collect()
}

pub fn nodes_to_json_value(nodes: &[AugmentationNode]) -> Value {
    Value::Array(
        nodes
            .iter()
            .map(|n| {
                let mut o = json!({
                    "kind": n.kind.name(),
                    "params": n.kind.params_json(),
                    "multiplicity": n.multiplicity,
                });
                if let Some(g) = &n.applies_to {
                    o["applies_to"] = json!(g);
                }
                o
            })
            .collect(),
    )
}

/// What one node drew for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: String,
    pub params: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Signed axis permutation acting on centered voxel coordinates: the output
/// voxel `o` reads the input voxel `S·(o − c) + c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Orientation(pub [[i8; 3]; 3]);

impl Orientation {
    pub const IDENTITY: Self = Self([[1, 0, 0], [0, 1, 0], [0, 0, 1]]);

    pub fn flip(axis: usize) -> Self {
        let mut m = Self::IDENTITY.0;
        m[axis][axis] = -1;
        Self(m)
    }

    /// Quarter turn in the (a, b) plane.
    pub fn rotation(a: usize, b: usize) -> Self {
        let mut m = Self::IDENTITY.0;
        m[a][a] = 0;
        m[b][b] = 0;
        m[a][b] = 1;
        m[b][a] = -1;
        Self(m)
    }

    /// Applying `self` and then `other`.
    pub fn then(&self, other: &Self) -> Self {
        let mut m = [[0i8; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Self(m)
    }

    pub fn inverse(&self) -> Self {
        let mut m = [[0i8; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.0[j][i];
            }
        }
        Self(m)
    }

    fn preserves(&self, shape: &[usize]) -> bool {
        let n = |a: usize| shape.get(a).copied().unwrap_or(1);
        (0..3).all(|i| (0..3).all(|j| self.0[i][j] == 0 || n(i) == n(j)))
    }

    /// Reorients `v`; the element must preserve its shape.
    pub fn apply(&self, v: &AffineVolume) -> AffineVolume {
        let spatial = v.spatial_shape().to_vec();
        debug_assert!(self.preserves(&spatial));
        let n: Vec<i64> = (0..3)
            .map(|a| spatial.get(a).copied().unwrap_or(1) as i64)
            .collect();
        let c = v.channels();
        let mut out = vec![0.0f32; v.data().len()];
        let src = v.data();
        let mut o = [0i64; 3];
        let mut w = 0usize;
        for x in 0..n[0] {
            o[0] = x;
            for y in 0..n[1] {
                o[1] = y;
                for z in 0..n[2] {
                    o[2] = z;
                    let mut s = [0i64; 3];
                    for (j, sj) in s.iter_mut().enumerate() {
                        let d: i64 = (0..3)
                            .map(|k| i64::from(self.0[j][k]) * (2 * o[k] - (n[k] - 1)))
                            .sum();
                        *sj = (d + n[j] - 1) / 2;
                    }
                    let r = ((s[0] * n[1] + s[1]) * n[2] + s[2]) as usize * c;
                    out[w..w + c].copy_from_slice(&src[r..r + c]);
                    w += c;
                }
            }
        }
        let mut t = [[0.0f64; 4]; 4];
        t[3][3] = 1.0;
        for j in 0..3 {
            let cj = (n[j] - 1) as f64 / 2.0;
            let mut sc = 0.0;
            for k in 0..3 {
                t[j][k] = f64::from(self.0[j][k]);
                sc += t[j][k] * (n[k] - 1) as f64 / 2.0;
            }
            t[j][3] = cj - sc;
        }
        let mut r = v.with_data(out, v.shape().to_vec()).expect("same shape");
        r.set_affine(matmul(v.affine(), &t)).expect("finite affine");
        r
    }
}

fn matmul(a: &Affine, b: &Affine) -> Affine {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

/// Group generated by flips along `axes` (when `flips`) and quarter turns
/// in each pair of `axes` of equal extent (when `rotations`), sorted.
pub fn orientation_group(
    shape: &[usize],
    axes: &[usize],
    rotations: bool,
    flips: bool,
) -> Vec<Orientation> {
    let mut gens = Vec::new();
    if flips {
        gens.extend(axes.iter().map(|&a| Orientation::flip(a)));
    }
    if rotations {
        for (i, &a) in axes.iter().enumerate() {
            for &b in &axes[i + 1..] {
                if shape.get(a) == shape.get(b) {
                    gens.push(Orientation::rotation(a, b));
                }
            }
        }
    }
    let mut seen = BTreeSet::from([Orientation::IDENTITY]);
    let mut queue = VecDeque::from([Orientation::IDENTITY]);
    while let Some(g) = queue.pop_front() {
        for h in &gens {
            let n = g.then(h);
            if seen.insert(n) {
                queue.push_back(n);
            }
        }
    }
    seen.into_iter().collect()
}

fn resolve_axes(axes: &Option<Vec<usize>>, rank: usize) -> Vec<usize> {
    match axes {
        Some(a) => a.iter().copied().filter(|&x| x < rank).collect(),
        None => (0..rank).collect(),
    }
}

fn spatial_of(groups: &Groups) -> Vec<usize> {
    groups
        .values()
        .next()
        .map(|v| v.spatial_shape().to_vec())
        .unwrap_or_default()
}

/// Draws one element of the orientation group and applies it to every
/// target group.
pub fn flip_rotate(
    groups: &mut Groups,
    targets: &[String],
    axes: &[usize],
    rotations: bool,
    flips: bool,
    rng: &mut Rng,
) -> Orientation {
    let elements = orientation_group(&spatial_of(groups), axes, rotations, flips);
    let g = *elements.choose(rng).expect("group contains the identity");
    if g != Orientation::IDENTITY {
        for t in targets {
            let v = groups.get_mut(t).expect("target exists");
            *v = g.apply(v);
        }
    }
    g
}

/// `v · s + t` per channel with `s ~ U[scale]`, `t ~ U[shift]`; returns the
/// draws per group.
pub fn intensity_scale_shift(
    groups: &mut Groups,
    targets: &[String],
    scale: [f64; 2],
    shift: [f64; 2],
    rng: &mut Rng,
) -> BTreeMap<String, Vec<(f64, f64)>> {
    let mut drawn = BTreeMap::new();
    for t in targets {
        let v = groups.get_mut(t).expect("target exists");
        let c = v.channels();
        let st: Vec<(f64, f64)> = (0..c)
            .map(|_| {
                (
                    rng.gen_range(scale[0]..=scale[1]),
                    rng.gen_range(shift[0]..=shift[1]),
                )
            })
            .collect();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            let (s, sh) = st[i % c];
            *x = (f64::from(*x) * s + sh) as f32;
        }
        drawn.insert(t.clone(), st);
    }
    drawn
}

/// Zeroes each channel independently with `probability`, redrawing when
/// every channel would be dropped. Returns dropped channel indices.
pub fn channel_dropout(
    groups: &mut Groups,
    targets: &[String],
    probability: f64,
    rng: &mut Rng,
) -> BTreeMap<String, Vec<usize>> {
    let mut drawn = BTreeMap::new();
    for t in targets {
        let v = groups.get_mut(t).expect("target exists");
        let c = v.channels();
        let dropped: Vec<usize> = loop {
            let d: Vec<usize> = (0..c).filter(|_| rng.gen_bool(probability)).collect();
            if d.len() < c {
                break d;
            }
        };
        if !dropped.is_empty() {
            for (i, x) in v.data_mut().iter_mut().enumerate() {
                if dropped.contains(&(i % c)) {
                    *x = 0.0;
                }
            }
        }
        drawn.insert(t.clone(), dropped);
    }
    drawn
}

/// Keeps every `factor`-th voxel after cropping each axis to a multiple of
/// `factor`; returns the cropped extent.
pub fn downsample_nn(groups: &mut Groups, targets: &[String], factor: usize) -> Vec<usize> {
    let spatial = spatial_of(groups);
    let cropped: Vec<usize> = spatial.iter().map(|&n| n / factor * factor).collect();
    let out: Vec<usize> = cropped.iter().map(|&n| n / factor).collect();
    for t in targets {
        let v = groups.get_mut(t).expect("target exists");
        let c = v.channels();
        let mut shape = out.clone();
        shape.push(c);
        let mut data = Vec::with_capacity(out.iter().product::<usize>() * c);
        for_each_index(&out, |idx| {
            let s: Vec<usize> = idx.iter().map(|&i| i * factor).collect();
            let o = v.voxel_offset(&s);
            data.extend_from_slice(&v.data()[o..o + c]);
        });
        let mut a = *v.affine();
        for row in a.iter_mut().take(3) {
            for x in row.iter_mut().take(spatial.len()) {
                *x *= factor as f64;
            }
        }
        let mut r = v.with_data(data, shape).expect("consistent shape");
        r.set_affine(a).expect("finite affine");
        *v = r;
    }
    cropped
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.contains(&0) {
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    loop {
        f(&idx);
        let mut a = shape.len();
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

/// Copies the `shape` region at `corner` out of `v`, shifting the affine
/// origin so world coordinates are kept.
pub fn crop_volume(v: &AffineVolume, corner: &[usize], shape: &[usize]) -> AffineVolume {
    let c = v.channels();
    let mut out_shape = shape.to_vec();
    out_shape.push(c);
    let mut data = Vec::with_capacity(shape.iter().product::<usize>() * c);
    let last = shape.len() - 1;
    let mut row = shape.to_vec();
    row[last] = 1;
    for_each_index(&row, |idx| {
        let s: Vec<usize> = idx.iter().zip(corner).map(|(i, k)| i + k).collect();
        let o = v.voxel_offset(&s);
        data.extend_from_slice(&v.data()[o..o + shape[last] * c]);
    });
    let mut a = *v.affine();
    for row in a.iter_mut().take(3) {
        row[3] += corner
            .iter()
            .enumerate()
            .map(|(k, &n)| row[k] * n as f64)
            .sum::<f64>();
    }
    let mut r = v.with_data(data, out_shape).expect("consistent shape");
    r.set_affine(a).expect("finite affine");
    r
}

fn label_voxels(label: &AffineVolume) -> Vec<usize> {
    let c = label.channels();
    (0..label.voxel_count())
        .filter(|&i| label.data()[i * c..(i + 1) * c].iter().any(|&x| x != 0.0))
        .collect()
}

fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for a in (0..shape.len()).rev() {
        idx[a] = i % shape[a];
        i /= shape[a];
    }
    idx
}

fn count_inside(label: &AffineVolume, corner: &[usize], shape: &[usize]) -> usize {
    let c = label.channels();
    let mut n = 0;
    for_each_index(shape, |idx| {
        let s: Vec<usize> = idx.iter().zip(corner).map(|(i, k)| i + k).collect();
        let o = label.voxel_offset(&s);
        if label.data()[o..o + c].iter().any(|&x| x != 0.0) {
            n += 1;
        }
    });
    n
}

/// Result of placing one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDraw {
    pub corner: Vec<usize>,
    /// Label voxel the patch was centered on, for label-centered draws.
    pub center: Option<Vec<usize>>,
    pub attempts: usize,
    pub warning: Option<String>,
}

/// Places one patch. With `centered`, the center is drawn from nonzero
/// voxels of `label` and redrawn until `min_label_voxels` label voxels fall
/// inside (at most [`MAX_PATCH_ATTEMPTS`] times); otherwise, or when the
/// label is empty, the corner is uniform over valid positions.
pub fn place_patch(
    spatial: &[usize],
    shape: &[usize],
    label: Option<&AffineVolume>,
    centered: bool,
    min_label_voxels: usize,
    rng: &mut Rng,
) -> PatchDraw {
    let uniform = |rng: &mut Rng| -> Vec<usize> {
        spatial
            .iter()
            .zip(shape)
            .map(|(&n, &s)| rng.gen_range(0..=n - s))
            .collect()
    };
    if !centered {
        return PatchDraw {
            corner: uniform(rng),
            center: None,
            attempts: 1,
            warning: None,
        };
    }
    let voxels = label.map(label_voxels).unwrap_or_default();
    if voxels.is_empty() {
        return PatchDraw {
            corner: uniform(rng),
            center: None,
            attempts: 1,
            warning: Some("NoLabelVoxels: label group is empty, patch drawn uniformly".into()),
        };
    }
    let label = label.expect("nonempty implies present");
    let mut last = None;
    for attempt in 1..=MAX_PATCH_ATTEMPTS {
        let center = unravel(*voxels.choose(rng).expect("nonempty"), spatial);
        let corner: Vec<usize> = center
            .iter()
            .zip(spatial.iter().zip(shape))
            .map(|(&c, (&n, &s))| c.saturating_sub(s / 2).min(n - s))
            .collect();
        let ok = count_inside(label, &corner, shape) >= min_label_voxels;
        last = Some((corner, center, attempt));
        if ok {
            break;
        }
    }
    let (corner, center, attempts) = last.expect("at least one attempt");
    PatchDraw {
        corner,
        center: Some(center),
        attempts,
        warning: None,
    }
}

/// One materialized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub case_id: String,
    pub case_index: usize,
    /// Per-node variant digits.
    pub variant: Vec<usize>,
    pub groups: Groups,
    pub provenance: Vec<Provenance>,
}

impl Sample {
    /// `case/augNNNN` with the within-case variant number.
    pub fn id(&self, nodes: &[AugmentationNode]) -> String {
        let n = self
            .variant
            .iter()
            .zip(nodes)
            .fold(0usize, |acc, (&d, node)| acc * node.multiplicity + d);
        format!("{}/aug{n:04}", self.case_id)
    }
}

/// Lazily evaluated samples of a collection under a node list.
pub struct SampleStream<'a> {
    collection: &'a DataCollection,
    nodes: Vec<AugmentationNode>,
    seed: u64,
    per_case: usize,
}

fn node_error(case: &str, m: impl Into<String>) -> AugmentError {
    AugmentError::Invalid(format!("case {case:?}: {}", m.into()))
}

/// Binds `nodes` to `c`, checking every node against every case's shapes.
pub fn expand<'a>(
    c: &'a DataCollection,
    nodes: &[AugmentationNode],
    seed: u64,
) -> Result<SampleStream<'a>, AugmentError> {
    let mut per_case = 1usize;
    for n in nodes {
        n.validate()?;
        per_case = per_case
            .checked_mul(n.multiplicity)
            .ok_or_else(|| AugmentError::Invalid("stream length overflows".into()))?;
    }
    for (ci, case) in c.cases().iter().enumerate() {
        let mut shape: Option<Vec<usize>> = None;
        let mut channels = BTreeMap::new();
        for g in case.sources.keys() {
            let v = c.case_tensor_at(ci, g)?;
            channels.insert(g.clone(), v.channels());
            match &shape {
                None => shape = Some(v.spatial_shape().to_vec()),
                Some(s) if s != v.spatial_shape() => {
                    return Err(node_error(
                        &case.id,
                        format!(
                            "groups disagree on spatial shape ({s:?} vs {:?})",
                            v.spatial_shape()
                        ),
                    ))
                }
                _ => {}
            }
        }
        let Some(mut shape) = shape else { continue };
        for n in nodes {
            match &n.kind {
                AugmentKind::PatchExtract {
                    shape: p,
                    label_fraction,
                    label_group,
                    ..
                } => {
                    if p.len() != shape.len() || p.iter().zip(&shape).any(|(a, b)| a > b) {
                        return Err(AugmentError::PatchLargerThanVolume {
                            case: case.id.clone(),
                            patch: p.clone(),
                            volume: shape,
                        });
                    }
                    if *label_fraction > 0.0 && !channels.contains_key(label_group) {
                        return Err(node_error(
                            &case.id,
                            format!("label group {label_group:?} is missing"),
                        ));
                    }
                    shape = p.clone();
                }
                AugmentKind::DownsampleNn { factor } => {
                    if shape.iter().any(|&s| s < *factor) {
                        return Err(node_error(
                            &case.id,
                            format!("downsample factor {factor} exceeds shape {shape:?}"),
                        ));
                    }
                    shape = shape.iter().map(|&s| s / factor).collect();
                }
                AugmentKind::ChannelDropout { .. } => {
                    let groups: Vec<String> = match &n.applies_to {
                        Some(g) => g.clone(),
                        None => vec![INPUT_DATA.into()],
                    };
                    for g in groups {
                        if channels.get(&g).is_some_and(|&ch| ch < 2) {
                            return Err(AugmentError::SingleChannelDropout {
                                case: case.id.clone(),
                                group: g,
                            });
                        }
                    }
                }
                AugmentKind::Flip { axes } | AugmentKind::Rotate90 { axes, .. } => {
                    if shape.len() < 2 {
                        return Err(node_error(
                            &case.id,
                            "flips and rotations need at least 2 spatial axes",
                        ));
                    }
                    if let Some(a) = axes {
                        if a.iter().any(|&x| x >= shape.len()) {
                            return Err(node_error(
                                &case.id,
                                format!("axes {a:?} exceed rank {}", shape.len()),
                            ));
                        }
                    }
                }
                AugmentKind::IntensityScale { .. } | AugmentKind::IntensityShift { .. } => {}
            }
        }
    }
    c.len()
        .checked_mul(per_case)
        .ok_or_else(|| AugmentError::Invalid("stream length overflows".into()))?;
    Ok(SampleStream {
        collection: c,
        nodes: nodes.to_vec(),
        seed,
        per_case,
    })
}

impl<'a> SampleStream<'a> {
    pub fn len(&self) -> usize {
        self.collection.len() * self.per_case
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> &[AugmentationNode] {
        &self.nodes
    }

    pub fn samples_per_case(&self) -> usize {
        self.per_case
    }

    /// Per-node digits of sample `index` within its case.
    pub fn digits(&self, index: usize) -> (usize, Vec<usize>) {
        let case = index / self.per_case;
        let mut rem = index % self.per_case;
        let mut d = vec![0; self.nodes.len()];
        for (k, n) in self.nodes.iter().enumerate().rev() {
            d[k] = rem % n.multiplicity;
            rem /= n.multiplicity;
        }
        (case, d)
    }

    pub fn get(&self, index: usize) -> Result<Sample, AugmentError> {
        if index >= self.len() {
            return Err(AugmentError::OutOfRange {
                index,
                len: self.len(),
            });
        }
        let (ci, digits) = self.digits(index);
        let case = &self.collection.cases()[ci];
        let mut groups = Groups::new();
        for g in case.sources.keys() {
            groups.insert(g.clone(), (*self.collection.case_tensor_at(ci, g)?).clone());
        }
        let mut provenance = Vec::with_capacity(self.nodes.len());
        let mut path = vec![STREAM_TAG, ci as u64];
        for (k, node) in self.nodes.iter().enumerate() {
            path.push(digits[k] as u64);
            let mut rng = rng_for(self.seed, &path);
            provenance.push(apply_node(
                node,
                digits[k],
                &mut groups,
                &mut rng,
                &case.id,
            )?);
        }
        Ok(Sample {
            case_id: case.id.clone(),
            case_index: ci,
            variant: digits,
            groups,
            provenance,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Sample, AugmentError>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

fn apply_node(
    node: &AugmentationNode,
    digit: usize,
    groups: &mut Groups,
    rng: &mut Rng,
    case: &str,
) -> Result<Provenance, AugmentError> {
    let targets = node.targets(groups);
    let rank = spatial_of(groups).len();
    let mut warning = None;
    let params = match &node.kind {
        AugmentKind::Flip { axes } => {
            let g = flip_rotate(
                groups,
                &targets,
                &resolve_axes(axes, rank),
                false,
                true,
                rng,
            );
            json!({ "orientation": g })
        }
        AugmentKind::Rotate90 { axes, flips } => {
            let g = flip_rotate(
                groups,
                &targets,
                &resolve_axes(axes, rank),
                true,
                *flips,
                rng,
            );
            json!({ "orientation": g })
        }
        AugmentKind::IntensityScale { range } => {
            let d = intensity_scale_shift(groups, &targets, *range, [0.0, 0.0], rng);
            let s: BTreeMap<_, Vec<f64>> = d
                .into_iter()
                .map(|(g, v)| (g, v.iter().map(|p| p.0).collect()))
                .collect();
            json!({ "scale": s })
        }
        AugmentKind::IntensityShift { range } => {
            let d = intensity_scale_shift(groups, &targets, [1.0, 1.0], *range, rng);
            let s: BTreeMap<_, Vec<f64>> = d
                .into_iter()
                .map(|(g, v)| (g, v.iter().map(|p| p.1).collect()))
                .collect();
            json!({ "shift": s })
        }
        AugmentKind::PatchExtract {
            shape,
            label_fraction,
            label_group,
            min_label_voxels,
        } => {
            let spatial = spatial_of(groups);
            if shape.len() != spatial.len() || shape.iter().zip(&spatial).any(|(a, b)| a > b) {
                return Err(AugmentError::PatchLargerThanVolume {
                    case: case.into(),
                    patch: shape.clone(),
                    volume: spatial,
                });
            }
            let centered_count = (label_fraction * node.multiplicity as f64 - 1e-9)
                .ceil()
                .max(0.0) as usize;
            let centered = digit < centered_count;
            let d = place_patch(
                &spatial,
                shape,
                groups.get(label_group),
                centered,
                *min_label_voxels,
                rng,
            );
            if let Some(w) = &d.warning {
                log::warn!("case {case:?}: {w}");
                warning = Some(w.clone());
            }
            for t in &targets {
                let v = groups.get_mut(t).expect("target exists");
                *v = crop_volume(v, &d.corner, shape);
            }
            json!({ "corner": d.corner, "shape": shape, "center": d.center, "attempts": d.attempts })
        }
        AugmentKind::ChannelDropout { probability } => {
            for t in &targets {
                if groups[t].channels() < 2 {
                    return Err(AugmentError::SingleChannelDropout {
                        case: case.into(),
                        group: t.clone(),
                    });
                }
            }
            json!({ "dropped": channel_dropout(groups, &targets, *probability, rng) })
        }
        AugmentKind::DownsampleNn { factor } => {
            let cropped = downsample_nn(groups, &targets, *factor);
            json!({ "factor": factor, "cropped_to": cropped })
        }
    };
    Ok(Provenance {
        kind: node.kind.name().into(),
        params,
        warning,
    })
}

impl TrainingSet for SampleStream<'_> {
    fn len(&self) -> usize {
        SampleStream::len(self)
    }

    fn pair(&self, index: usize) -> Result<(Arc<AffineVolume>, Arc<AffineVolume>), NetError> {
        let mut s = self.get(index).map_err(|e| NetError::Data(e.to_string()))?;
        let mut take = |g: &str| {
            s.groups
                .remove(g)
                .map(Arc::new)
                .ok_or_else(|| NetError::Data(format!("sample {index} has no group {g:?}")))
        };
        let x = take(INPUT_DATA)?;
        let y = take(GROUND_TRUTH)?;
        Ok((x, y))
    }
}

/// Materializes every sample, shuffles them with a seed-derived
/// permutation and returns them as an in-memory collection with ids
/// `case/augNNNN`.
pub fn expand_to_collection(
    c: &DataCollection,
    nodes: &[AugmentationNode],
    seed: u64,
) -> Result<DataCollection, AugmentError> {
    let stream = expand(c, nodes, seed)?;
    let mut order: Vec<usize> = (0..stream.len()).collect();
    order.shuffle(&mut rng_for(seed, &[SHUFFLE_TAG]));
    let mut out = DataCollection::new(c.groups().to_vec())?;
    for i in order {
        let s = stream.get(i)?;
        let mut case = Case::new(s.id(nodes));
        for (g, v) in &s.groups {
            case = case.with_group(
                g.clone(),
                v.split_channels().into_iter().map(Source::from).collect(),
            );
        }
        out.add_case(case)?;
    }
    Ok(out)
}

/// [`expand_to_collection`] written as a DNAR archive.
pub fn expand_to_archive(
    c: &DataCollection,
    nodes: &[AugmentationNode],
    seed: u64,
    path: impl AsRef<Path>,
) -> Result<(), AugmentError> {
    expand_to_collection(c, nodes, seed)?.write_archive(path)?;
    Ok(())
}
