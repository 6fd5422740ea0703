//! Patch-based inference: tile a volume with fixed-size patches, run them
//! through a model in batches and average overlapping predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collection::{CollectionError, DataCollection, INPUT_DATA};
use crate::tensor::Tensor;
use crate::tensornet::{Model, NetError};
use crate::transforms::{ChainError, TransformChain, PREDICTION};
use crate::volume::{AffineVolume, VolumeError};

#[derive(Debug, Error)]
pub enum InferError {
    #[error("axis {axis}: patch extent {patch} exceeds volume extent {volume} and padding is off")]
    PatchExceedsVolume {
        axis: usize,
        patch: usize,
        volume: usize,
    },
    #[error("overlap fraction {0} outside [0, 1)")]
    BadOverlap(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Model(#[from] NetError),
    #[error(transparent)]
    Postprocess(#[from] ChainError),
    #[error(transparent)]
    Collection(#[from] CollectionError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    #[default]
    Zero,
    Reflect,
    None,
}

/// Where every patch goes, and how the volume is padded first.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlan {
    pub volume_shape: Vec<usize>,
    pub patch_shape: Vec<usize>,
    pub overlap_fraction: Vec<f64>,
    pub stride: Vec<usize>,
    /// Per-axis (before, after) padding.
    pub pad: Vec<(usize, usize)>,
    pub pad_mode: PadMode,
    /// Per-axis corner positions in padded coordinates.
    pub axis_offsets: Vec<Vec<usize>>,
}

impl PatchPlan {
    pub fn padded_shape(&self) -> Vec<usize> {
        self.volume_shape
            .iter()
            .zip(&self.pad)
            .map(|(n, (b, a))| n + b + a)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.axis_offsets.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All patch corners, lexicographically sorted.
    pub fn offsets(&self) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for axis in &self.axis_offsets {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&o| {
                        let mut p = prefix.clone();
                        p.push(o);
                        p
                    })
                })
                .collect();
        }
        out
    }

    /// Number of patches covering each voxel of the padded volume, in
    /// row-major order.
    pub fn hit_counts(&self) -> Vec<u32> {
        let padded = self.padded_shape();
        let per_axis: Vec<Vec<u32>> = padded
            .iter()
            .enumerate()
            .map(|(a, &n)| {
                let mut h = vec![0u32; n];
                for &o in &self.axis_offsets[a] {
                    h[o..o + self.patch_shape[a]]
                        .iter_mut()
                        .for_each(|x| *x += 1);
                }
                h
            })
            .collect();
        let mut out = vec![1u32];
        for h in &per_axis {
            out = out
                .iter()
                .flat_map(|&p| h.iter().map(move |&x| p * x))
                .collect();
        }
        out
    }
}

/// Tiling of `volume_shape` by `patch_shape` with stride
/// `max(1, floor(patch · (1 − overlap)))`. Without padding the last offset
/// is clamped to `extent − patch`; with padding each axis is grown to
/// `patch + k · stride` for the smallest sufficient `k`, split evenly
/// before and after.
pub fn plan_patches(
    volume_shape: &[usize],
    patch_shape: &[usize],
    overlap: f64,
    pad_mode: PadMode,
) -> Result<PatchPlan, InferError> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(InferError::BadOverlap(overlap));
    }
    if volume_shape.len() != patch_shape.len()
        || patch_shape.contains(&0)
        || volume_shape.contains(&0)
    {
        return Err(InferError::ShapeMismatch(format!(
            "patch {patch_shape:?} for volume {volume_shape:?}"
        )));
    }
    let mut stride = Vec::new();
    let mut pad = Vec::new();
    let mut axis_offsets = Vec::new();
    for (axis, (&n, &p)) in volume_shape.iter().zip(patch_shape).enumerate() {
        let s = ((p as f64 * (1.0 - overlap)).floor() as usize).max(1);
        let extent = match pad_mode {
            PadMode::None => {
                if p > n {
                    return Err(InferError::PatchExceedsVolume {
                        axis,
                        patch: p,
                        volume: n,
                    });
                }
                n
            }
            _ if n <= p => p,
            _ => p + (n - p).div_ceil(s) * s,
        };
        let total = extent - n;
        pad.push((total / 2, total - total / 2));
        let last = extent - p;
        let mut offs: Vec<usize> = (0..).map(|k| k * s).take_while(|&o| o < last).collect();
        offs.push(last);
        axis_offsets.push(offs);
        stride.push(s);
    }
    Ok(PatchPlan {
        volume_shape: volume_shape.to_vec(),
        patch_shape: patch_shape.to_vec(),
        overlap_fraction: vec![overlap; volume_shape.len()],
        stride,
        pad,
        pad_mode,
        axis_offsets,
    })
}

/// Reflection without edge repetition, folded as often as needed.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Pads the spatial axes of `v` as the plan says.
pub fn pad_volume(v: &AffineVolume, plan: &PatchPlan) -> Vec<f32> {
    let c = v.channels();
    let padded = plan.padded_shape();
    let total: usize = padded.iter().product();
    let mut out = vec![0.0f32; total * c];
    let rank = padded.len();
    let mut idx = vec![0usize; rank];
    let mut src = vec![0usize; rank];
    for w in 0..total {
        let mut rem = w;
        for a in (0..rank).rev() {
            idx[a] = rem % padded[a];
            rem /= padded[a];
        }
        let mut inside = true;
        for a in 0..rank {
            let i = idx[a] as isize - plan.pad[a].0 as isize;
            let n = plan.volume_shape[a];
            if i < 0 || i >= n as isize {
                inside = false;
                src[a] = reflect(i, n);
            } else {
                src[a] = i as usize;
            }
        }
        if inside || plan.pad_mode == PadMode::Reflect {
            let o = v.voxel_offset(&src);
            out[w * c..(w + 1) * c].copy_from_slice(&v.data()[o..o + c]);
        }
    }
    out
}

/// Anything that maps a batch `[n, spatial..., c_in]` to `[n, spatial..., c_out]`.
pub trait PatchPredictor {
    fn input_channels(&self) -> usize;
    fn output_channels(&self) -> usize;
    /// Required spatial input shape, if fixed.
    fn patch_shape(&self) -> Option<Vec<usize>>;
    fn predict(&self, batch: &Tensor) -> Result<Tensor, NetError>;
}

impl PatchPredictor for Model {
    fn input_channels(&self) -> usize {
        Model::input_channels(self)
    }

    fn output_channels(&self) -> usize {
        Model::output_channels(self)
    }

    fn patch_shape(&self) -> Option<Vec<usize>> {
        Some(self.config().spatial_shape().to_vec())
    }

    fn predict(&self, batch: &Tensor) -> Result<Tensor, NetError> {
        self.forward(batch, false)
    }
}

/// Runs every patch of `plan` through `m` and returns the per-voxel mean
/// prediction over the original extent, with `v`'s affine.
pub fn run_patched_inference(
    m: &dyn PatchPredictor,
    v: &AffineVolume,
    plan: &PatchPlan,
    batch_size: usize,
) -> Result<AffineVolume, InferError> {
    if v.spatial_shape() != plan.volume_shape.as_slice() {
        return Err(InferError::ShapeMismatch(format!(
            "volume {:?} but plan for {:?}",
            v.spatial_shape(),
            plan.volume_shape
        )));
    }
    if v.channels() != m.input_channels() {
        return Err(InferError::ShapeMismatch(format!(
            "volume has {} channels, model takes {}",
            v.channels(),
            m.input_channels()
        )));
    }
    if let Some(p) = m.patch_shape() {
        if p != plan.patch_shape {
            return Err(InferError::ShapeMismatch(format!(
                "model input {p:?} but plan patches {:?}",
                plan.patch_shape
            )));
        }
    }
    let cin = v.channels();
    let cout = m.output_channels();
    let padded = plan.padded_shape();
    let rank = padded.len();
    let source = pad_volume(v, plan);
    let total: usize = padded.iter().product();
    let mut sum = vec![0.0f64; total * cout];
    let mut count = vec![0u32; total];
    let patch = &plan.patch_shape;
    let patch_voxels: usize = patch.iter().product();
    let strides: Vec<usize> = (0..rank)
        .map(|a| padded[a + 1..].iter().product())
        .collect();
    // Padded-volume voxel index of each patch voxel, relative to the corner.
    let rel: Vec<usize> = (0..patch_voxels)
        .map(|mut k| {
            let mut off = 0;
            for a in (0..rank).rev() {
                off += (k % patch[a]) * strides[a];
                k /= patch[a];
            }
            off
        })
        .collect();
    let offsets = plan.offsets();
    let batch_size = batch_size.max(1);
    for chunk in offsets.chunks(batch_size) {
        let bases: Vec<usize> = chunk
            .iter()
            .map(|o| o.iter().zip(&strides).map(|(a, b)| a * b).sum())
            .collect();
        let mut data = Vec::with_capacity(chunk.len() * patch_voxels * cin);
        for &b in &bases {
            for &r in &rel {
                let i = (b + r) * cin;
                data.extend_from_slice(&source[i..i + cin]);
            }
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(patch);
        shape.push(cin);
        let out = m.predict(&Tensor::from_vec(shape, data))?;
        let mut expect = vec![chunk.len()];
        expect.extend_from_slice(patch);
        expect.push(cout);
        if out.shape != expect {
            return Err(InferError::ShapeMismatch(format!(
                "model returned {:?}, expected {expect:?}",
                out.shape
            )));
        }
        for (j, &b) in bases.iter().enumerate() {
            let pred = &out.data[j * patch_voxels * cout..(j + 1) * patch_voxels * cout];
            for (k, &r) in rel.iter().enumerate() {
                let w = b + r;
                count[w] += 1;
                for ch in 0..cout {
                    sum[w * cout + ch] += f64::from(pred[k * cout + ch]);
                }
            }
        }
    }
    let original: usize = plan.volume_shape.iter().product();
    let mut data = Vec::with_capacity(original * cout);
    for w in 0..original {
        let mut rem = w;
        let mut p = 0;
        for a in (0..rank).rev() {
            let n = plan.volume_shape[a];
            p += (rem % n + plan.pad[a].0) * strides[a];
            rem /= n;
        }
        let k = f64::from(count[p]);
        data.extend(sum[p * cout..(p + 1) * cout].iter().map(|s| (s / k) as f32));
    }
    let mut shape = plan.volume_shape.clone();
    shape.push(cout);
    let mut out = AffineVolume::new(data, shape, *v.affine())?;
    out.meta = v.meta.clone();
    Ok(out)
}

fn overlap_default() -> f64 {
    0.5
}

fn batch_default() -> usize {
    8
}

/// Plan parameters as written in pipeline JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanParams {
    /// Defaults to the model's input shape.
    #[serde(default)]
    pub patch_shape: Option<Vec<usize>>,
    #[serde(default = "overlap_default")]
    pub overlap: f64,
    #[serde(default)]
    pub pad: PadMode,
    #[serde(default = "batch_default")]
    pub batch_size: usize,
}

impl Default for PlanParams {
    fn default() -> Self {
        Self {
            patch_shape: None,
            overlap: overlap_default(),
            pad: PadMode::default(),
            batch_size: batch_default(),
        }
    }
}

/// Patched inference on one volume followed by `postprocess` applied to the
/// prediction group.
pub fn infer_volume(
    m: &dyn PatchPredictor,
    v: &AffineVolume,
    params: &PlanParams,
    postprocess: &TransformChain,
) -> Result<AffineVolume, InferError> {
    let patch = params
        .patch_shape
        .clone()
        .or_else(|| m.patch_shape())
        .unwrap_or_else(|| v.spatial_shape().to_vec());
    let plan = plan_patches(v.spatial_shape(), &patch, params.overlap, params.pad)?;
    let raw = run_patched_inference(m, v, &plan, params.batch_size)?;
    let mut out = postprocess.apply_volume(&raw, PREDICTION)?;
    out.set_affine(*v.affine())?;
    Ok(out)
}

/// [`infer_volume`] on the `input_data` of one case.
pub fn infer_case(
    m: &dyn PatchPredictor,
    collection: &DataCollection,
    case_id: &str,
    params: &PlanParams,
    postprocess: &TransformChain,
) -> Result<AffineVolume, InferError> {
    let v = collection.case_tensor(case_id, INPUT_DATA)?;
    infer_volume(m, &v, params, postprocess)
}
