//! The voxel grid + affine type every stage of the engine passes around.

use std::collections::BTreeMap;

use thiserror::Error;

/// 4×4 voxel-to-world matrix, row-major.
pub type Affine = [[f64; 4]; 4];

pub const IDENTITY_AFFINE: Affine = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("volume rank must be 3 ([X,Y,C]) or 4 ([X,Y,Z,C]), got shape {0:?}")]
    BadRank(Vec<usize>),
    #[error("every shape entry must be >= 1, got {0:?}")]
    EmptyAxis(Vec<usize>),
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("affine bottom row must be [0, 0, 0, 1], got {0:?}")]
    BadAffine([f64; 4]),
    #[error("affine contains non-finite entries")]
    NonFiniteAffine,
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("channel index {index} out of range for {channels} channels")]
    ChannelOutOfRange { index: usize, channels: usize },
}

/// Dense float32 voxel data, channels-last and row-major: the last axis
/// (channels) varies fastest, the first spatial axis slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineVolume {
    data: Vec<f32>,
    shape: Vec<usize>,
    affine: Affine,
    spacing: Vec<f64>,
    pub meta: BTreeMap<String, String>,
}

fn column_norms(affine: &Affine, axes: usize) -> Vec<f64> {
    (0..axes)
        .map(|j| {
            (0..3)
                .map(|i| affine[i][j] * affine[i][j])
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

impl AffineVolume {
    pub fn new(data: Vec<f32>, shape: Vec<usize>, affine: Affine) -> Result<Self, VolumeError> {
        if shape.len() != 3 && shape.len() != 4 {
            return Err(VolumeError::BadRank(shape));
        }
        if shape.contains(&0) {
            return Err(VolumeError::EmptyAxis(shape));
        }
        let expected = shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| VolumeError::EmptyAxis(shape.clone()))?;
        if data.len() != expected {
            return Err(VolumeError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        if affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(VolumeError::BadAffine(affine[3]));
        }
        if affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(VolumeError::NonFiniteAffine);
        }
        let spacing = column_norms(&affine, shape.len() - 1);
        Ok(Self {
            data,
            shape,
            affine,
            spacing,
            meta: BTreeMap::new(),
        })
    }

    /// Zero-filled volume.
    pub fn zeros(shape: Vec<usize>, affine: Affine) -> Result<Self, VolumeError> {
        let n = shape.iter().product();
        Self::new(vec![0.0; n], shape, affine)
    }

    /// Builds a volume from a spatial shape and a per-voxel function of
    /// `(spatial index, channel)`.
    pub fn from_fn(
        spatial: &[usize],
        channels: usize,
        affine: Affine,
        mut f: impl FnMut(&[usize], usize) -> f32,
    ) -> Result<Self, VolumeError> {
        let mut shape = spatial.to_vec();
        shape.push(channels);
        let mut data = Vec::with_capacity(shape.iter().product());
        let mut idx = vec![0usize; spatial.len()];
        let voxels: usize = spatial.iter().product();
        for _ in 0..voxels {
            for c in 0..channels {
                data.push(f(&idx, c));
            }
            for a in (0..spatial.len()).rev() {
                idx[a] += 1;
                if idx[a] < spatial[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Self::new(data, shape, affine)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.shape[..self.shape.len() - 1]
    }

    pub fn spatial_rank(&self) -> usize {
        self.shape.len() - 1
    }

    pub fn channels(&self) -> usize {
        *self.shape.last().expect("rank >= 3")
    }

    pub fn voxel_count(&self) -> usize {
        self.spatial_shape().iter().product()
    }

    pub fn affine(&self) -> &Affine {
        &self.affine
    }

    /// Per spatial axis, the Euclidean norm of the affine column.
    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn set_affine(&mut self, affine: Affine) -> Result<(), VolumeError> {
        if affine[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(VolumeError::BadAffine(affine[3]));
        }
        if affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(VolumeError::NonFiniteAffine);
        }
        self.spacing = column_norms(&affine, self.spatial_rank());
        self.affine = affine;
        Ok(())
    }

    /// Same affine and metadata, new data of a possibly different shape.
    pub fn with_data(&self, data: Vec<f32>, shape: Vec<usize>) -> Result<Self, VolumeError> {
        let mut out = Self::new(data, shape, self.affine)?;
        out.meta = self.meta.clone();
        Ok(out)
    }

    /// Linear offset of a spatial index (channel 0).
    pub fn voxel_offset(&self, spatial: &[usize]) -> usize {
        let mut off = 0;
        for (a, &i) in spatial.iter().enumerate() {
            off = off * self.shape[a] + i;
        }
        off * self.channels()
    }

    pub fn get(&self, spatial: &[usize], channel: usize) -> f32 {
        self.data[self.voxel_offset(spatial) + channel]
    }

    /// Copies one channel out as a single-channel volume.
    pub fn channel(&self, index: usize) -> Result<Self, VolumeError> {
        let c = self.channels();
        if index >= c {
            return Err(VolumeError::ChannelOutOfRange { index, channels: c });
        }
        let data = self.data.iter().skip(index).step_by(c).copied().collect();
        let mut shape = self.spatial_shape().to_vec();
        shape.push(1);
        self.with_data(data, shape)
    }

    /// All channels as single-channel volumes.
    pub fn split_channels(&self) -> Vec<Self> {
        (0..self.channels())
            .map(|i| self.channel(i).expect("index in range"))
            .collect()
    }

    /// Stacks volumes channel-wise. All parts must share the spatial shape;
    /// the result takes the first part's affine and metadata.
    pub fn stack_channels(parts: &[&AffineVolume]) -> Result<Self, VolumeError> {
        let first = parts.first().ok_or(VolumeError::EmptyAxis(vec![]))?;
        let spatial = first.spatial_shape().to_vec();
        for p in parts {
            if p.spatial_shape() != spatial.as_slice() {
                return Err(VolumeError::ShapeMismatch {
                    expected: spatial,
                    got: p.spatial_shape().to_vec(),
                });
            }
        }
        let total_c: usize = parts.iter().map(|p| p.channels()).sum();
        let voxels = first.voxel_count();
        let mut data = Vec::with_capacity(voxels * total_c);
        for v in 0..voxels {
            for p in parts {
                let c = p.channels();
                data.extend_from_slice(&p.data[v * c..(v + 1) * c]);
            }
        }
        let mut shape = spatial;
        shape.push(total_c);
        first.with_data(data, shape)
    }

    /// Values of one channel, in voxel order.
    pub fn channel_values(&self, index: usize) -> impl Iterator<Item = f32> + '_ {
        self.data
            .iter()
            .skip(index)
            .step_by(self.channels())
            .copied()
    }

    /// Applies `f` elementwise, keeping shape and affine.
    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Diagonal affine with the given per-axis spacing (missing axes get 1).
pub fn diagonal_affine(spacing: &[f64]) -> Affine {
    let mut a = IDENTITY_AFFINE;
    for (i, &s) in spacing.iter().take(3).enumerate() {
        a[i][i] = s;
    }
    a
}

/// Iterates all multi-indices of `shape` in row-major order.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
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
