//! Connected-component based cleanup of binary masks.

use std::collections::VecDeque;

use crate::volume::AffineVolume;

use super::TransformError;

/// Neighborhood used to decide whether two voxels touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// 2D edge neighbors.
    Four,
    /// 2D edge + corner neighbors.
    Eight,
    /// 3D face neighbors.
    Six,
    /// 3D face + edge + corner neighbors.
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        Some(match n {
            4 => Self::Four,
            8 => Self::Eight,
            6 => Self::Six,
            26 => Self::TwentySix,
            _ => return None,
        })
    }

    pub fn count(self) -> u32 {
        match self {
            Self::Four => 4,
            Self::Eight => 8,
            Self::Six => 6,
            Self::TwentySix => 26,
        }
    }

    pub fn rank(self) -> usize {
        match self {
            Self::Four | Self::Eight => 2,
            Self::Six | Self::TwentySix => 3,
        }
    }

    /// Foreground default: face neighbors.
    pub fn default_for(rank: usize) -> Self {
        if rank == 2 {
            Self::Four
        } else {
            Self::Six
        }
    }

    /// Background connectivity paired with this foreground connectivity.
    pub fn complement(self) -> Self {
        match self {
            Self::Four => Self::Eight,
            Self::Eight => Self::Four,
            Self::Six => Self::TwentySix,
            Self::TwentySix => Self::Six,
        }
    }

    fn offsets(self) -> Vec<[isize; 3]> {
        let full = matches!(self, Self::Eight | Self::TwentySix);
        let zr: &[isize] = if self.rank() == 2 { &[0] } else { &[-1, 0, 1] };
        let mut out = Vec::new();
        for dx in -1..=1isize {
            for dy in -1..=1isize {
                for &dz in zr {
                    let l1 = dx.abs() + dy.abs() + dz.abs();
                    if l1 == 0 || (!full && l1 != 1) {
                        continue;
                    }
                    out.push([dx, dy, dz]);
                }
            }
        }
        out
    }
}

struct Grid {
    nx: usize,
    ny: usize,
    nz: usize,
    three_d: bool,
}

impl Grid {
    fn of(v: &AffineVolume) -> Self {
        let s = v.spatial_shape();
        Self {
            nx: s[0],
            ny: s[1],
            nz: s.get(2).copied().unwrap_or(1),
            three_d: s.len() == 3,
        }
    }
    fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }
    fn coords(&self, i: usize) -> [usize; 3] {
        [
            i / (self.ny * self.nz),
            (i / self.nz) % self.ny,
            i % self.nz,
        ]
    }
    fn on_border(&self, i: usize) -> bool {
        let [x, y, z] = self.coords(i);
        x == 0
            || y == 0
            || x + 1 == self.nx
            || y + 1 == self.ny
            || (self.three_d && (z == 0 || z + 1 == self.nz))
    }
}

/// Labels the connected components of voxels where `mask[i] == target`.
/// Returns per-voxel labels (0 = not `target`) and component sizes by label-1.
fn label(mask: &[bool], target: bool, grid: &Grid, conn: Connectivity) -> (Vec<u32>, Vec<usize>) {
    let offs = conn.offsets();
    let mut labels = vec![0u32; grid.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..grid.len() {
        if mask[start] != target || labels[start] != 0 {
            continue;
        }
        sizes.push(0usize);
        let id = sizes.len() as u32;
        labels[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            sizes[id as usize - 1] += 1;
            let [x, y, z] = grid.coords(i);
            for o in &offs {
                let (nx, ny, nz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                if nx < 0 || ny < 0 || nz < 0 {
                    continue;
                }
                let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                if nx >= grid.nx || ny >= grid.ny || nz >= grid.nz {
                    continue;
                }
                let j = (nx * grid.ny + ny) * grid.nz + nz;
                if mask[j] == target && labels[j] == 0 {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
    }
    (labels, sizes)
}

fn check(v: &AffineVolume, conn: Connectivity) -> Result<(), TransformError> {
    if !v.is_binary() {
        return Err(TransformError::NonBinaryMask);
    }
    let rank = v.spatial_rank();
    if conn.rank() != rank {
        return Err(TransformError::BadConnectivity {
            connectivity: conn.count(),
            rank,
        });
    }
    Ok(())
}

fn per_channel(v: &AffineVolume, mut f: impl FnMut(&mut [bool])) -> AffineVolume {
    let c = v.channels();
    let mut out = v.clone();
    for ch in 0..c {
        let mut bits: Vec<bool> = v.channel_values(ch).map(|x| x != 0.0).collect();
        f(&mut bits);
        for (px, b) in out.data_mut().chunks_exact_mut(c).zip(&bits) {
            px[ch] = if *b { 1.0 } else { 0.0 };
        }
    }
    out
}

/// Deletes foreground components smaller than `min_voxels`.
pub fn island_removal(
    v: &AffineVolume,
    min_voxels: usize,
    conn: Connectivity,
) -> Result<AffineVolume, TransformError> {
    check(v, conn)?;
    if min_voxels == 0 {
        return Err(TransformError::BadParam("min_voxels must be >= 1".into()));
    }
    let grid = Grid::of(v);
    Ok(per_channel(v, |bits| {
        let (labels, sizes) = label(bits, true, &grid, conn);
        for (b, &l) in bits.iter_mut().zip(&labels) {
            if l != 0 && sizes[l as usize - 1] < min_voxels {
                *b = false;
            }
        }
    }))
}

/// Fills background components (under the complement connectivity) that do
/// not reach the volume border.
pub fn hole_fill(v: &AffineVolume, conn: Connectivity) -> Result<AffineVolume, TransformError> {
    check(v, conn)?;
    let grid = Grid::of(v);
    let bg = conn.complement();
    Ok(per_channel(v, |bits| {
        let (labels, sizes) = label(bits, false, &grid, bg);
        let mut open = vec![false; sizes.len()];
        for (i, &l) in labels.iter().enumerate() {
            if l != 0 && grid.on_border(i) {
                open[l as usize - 1] = true;
            }
        }
        for (b, &l) in bits.iter_mut().zip(&labels) {
            if l != 0 && !open[l as usize - 1] {
                *b = true;
            }
        }
    }))
}
