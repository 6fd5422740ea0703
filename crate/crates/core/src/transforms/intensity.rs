use crate::volume::AffineVolume;

use super::TransformError;

const STD_EPS: f64 = 1e-8;

fn check_mask(v: &AffineVolume, mask: &AffineVolume) -> Result<(), TransformError> {
    if mask.spatial_shape() != v.spatial_shape() {
        return Err(TransformError::MaskShapeMismatch {
            expected: v.spatial_shape().to_vec(),
            got: mask.spatial_shape().to_vec(),
        });
    }
    Ok(())
}

/// Mask is "on" at a voxel when any of its channels is nonzero.
fn mask_bits(mask: &AffineVolume) -> Vec<bool> {
    let c = mask.channels();
    mask.data()
        .chunks_exact(c)
        .map(|px| px.iter().any(|&m| m != 0.0))
        .collect()
}

/// Z-scores intensities over the (masked) region, per channel or globally.
/// Voxels outside the mask become 0; a constant region maps to 0.
pub fn zero_mean_unit_std(
    v: &AffineVolume,
    per_channel: bool,
    mask: Option<&AffineVolume>,
) -> Result<AffineVolume, TransformError> {
    let bits = match mask {
        Some(m) => {
            check_mask(v, m)?;
            let b = mask_bits(m);
            if b.iter().filter(|&&x| x).count() < 2 {
                return Err(TransformError::EmptyMask);
            }
            Some(b)
        }
        None => None,
    };
    let c = v.channels();
    let inside = |voxel: usize| bits.as_ref().map_or(true, |b| b[voxel]);
    let groups: Vec<Vec<usize>> = if per_channel {
        (0..c).map(|ch| vec![ch]).collect()
    } else {
        vec![(0..c).collect()]
    };
    let mut out = v.clone();
    for chans in groups {
        let (mut n, mut sum) = (0usize, 0f64);
        for (voxel, px) in v.data().chunks_exact(c).enumerate() {
            if inside(voxel) {
                for &ch in &chans {
                    sum += px[ch] as f64;
                    n += 1;
                }
            }
        }
        let mean = sum / n as f64;
        let mut ss = 0f64;
        for (voxel, px) in v.data().chunks_exact(c).enumerate() {
            if inside(voxel) {
                for &ch in &chans {
                    let d = px[ch] as f64 - mean;
                    ss += d * d;
                }
            }
        }
        let std = (ss / n as f64).sqrt();
        for (voxel, px) in out.data_mut().chunks_exact_mut(c).enumerate() {
            for &ch in &chans {
                px[ch] = if !inside(voxel) || std < STD_EPS {
                    0.0
                } else {
                    ((px[ch] as f64 - mean) / std) as f32
                };
            }
        }
    }
    Ok(out)
}

/// Inclusive linear-interpolation percentile of sorted values.
pub fn percentile_sorted(sorted: &[f32], p: f64) -> f32 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = rank - lo as f64;
    (sorted[lo] as f64 + t * (sorted[hi] as f64 - sorted[lo] as f64)) as f32
}

/// Clamps each channel to its `[P_lo, P_hi]` percentile range.
pub fn clip_percentiles(
    v: &AffineVolume,
    lo: f64,
    hi: f64,
) -> Result<AffineVolume, TransformError> {
    if !(0.0..100.0).contains(&lo) || !(lo < hi && hi <= 100.0) {
        return Err(TransformError::BadPercentileRange { lo, hi });
    }
    let c = v.channels();
    let mut out = v.clone();
    for ch in 0..c {
        let mut vals: Vec<f32> = v.channel_values(ch).collect();
        vals.sort_by(f32::total_cmp);
        let (pl, ph) = (percentile_sorted(&vals, lo), percentile_sorted(&vals, hi));
        for px in out.data_mut().chunks_exact_mut(c) {
            px[ch] = px[ch].clamp(pl, ph);
        }
    }
    Ok(out)
}

/// Zeroes every channel where the mask is 0.
pub fn apply_mask(v: &AffineVolume, mask: &AffineVolume) -> Result<AffineVolume, TransformError> {
    check_mask(v, mask)?;
    if !mask.is_binary() {
        return Err(TransformError::NonBinaryMask);
    }
    let bits = mask_bits(mask);
    let c = v.channels();
    let mut out = v.clone();
    for (px, &on) in out.data_mut().chunks_exact_mut(c).zip(&bits) {
        if !on {
            px.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok(out)
}

/// 1 where value > threshold, else 0.
pub fn binarize(v: &AffineVolume, threshold: f32) -> Result<AffineVolume, TransformError> {
    if !threshold.is_finite() {
        return Err(TransformError::BadParam(format!(
            "threshold {threshold} is not finite"
        )));
    }
    Ok(v.map(|x| if x > threshold { 1.0 } else { 0.0 }))
}
