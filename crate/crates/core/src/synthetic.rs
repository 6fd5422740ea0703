//! Seeded synthetic data: a 2-D disk segmentation task and a 3-D head
//! phantom with a tumor, standing in for clinical data in tests and demos.

use rand::Rng as _;

use crate::collection::{
    Case, CollectionError, DataCollection, DataGroup, Source, GROUND_TRUTH, INPUT_DATA,
};
use crate::rng::rng_for;
use crate::volume::{diagonal_affine, AffineVolume, IDENTITY_AFFINE};

/// One noisy disk image and its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DiskSample {
    pub image: AffineVolume,
    pub mask: AffineVolume,
}

/// `count` 2-D single-channel images of side `size` with one bright disk
/// each (radius between size/6 and size/3) plus uniform noise of amplitude
/// `noise`.
pub fn disk_task(size: usize, count: usize, noise: f32, seed: u64) -> Vec<DiskSample> {
    (0..count)
        .map(|k| {
            let mut rng = rng_for(seed, &[0xd15c, k as u64]);
            let s = size as f64;
            let r = rng.gen_range(s / 6.0..s / 3.0);
            let cx = rng.gen_range(r..s - r);
            let cy = rng.gen_range(r..s - r);
            let inside = |i: &[usize]| {
                let (dx, dy) = (i[0] as f64 + 0.5 - cx, i[1] as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            };
            let mask = AffineVolume::from_fn(&[size, size], 1, IDENTITY_AFFINE, |i, _| {
                f32::from(u8::from(inside(i)))
            })
            .expect("valid shape");
            let mut noise_rng = rng_for(seed, &[0x0153, k as u64]);
            let image = mask.map(|m| m + noise * noise_rng.gen_range(-1.0f32..1.0));
            DiskSample { image, mask }
        })
        .collect()
}

/// Collection with one case per disk sample (`disk00`, `disk01`, ...).
pub fn disk_collection(
    size: usize,
    count: usize,
    noise: f32,
    seed: u64,
) -> Result<DataCollection, CollectionError> {
    let mut c = DataCollection::new(vec![
        DataGroup::new(INPUT_DATA, &["image"]),
        DataGroup::new(GROUND_TRUTH, &["mask"]),
    ])?;
    for (k, s) in disk_task(size, count, noise, seed).into_iter().enumerate() {
        c.add_case(
            Case::new(format!("disk{k:02}"))
                .with_group(INPUT_DATA, vec![Source::from(s.image)])
                .with_group(GROUND_TRUTH, vec![Source::from(s.mask)]),
        )?;
    }
    Ok(c)
}

/// Head phantom: ellipsoidal scalp/skull shell around a brain ellipsoid with
/// one spherical tumor (edema rim around an enhancing core).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPhantom {
    pub flair: AffineVolume,
    pub t1pre: AffineVolume,
    pub t1post: AffineVolume,
    pub brain: AffineVolume,
    pub whole_tumor: AffineVolume,
    pub enhancing: AffineVolume,
}

#[derive(Clone, Copy)]
enum Tissue {
    Air,
    Skull,
    Brain,
    Edema,
    Core,
}

/// Intensities per tissue for (FLAIR, T1 pre, T1 post).
fn contrast(t: Tissue) -> [f32; 3] {
    match t {
        Tissue::Air => [0.0, 0.0, 0.0],
        Tissue::Skull => [0.35, 0.9, 0.9],
        Tissue::Brain => [0.5, 0.6, 0.6],
        Tissue::Edema => [0.95, 0.45, 0.5],
        Tissue::Core => [0.8, 0.4, 1.0],
    }
}

/// Phantom on a `shape` grid with 1 mm × 1 mm × `slice_mm` voxels.
pub fn head_phantom(shape: [usize; 3], slice_mm: f64, noise: f32, seed: u64) -> HeadPhantom {
    let mut rng = rng_for(seed, &[0x4ead]);
    let c = shape.map(|n| n as f64 / 2.0);
    let head = [c[0] * 0.9, c[1] * 0.92, c[2] * 0.92];
    let brain = [head[0] * 0.78, head[1] * 0.78, head[2] * 0.78];
    let tr = brain[0].min(brain[1]) * rng.gen_range(0.22..0.3);
    let ang = rng.gen_range(0.0..std::f64::consts::TAU);
    let tc = [
        c[0] + brain[0] * 0.35 * ang.cos(),
        c[1] + brain[1] * 0.35 * ang.sin(),
        c[2] + rng.gen_range(-0.2..0.2) * brain[2],
    ];
    // z distances are scaled so the tumor stays spherical in millimeters.
    let zs = slice_mm;
    let tissue = |i: &[usize]| {
        let p = [i[0] as f64 + 0.5, i[1] as f64 + 0.5, i[2] as f64 + 0.5];
        let e = |r: [f64; 3]| (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>();
        let dt = ((p[0] - tc[0]).powi(2) + (p[1] - tc[1]).powi(2) + ((p[2] - tc[2]) * zs).powi(2))
            .sqrt();
        if e(brain) <= 1.0 {
            if dt <= tr * 0.5 {
                Tissue::Core
            } else if dt <= tr {
                Tissue::Edema
            } else {
                Tissue::Brain
            }
        } else if e(head) <= 1.0 {
            Tissue::Skull
        } else {
            Tissue::Air
        }
    };
    let affine = diagonal_affine(&[1.0, 1.0, slice_mm]);
    let labels: Vec<Tissue> = {
        let mut v = Vec::with_capacity(shape.iter().product());
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    v.push(tissue(&[x, y, z]));
                }
            }
        }
        v
    };
    let mask = |f: &dyn Fn(Tissue) -> bool| {
        let data = labels.iter().map(|&t| f32::from(u8::from(f(t)))).collect();
        AffineVolume::new(data, vec![shape[0], shape[1], shape[2], 1], affine).expect("valid shape")
    };
    let modality = |m: usize| {
        let mut r = rng_for(seed, &[0x1a6e, m as u64]);
        let data = labels
            .iter()
            .map(|&t| contrast(t)[m] + noise * r.gen_range(-1.0f32..1.0))
            .collect();
        AffineVolume::new(data, vec![shape[0], shape[1], shape[2], 1], affine).expect("valid shape")
    };
    HeadPhantom {
        flair: modality(0),
        t1pre: modality(1),
        t1post: modality(2),
        brain: mask(&|t| matches!(t, Tissue::Brain | Tissue::Edema | Tissue::Core)),
        whole_tumor: mask(&|t| matches!(t, Tissue::Edema | Tissue::Core)),
        enhancing: mask(&|t| matches!(t, Tissue::Core)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disks_are_deterministic_and_nonempty() {
        let a = disk_task(16, 2, 0.1, 5);
        assert_eq!(a, disk_task(16, 2, 0.1, 5));
        for s in &a {
            let fg = s.mask.data().iter().filter(|&&v| v == 1.0).count();
            assert!(fg > 10 && fg < 200, "{fg}");
        }
        assert_ne!(a[0].mask, a[1].mask);
    }

    #[test]
    fn phantom_nesting() {
        let p = head_phantom([24, 24, 8], 3.0, 0.0, 1);
        let count = |v: &AffineVolume| v.data().iter().filter(|&&x| x == 1.0).count();
        let (b, w, e) = (count(&p.brain), count(&p.whole_tumor), count(&p.enhancing));
        assert!(b > w && w > e && e > 0, "{b} {w} {e}");
        for ((&bb, &ww), &ee) in p
            .brain
            .data()
            .iter()
            .zip(p.whole_tumor.data())
            .zip(p.enhancing.data())
        {
            assert!(bb >= ww && ww >= ee);
        }
        assert_eq!(p.flair.spacing(), &[1.0, 1.0, 3.0]);
    }
}
