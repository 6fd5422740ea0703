//! Round trips of the three on-disk formats on generated fixtures, and
//! corrupted inputs: truncations and byte flips must come back as errors
//! (or, inside padding, as the original value), never as panics.

use std::panic::{catch_unwind, AssertUnwindSafe};

use neuropipe_core::collection::{
    Case, DataCollection, DataGroup, Source, GROUND_TRUTH, INPUT_DATA,
};
use neuropipe_core::tensornet::{build_unet, BlockStyle, Model, UNetConfig};
use neuropipe_core::volio::{decode_nifti, encode_nifti};
use neuropipe_core::{Affine, AffineVolume};
use proptest::prelude::*;
use serde_json::Value;

fn f32_affine(diag: [f32; 3], shear: [f32; 3], origin: [f32; 3]) -> Affine {
    // Upper triangular with a nonzero diagonal: invertible, and every entry
    // survives the float32 sform exactly.
    let f = |v: f32| f64::from(v);
    [
        [f(diag[0]), f(shear[0]), f(shear[1]), f(origin[0])],
        [0.0, f(diag[1]), f(shear[2]), f(origin[1])],
        [0.0, 0.0, f(diag[2]), f(origin[2])],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn arb_affine() -> impl Strategy<Value = Affine> {
    let d = prop_oneof![0.25f32..4.0, -4.0f32..-0.25];
    (
        [d.clone(), d.clone(), d],
        [-1.0f32..1.0, -1.0f32..1.0, -1.0f32..1.0],
        [-200.0f32..200.0, -200.0f32..200.0, -200.0f32..200.0],
    )
        .prop_map(|(d, s, o)| f32_affine(d, s, o))
}

fn arb_volume() -> impl Strategy<Value = AffineVolume> {
    let three_d = (prop::collection::vec(1usize..7, 3), 1usize..4);
    let two_d = (prop::collection::vec(1usize..9, 2), Just(1usize));
    (prop_oneof![three_d, two_d], arb_affine(), any::<u64>()).prop_flat_map(
        |((spatial, c), affine, _)| {
            let n = spatial.iter().product::<usize>() * c;
            prop::collection::vec(
                prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL,
                n,
            )
            .prop_map(move |data| {
                let mut shape = spatial.clone();
                shape.push(c);
                AffineVolume::new(data, shape, affine).unwrap()
            })
        },
    )
}

fn same_volume(a: &AffineVolume, b: &AffineVolume) -> bool {
    a.shape() == b.shape()
        && a.affine() == b.affine()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn arb_collection() -> impl Strategy<Value = DataCollection> {
    prop::collection::vec((arb_volume(), any::<bool>()), 1..4).prop_map(|cases| {
        let mut c = DataCollection::new(vec![
            DataGroup::new(INPUT_DATA, &["a", "b", "c"]),
            DataGroup::new(GROUND_TRUTH, &["mask"]),
        ])
        .unwrap();
        for (k, (v, with_gt)) in cases.into_iter().enumerate() {
            // Pad every case to three input channels by repetition so the
            // group's channel count is fixed.
            let chans = v.split_channels();
            let three: Vec<Source> = (0..3)
                .map(|i| Source::from(chans[i % chans.len()].clone()))
                .collect();
            let mut case = Case::new(format!("case{k}")).with_group(INPUT_DATA, three);
            if with_gt {
                case = case.with_group(
                    GROUND_TRUTH,
                    vec![Source::from(
                        v.map(|x| f32::from(x > 0.0)).channel(0).unwrap(),
                    )],
                );
            }
            c.add_case(case).unwrap();
        }
        c
    })
}

fn same_collection(a: &DataCollection, b: &DataCollection) -> bool {
    a.groups() == b.groups()
        && a.len() == b.len()
        && a.cases().iter().zip(b.cases()).all(|(x, y)| {
            x.id == y.id
                && x.sources.keys().eq(y.sources.keys())
                && x.sources.keys().all(|g| {
                    same_volume(
                        &a.case_tensor(&x.id, g).unwrap(),
                        &b.case_tensor(&y.id, g).unwrap(),
                    )
                })
        })
}

fn arb_model() -> impl Strategy<Value = Model> {
    (
        any::<bool>(),
        1usize..3,
        1usize..3,
        prop_oneof![
            Just(BlockStyle::Plain),
            Just(BlockStyle::Residual),
            Just(BlockStyle::Dense),
            Just(BlockStyle::Se),
            Just(BlockStyle::Inception)
        ],
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(three_d, depth, channels, style, bn, seed)| {
            let side = 1 << depth;
            let shape = if three_d {
                vec![side, side, side, channels]
            } else {
                vec![side * 2, side, channels]
            };
            let mut cfg = UNetConfig::new(shape, depth, 4 << depth);
            cfg.block_style = style;
            cfg.batch_norm = bn;
            let mut m = build_unet(&cfg, seed).unwrap();
            m.step = seed % 1000;
            m
        })
}

/// Bytes not covered by the preamble, the manifest, or any blob listed in
/// the manifest: the zero padding a reader is free to ignore.
fn container_padding(bytes: &[u8]) -> Vec<bool> {
    fn collect(v: &Value, out: &mut Vec<(usize, usize)>) {
        match v {
            Value::Object(m) => {
                if let (Some(o), Some(l)) = (
                    m.get("offset").and_then(Value::as_u64),
                    m.get("length").and_then(Value::as_u64),
                ) {
                    out.push((o as usize, l as usize));
                }
                m.values().for_each(|x| collect(x, out));
            }
            Value::Array(a) => a.iter().for_each(|x| collect(x, out)),
            _ => {}
        }
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let manifest: Value = serde_json::from_slice(&bytes[16..16 + mlen]).unwrap();
    let data_start = (16 + mlen).div_ceil(64) * 64;
    let mut pad = vec![true; bytes.len()];
    pad[..16 + mlen].iter_mut().for_each(|p| *p = false);
    let mut blobs = Vec::new();
    collect(&manifest, &mut blobs);
    for (o, l) in blobs {
        pad[data_start + o..data_start + o + l]
            .iter_mut()
            .for_each(|p| *p = false);
    }
    pad
}

fn no_panic<T>(f: impl FnOnce() -> T) -> T {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| panic!("decoder panicked"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn nifti_roundtrip(v in arb_volume(), gz in any::<bool>()) {
        let bytes = encode_nifti(&v, gz).unwrap();
        let back = decode_nifti(&bytes).unwrap();
        prop_assert!(same_volume(&v, &back), "{:?} vs {:?}", v.shape(), back.shape());
        prop_assert_eq!(back.spacing(), v.spacing());
        prop_assert_eq!(encode_nifti(&back, gz).unwrap(), bytes);
    }

    #[test]
    fn nifti_corruption(v in arb_volume(), gz in any::<bool>(), cut in 0.0f64..1.0, at in 0.0f64..1.0, x in 1u8..=255) {
        let bytes = encode_nifti(&v, gz).unwrap();
        let n = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(no_panic(|| decode_nifti(&bytes[..n])).is_err(), "truncation to {} of {} decoded", n, bytes.len());
        let mut flipped = bytes.clone();
        let i = ((bytes.len() as f64) * at) as usize;
        flipped[i] ^= x;
        // The payload has no checksum, so a flipped voxel may decode; the
        // decoder must simply not panic.
        let _ = no_panic(|| decode_nifti(&flipped));
    }

    #[test]
    fn archive_roundtrip(c in arb_collection()) {
        let bytes = c.encode_archive().unwrap();
        let back = DataCollection::decode_archive(&bytes).unwrap();
        prop_assert!(same_collection(&c, &back));
        prop_assert_eq!(back.encode_archive().unwrap(), bytes);
    }

    #[test]
    fn archive_corruption(c in arb_collection(), cut in 0.0f64..1.0, at in 0.0f64..1.0) {
        let bytes = c.encode_archive().unwrap();
        let n = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(no_panic(|| DataCollection::decode_archive(&bytes[..n])).is_err());
        let i = ((bytes.len() as f64) * at) as usize;
        let mut flipped = bytes.clone();
        flipped[i] ^= 0xff;
        match no_panic(|| DataCollection::decode_archive(&flipped)) {
            Err(_) => {}
            Ok(d) => prop_assert!(container_padding(&bytes)[i] && same_collection(&c, &d), "flip at {} accepted", i),
        }
    }

    #[test]
    fn model_roundtrip(m in arb_model()) {
        let bytes = m.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        prop_assert!(back == m);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn model_corruption(m in arb_model(), cut in 0.0f64..1.0, at in 0.0f64..1.0) {
        let bytes = m.to_bytes();
        let n = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(no_panic(|| Model::from_bytes(&bytes[..n])).is_err());
        let i = ((bytes.len() as f64) * at) as usize;
        let mut flipped = bytes.clone();
        flipped[i] ^= 0xff;
        match no_panic(|| Model::from_bytes(&flipped)) {
            Err(_) => {}
            Ok(d) => prop_assert!(container_padding(&bytes)[i] && d == m, "flip at {} accepted", i),
        }
    }
}
