use neuropipe_core::collection::INPUT_DATA;
use neuropipe_core::infer::{
    infer_case, infer_volume, pad_volume, plan_patches, run_patched_inference, InferError, PadMode,
    PatchPlan, PatchPredictor, PlanParams,
};
use neuropipe_core::rng::rng_for;
use neuropipe_core::tensornet::{build_unet, NetError, UNetConfig};
use neuropipe_core::transforms::{TransformChain, PREDICTION};
use neuropipe_core::volume::{diagonal_affine, IDENTITY_AFFINE};
use neuropipe_core::{AffineVolume, Case, DataCollection, DataGroup, Source, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

/// Returns its input unchanged.
struct Identity {
    channels: usize,
}

impl PatchPredictor for Identity {
    fn input_channels(&self) -> usize {
        self.channels
    }
    fn output_channels(&self) -> usize {
        self.channels
    }
    fn patch_shape(&self) -> Option<Vec<usize>> {
        None
    }
    fn predict(&self, batch: &Tensor) -> Result<Tensor, NetError> {
        Ok(batch.clone())
    }
}

struct Constant(f32);

impl PatchPredictor for Constant {
    fn input_channels(&self) -> usize {
        1
    }
    fn output_channels(&self) -> usize {
        1
    }
    fn patch_shape(&self) -> Option<Vec<usize>> {
        None
    }
    fn predict(&self, batch: &Tensor) -> Result<Tensor, NetError> {
        let mut s = batch.shape.clone();
        *s.last_mut().unwrap() = 1;
        let n = s.iter().product();
        Ok(Tensor::from_vec(s, vec![self.0; n]))
    }
}

/// Output depends on the input value and on the voxel's position inside the
/// patch, so overlapping patches disagree and their average matters.
struct PositionMix;

fn mix(x: f32, flat_in_patch: usize) -> f32 {
    0.5 * x + (flat_in_patch % 7) as f32
}

impl PatchPredictor for PositionMix {
    fn input_channels(&self) -> usize {
        1
    }
    fn output_channels(&self) -> usize {
        1
    }
    fn patch_shape(&self) -> Option<Vec<usize>> {
        None
    }
    fn predict(&self, batch: &Tensor) -> Result<Tensor, NetError> {
        let per: usize = batch.shape[1..].iter().product();
        let data = batch
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| mix(x, i % per))
            .collect();
        Ok(Tensor::from_vec(batch.shape.clone(), data))
    }
}

fn random_volume(shape: &[usize], channels: usize, seed: u64) -> AffineVolume {
    let mut r = rng_for(seed, &[]);
    AffineVolume::from_fn(
        shape,
        channels,
        diagonal_affine(&vec![1.25; shape.len()]),
        |_, _| r.gen_range(-2.0f32..2.0),
    )
    .unwrap()
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Straightforward per-patch accumulation over the padded volume.
fn oracle(v: &AffineVolume, plan: &PatchPlan) -> Vec<f32> {
    let padded = plan.padded_shape();
    let src = pad_volume(v, plan);
    let total: usize = padded.iter().product();
    let mut sum = vec![0.0f64; total];
    let mut hits = vec![0.0f64; total];
    let flat = |idx: &[usize]| idx.iter().zip(&padded).fold(0, |acc, (&i, &n)| acc * n + i);
    for corner in plan.offsets() {
        let pv: usize = plan.patch_shape.iter().product();
        for k in 0..pv {
            let mut rem = k;
            let mut idx = vec![0; padded.len()];
            for a in (0..padded.len()).rev() {
                idx[a] = corner[a] + rem % plan.patch_shape[a];
                rem /= plan.patch_shape[a];
            }
            let w = flat(&idx);
            sum[w] += f64::from(mix(src[w], k));
            hits[w] += 1.0;
        }
    }
    let n: usize = plan.volume_shape.iter().product();
    (0..n)
        .map(|w| {
            let mut rem = w;
            let mut idx = vec![0; padded.len()];
            for a in (0..padded.len()).rev() {
                idx[a] = rem % plan.volume_shape[a] + plan.pad[a].0;
                rem /= plan.volume_shape[a];
            }
            let p = flat(&idx);
            (sum[p] / hits[p]) as f32
        })
        .collect()
}

#[test]
fn identity_reconstruction_large_unaligned() {
    let v = random_volume(&[70, 70, 70], 1, 3);
    for overlap in [0.0, 0.25, 0.5] {
        for pad in [PadMode::Zero, PadMode::Reflect, PadMode::None] {
            let plan = plan_patches(&[70, 70, 70], &[32, 32, 32], overlap, pad).unwrap();
            let out = run_patched_inference(&Identity { channels: 1 }, &v, &plan, 4).unwrap();
            assert!(
                max_diff(out.data(), v.data()) <= 1e-6,
                "overlap {overlap} pad {pad:?}"
            );
            assert_eq!(out.affine(), v.affine());
        }
    }
}

#[test]
fn identity_reconstruction_random() {
    for seed in 0..24u64 {
        let mut r = rng_for(seed, &[0x1d]);
        let rank = if seed % 3 == 0 { 2 } else { 3 };
        let shape: Vec<usize> = (0..rank).map(|_| r.gen_range(3..20)).collect();
        let patch: Vec<usize> = shape.iter().map(|&n| r.gen_range(1..=n + 3)).collect();
        let channels = r.gen_range(1..3);
        let v = random_volume(&shape, channels, seed);
        for overlap in [0.0, 0.25, 0.5] {
            for pad in [PadMode::Zero, PadMode::Reflect] {
                let plan = plan_patches(&shape, &patch, overlap, pad).unwrap();
                let out = run_patched_inference(&Identity { channels }, &v, &plan, 3).unwrap();
                assert!(
                    max_diff(out.data(), v.data()) <= 1e-6,
                    "{shape:?} {patch:?} {overlap}"
                );
            }
        }
    }
}

#[test]
fn constant_model_is_constant() {
    let v = random_volume(&[17, 9, 12], 1, 1);
    for overlap in [0.0, 0.3, 0.6, 0.9] {
        let plan = plan_patches(&[17, 9, 12], &[8, 8, 8], overlap, PadMode::Zero).unwrap();
        let out = run_patched_inference(&Constant(0.7), &v, &plan, 5).unwrap();
        assert!(out.data().iter().all(|&x| (x - 0.7).abs() <= 1e-6));
    }
}

#[test]
fn accumulation_matches_brute_force() {
    for seed in 0..24u64 {
        let mut r = rng_for(seed, &[0xacc]);
        let rank = if seed % 2 == 0 { 3 } else { 2 };
        let shape: Vec<usize> = (0..rank).map(|_| r.gen_range(4..18)).collect();
        let patch: Vec<usize> = shape.iter().map(|&n| r.gen_range(2..=n)).collect();
        let overlap = [0.0, 0.25, 0.5, 0.75][r.gen_range(0..4)];
        let pad = [PadMode::Zero, PadMode::Reflect, PadMode::None][r.gen_range(0..3)];
        let v = random_volume(&shape, 1, seed);
        let plan = plan_patches(&shape, &patch, overlap, pad).unwrap();
        let out = run_patched_inference(&PositionMix, &v, &plan, r.gen_range(1..6)).unwrap();
        let want = oracle(&v, &plan);
        assert!(
            max_diff(out.data(), &want) <= 1e-5,
            "seed {seed}: {shape:?} {patch:?} {overlap} {pad:?}"
        );
    }
}

#[test]
fn overlap_changes_the_average() {
    let v = random_volume(&[16, 16], 1, 4);
    let p0 = plan_patches(&[16, 16], &[8, 8], 0.0, PadMode::Zero).unwrap();
    let p5 = plan_patches(&[16, 16], &[8, 8], 0.5, PadMode::Zero).unwrap();
    let a = run_patched_inference(&PositionMix, &v, &p0, 2).unwrap();
    let b = run_patched_inference(&PositionMix, &v, &p5, 2).unwrap();
    assert!(max_diff(a.data(), b.data()) > 0.1);
    assert!(max_diff(b.data(), &oracle(&v, &p5)) <= 1e-5);
}

#[test]
fn reflect_padding_is_neutral() {
    let v = random_volume(&[5, 11, 6], 2, 9);
    let plan = plan_patches(&[5, 11, 6], &[8, 8, 8], 0.25, PadMode::Reflect).unwrap();
    assert!(plan.pad.iter().any(|&(b, a)| b + a > 0));
    let out = run_patched_inference(&Identity { channels: 2 }, &v, &plan, 8).unwrap();
    assert_eq!(out.data(), v.data());
}

#[test]
fn plan_argument_checks() {
    assert!(matches!(
        plan_patches(&[8], &[4], -0.1, PadMode::Zero),
        Err(InferError::BadOverlap(_))
    ));
    assert!(matches!(
        plan_patches(&[8, 3], &[4, 4], 0.0, PadMode::None),
        Err(InferError::PatchExceedsVolume {
            axis: 1,
            patch: 4,
            volume: 3
        })
    ));
    let v = random_volume(&[8, 8], 2, 0);
    let plan = plan_patches(&[8, 8], &[4, 4], 0.0, PadMode::Zero).unwrap();
    assert!(matches!(
        run_patched_inference(&Identity { channels: 1 }, &v, &plan, 1),
        Err(InferError::ShapeMismatch(_))
    ));
    let other = plan_patches(&[8, 9], &[4, 4], 0.0, PadMode::Zero).unwrap();
    assert!(matches!(
        run_patched_inference(&Identity { channels: 2 }, &v, &other, 1),
        Err(InferError::ShapeMismatch(_))
    ));
}

fn small_model() -> neuropipe_core::tensornet::Model {
    let mut cfg = UNetConfig::new(vec![8, 8, 2], 1, 8);
    cfg.batch_norm = false;
    build_unet(&cfg, 3).unwrap()
}

#[test]
fn unet_single_patch_equals_forward() {
    let m = small_model();
    let v = random_volume(&[8, 8], 2, 5);
    let plan = plan_patches(&[8, 8], &[8, 8], 0.5, PadMode::Zero).unwrap();
    assert_eq!(plan.len(), 1);
    let out = run_patched_inference(&m, &v, &plan, 2).unwrap();
    let direct = m.forward(&Tensor::batch_of(&[&v]).unwrap(), false).unwrap();
    assert_eq!(out.data(), direct.data.as_slice());

    let wrong = plan_patches(&[8, 8], &[4, 4], 0.0, PadMode::Zero).unwrap();
    assert!(matches!(
        run_patched_inference(&m, &v, &wrong, 2),
        Err(InferError::ShapeMismatch(_))
    ));

    // Larger volume through the model's fixed patch.
    let big = random_volume(&[13, 21], 2, 6);
    let out = infer_volume(&m, &big, &PlanParams::default(), &TransformChain::default()).unwrap();
    assert_eq!(out.shape(), &[13, 21, 1]);
    assert!(out.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
}

fn blob_collection() -> DataCollection {
    let mut c = DataCollection::new(vec![DataGroup::new(INPUT_DATA, &["t1"])]).unwrap();
    // A large blob, a 2-voxel speck and a blob with a hole.
    let v = AffineVolume::from_fn(&[12, 12, 6], 1, IDENTITY_AFFINE, |i, _| {
        let (x, y, z) = (i[0], i[1], i[2]);
        let big = (1..6).contains(&x)
            && (1..6).contains(&y)
            && (1..5).contains(&z)
            && !(x == 3 && y == 3 && z == 2);
        let speck = x == 9 && y == 9 && z < 2;
        if big || speck {
            0.9
        } else {
            0.1
        }
    })
    .unwrap();
    c.add_case(Case::new("c1").with_group(INPUT_DATA, vec![Source::from(v)]))
        .unwrap();
    c
}

#[test]
fn case_inference_with_postprocessing() {
    let c = blob_collection();
    let params = PlanParams {
        patch_shape: Some(vec![5, 5, 4]),
        overlap: 0.5,
        pad: PadMode::Zero,
        batch_size: 3,
    };
    let m = Identity { channels: 1 };
    let raw = infer_case(&m, &c, "c1", &params, &TransformChain::default()).unwrap();
    let src = c.case_tensor("c1", INPUT_DATA).unwrap();
    assert!(max_diff(raw.data(), src.data()) <= 1e-6);

    let chain = TransformChain::from_json(
        r#"[{"kind":"binarize","params":{"threshold":0.5}},
            {"kind":"island_removal","params":{"min_voxels":10}},
            {"kind":"hole_fill"}]"#,
        PREDICTION,
    )
    .unwrap();
    let post = infer_case(&m, &c, "c1", &params, &chain).unwrap();
    let mut manual = raw.clone();
    for k in 0..3 {
        let single = TransformChain::new(vec![chain.nodes[k].clone()]);
        manual = single.apply_volume(&manual, PREDICTION).unwrap();
    }
    assert_eq!(post.data(), manual.data());
    assert_eq!(post.get(&[9, 9, 0], 0), 0.0);
    assert_eq!(post.get(&[3, 3, 2], 0), 1.0);
    assert_eq!(post.affine(), src.affine());

    let input_only = TransformChain::from_json(
        r#"[{"kind":"binarize","params":{"threshold":0.5},"applies_to":["input_data"]}]"#,
        PREDICTION,
    )
    .unwrap();
    let same = infer_case(&m, &c, "c1", &params, &input_only).unwrap();
    assert_eq!(same.data(), raw.data());
    assert!(infer_case(&m, &c, "nope", &params, &chain).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn plans_cover_everything(
        shape in prop::collection::vec(1usize..40, 1..4),
        seed in any::<u64>(),
        overlap in 0.0f64..0.95,
        pad_idx in 0usize..3,
    ) {
        let mut r = rng_for(seed, &[]);
        let pad = [PadMode::Zero, PadMode::Reflect, PadMode::None][pad_idx];
        let patch: Vec<usize> = shape
            .iter()
            .map(|&n| if pad == PadMode::None { r.gen_range(1..=n) } else { r.gen_range(1..=n + 10) })
            .collect();
        let plan = plan_patches(&shape, &patch, overlap, pad).unwrap();
        prop_assert_eq!(&plan, &plan_patches(&shape, &patch, overlap, pad).unwrap());
        let padded = plan.padded_shape();
        for (a, offs) in plan.axis_offsets.iter().enumerate() {
            prop_assert!(offs.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(offs[0], 0);
            prop_assert_eq!(*offs.last().unwrap() + patch[a], padded[a]);
            let s = ((patch[a] as f64 * (1.0 - overlap)).floor() as usize).max(1);
            prop_assert_eq!(plan.stride[a], s);
        }
        let corners = plan.offsets();
        prop_assert!(corners.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(corners.len(), plan.len());
        prop_assert!(plan.hit_counts().iter().all(|&h| h >= 1));
    }
}
