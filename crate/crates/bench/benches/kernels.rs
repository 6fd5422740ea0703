use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use neuropipe_core::augment::{expand, nodes_from_json_value};
use neuropipe_core::infer::{infer_volume, PatchPredictor, PlanParams};
use neuropipe_core::synthetic::{disk_collection, head_phantom};
use neuropipe_core::tensornet::{build_unet, UNetConfig};
use neuropipe_core::transforms::TransformChain;
use neuropipe_core::volio::{decode_nifti, encode_nifti};
use neuropipe_core::Tensor;

fn conv_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("unet_forward");
    g.sample_size(10);
    for (name, shape, pool) in [
        ("2d_64x64", vec![64, 64, 1], vec![2, 2]),
        ("3d_16x16x16", vec![16, 16, 16, 3], vec![2, 2, 2]),
    ] {
        let mut cfg = UNetConfig::new(shape.clone(), 2, 32);
        cfg.pool_size = pool;
        let m = build_unet(&cfg, 0).unwrap();
        let mut batch_shape = vec![2];
        batch_shape.extend(&shape);
        let n: usize = batch_shape.iter().product();
        let x = Tensor::from_vec(
            batch_shape,
            (0..n).map(|i| (i % 17) as f32 / 17.0).collect(),
        );
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| m.predict(black_box(&x)).unwrap())
        });
    }
    g.finish();
}

fn patched_inference(c: &mut Criterion) {
    let mut cfg = UNetConfig::new(vec![16, 16, 4, 2], 2, 16);
    cfg.pool_size = vec![2, 2, 1];
    let m = build_unet(&cfg, 0).unwrap();
    let p = head_phantom([48, 48, 16], 3.0, 0.05, 0);
    let x = neuropipe_core::AffineVolume::stack_channels(&[&p.flair, &p.t1post]).unwrap();
    let empty = TransformChain::default();
    let mut g = c.benchmark_group("patched_inference_48x48x16");
    g.sample_size(10);
    for overlap in [0.0, 0.5] {
        let plan = PlanParams {
            overlap,
            ..PlanParams::default()
        };
        g.bench_function(BenchmarkId::new("overlap", overlap), |b| {
            b.iter(|| infer_volume(&m, &x, &plan, &empty).unwrap())
        });
    }
    g.finish();
}

fn nifti_decode(c: &mut Criterion) {
    let p = head_phantom([96, 96, 32], 3.0, 0.05, 0);
    let mut g = c.benchmark_group("nifti_decode_96x96x32");
    for gz in [false, true] {
        let bytes = encode_nifti(&p.flair, gz).unwrap();
        g.bench_function(BenchmarkId::new("gzip", gz), |b| {
            b.iter(|| decode_nifti(black_box(&bytes)).unwrap())
        });
    }
    g.finish();
}

fn augmentation(c: &mut Criterion) {
    let data = disk_collection(64, 8, 0.1, 0).unwrap();
    let nodes = nodes_from_json_value(&serde_json_nodes()).unwrap();
    c.bench_function("augment_stream_8x16", |b| {
        b.iter(|| {
            let s = expand(&data, &nodes, 1).unwrap();
            for i in 0..s.len() {
                black_box(s.get(i).unwrap());
            }
        })
    });
}

fn serde_json_nodes() -> serde_json::Value {
    serde_json::json!([
        { "kind": "flip", "multiplicity": 2 },
        { "kind": "rotate90", "multiplicity": 4 },
        { "kind": "patch_extract", "params": { "shape": [32, 32], "label_fraction": 0.5 }, "multiplicity": 2 }
    ])
}

criterion_group!(
    benches,
    conv_forward,
    patched_inference,
    nifti_decode,
    augmentation
);
criterion_main!(benches);
