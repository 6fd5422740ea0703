//! Regenerates the bundled assets: the demo phantom, the three toy models
//! (trained on phantoms), the registry manifest and the golden skullstrip
//! hash. Rebuild afterwards so the binary embeds the new files.
//!
//!     cargo run --release -p neuropipe --example make_toy_models [STEPS]

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use neuropipe::assets;
use neuropipe::cli::{write_phantom, PHANTOM_NOISE, PHANTOM_SHAPE, PHANTOM_SLICE_MM};
use neuropipe::pipeline::{bind, CaseInputs, PipelineConfig, RunOptions};
use neuropipe::registry::{sha256_hex, ManifestEntry, Registry, RegistryManifest};
use neuropipe_core::augment::{expand, nodes_from_json_value};
use neuropipe_core::collection::{
    Case, DataCollection, DataGroup, Source, GROUND_TRUTH, INPUT_DATA,
};
use neuropipe_core::infer::infer_volume;
use neuropipe_core::synthetic::{head_phantom, HeadPhantom};
use neuropipe_core::tensornet::{build_unet, train, Model, TrainConfig, UNetConfig};
use neuropipe_core::transforms::TransformChain;
use neuropipe_core::AffineVolume;
use serde_json::json;

const TRAIN_SEEDS: std::ops::Range<u64> = 0..6;

fn toy_config(input_shape: Vec<usize>, pool: Vec<usize>) -> UNetConfig {
    let mut c = UNetConfig::new(input_shape, 2, 32);
    c.pool_size = pool;
    c.initial_learning_rate = 3e-3;
    c.backend = Some("neuropipe".into());
    c
}

fn collection(
    inputs: &[&str],
    cases: Vec<(String, Vec<AffineVolume>, AffineVolume)>,
) -> DataCollection {
    let mut c = DataCollection::new(vec![
        DataGroup::new(INPUT_DATA, inputs),
        DataGroup::new(GROUND_TRUTH, &["label"]),
    ])
    .unwrap();
    for (id, xs, y) in cases {
        c.add_case(
            Case::new(id)
                .with_group(INPUT_DATA, xs.into_iter().map(Source::from).collect())
                .with_group(GROUND_TRUTH, vec![Source::from(y)]),
        )
        .unwrap();
    }
    c
}

fn fit(name: &str, cfg: &UNetConfig, data: &DataCollection, patch: &[usize], steps: u64) -> Model {
    let aug = json!([{
        "kind": "patch_extract",
        "params": { "shape": patch, "label_fraction": 0.6 },
        "multiplicity": 16
    }]);
    let nodes = nodes_from_json_value(&aug).unwrap();
    let stream = expand(data, &nodes, 7).unwrap();
    let mut model = build_unet(cfg, 11).unwrap();
    let t = Instant::now();
    let records = train(
        &mut model,
        &stream,
        &TrainConfig {
            batch_size: 4,
            steps: Some(steps),
            epochs: None,
            seed: 3,
            checkpoint_path: None,
            learning_rate: None,
        },
        &mut [],
    )
    .unwrap();
    let tail: Vec<f64> = records.iter().rev().take(20).map(|r| r.loss).collect();
    eprintln!(
        "{name}: {steps} steps in {:.1} s, mean loss of last 20 steps {:.4}",
        t.elapsed().as_secs_f64(),
        tail.iter().sum::<f64>() / tail.len() as f64
    );
    model
}

fn main() {
    let steps: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("STEPS"))
        .unwrap_or(400);
    let root = assets::source_dir();
    let skull_cfg = PipelineConfig::from_json(assets::SKULLSTRIP_PIPELINE).unwrap();
    let gbm_cfg = PipelineConfig::from_json(assets::SEGMENT_GBM_PIPELINE).unwrap();

    write_phantom(&root.join("phantom"), 0).unwrap();
    let phantoms: Vec<HeadPhantom> = TRAIN_SEEDS
        .map(|s| head_phantom(PHANTOM_SHAPE, PHANTOM_SLICE_MM, PHANTOM_NOISE, s))
        .collect();
    // Both shipped pipelines use the same preprocessing, applied to the
    // stacked input as the pipeline runner does.
    let pre: TransformChain = skull_cfg.preprocess_chain().unwrap();
    let prep = |parts: &[&AffineVolume]| -> AffineVolume {
        let v = AffineVolume::stack_channels(parts).unwrap();
        pre.apply_volume(&v, INPUT_DATA).unwrap()
    };

    let skull_data = collection(
        &["flair", "t1post"],
        phantoms
            .iter()
            .enumerate()
            .map(|(k, p)| {
                (
                    format!("head{k}"),
                    prep(&[&p.flair, &p.t1post]).split_channels(),
                    p.brain.clone(),
                )
            })
            .collect(),
    );
    let skull = fit(
        "skullstrip_toy",
        &toy_config(vec![16, 16, 4, 2], vec![2, 2, 1]),
        &skull_data,
        &[16, 16, 4],
        steps,
    );

    let gbm_in: Vec<AffineVolume> = phantoms
        .iter()
        .map(|p| prep(&[&p.flair, &p.t1pre, &p.t1post]))
        .collect();
    let wt_data = collection(
        &["flair", "t1pre", "t1post"],
        gbm_in
            .iter()
            .zip(&phantoms)
            .enumerate()
            .map(|(k, (x, p))| {
                (
                    format!("head{k}"),
                    x.split_channels(),
                    p.whole_tumor.clone(),
                )
            })
            .collect(),
    );
    let wt = fit(
        "gbm_wholetumor_toy",
        &toy_config(vec![16, 16, 16, 3], vec![2, 2, 2]),
        &wt_data,
        &[16, 16, 16],
        steps,
    );

    // The second stage learns from the first stage's raw probabilities.
    let empty = TransformChain::default();
    let plan = gbm_cfg.models[0].plan.clone();
    let en_data = collection(
        &["flair", "t1pre", "t1post", "wholetumor"],
        gbm_in
            .iter()
            .zip(&phantoms)
            .enumerate()
            .map(|(k, (x, p))| {
                let prob = infer_volume(&wt, x, &plan, &empty).unwrap();
                let mut chans = x.split_channels();
                chans.push(prob);
                (format!("head{k}"), chans, p.enhancing.clone())
            })
            .collect(),
    );
    let en = fit(
        "gbm_enhancing_toy",
        &toy_config(vec![16, 16, 16, 4], vec![2, 2, 2]),
        &en_data,
        &[16, 16, 16],
        steps,
    );

    let models_dir = root.join("models");
    let mut entries = Vec::new();
    for (name, m) in [
        ("skullstrip_toy", &skull),
        ("gbm_wholetumor_toy", &wt),
        ("gbm_enhancing_toy", &en),
    ] {
        let file = format!("{name}.dnmd");
        let bytes = m.to_bytes();
        std::fs::write(models_dir.join(&file), &bytes).unwrap();
        entries.push(ManifestEntry {
            name: name.into(),
            version: "1".into(),
            url: format!("bundled://{file}"),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
            config: Some(serde_json::to_value(m.config()).unwrap()),
        });
    }
    let manifest = RegistryManifest { entries };
    std::fs::write(root.join("registry.json"), manifest.to_json()).unwrap();

    let golden = golden_mask_hash(&skull_cfg, &manifest, &models_dir, &root.join("phantom"));
    let golden_dir = root.parent().unwrap().join("tests").join("golden");
    std::fs::create_dir_all(&golden_dir).unwrap();
    std::fs::write(
        golden_dir.join("skullstrip_mask.sha256"),
        format!("{golden}\n"),
    )
    .unwrap();
    eprintln!("golden skullstrip mask sha256 {golden}");
}

/// Hash of `mask.nii.gz` from the skullstrip pipeline on the bundled
/// phantom with default options.
fn golden_mask_hash(
    cfg: &PipelineConfig,
    manifest: &RegistryManifest,
    models: &Path,
    phantom: &Path,
) -> String {
    let tmp = tempfile::tempdir().unwrap();
    let registry = Registry::new(
        manifest.clone(),
        tmp.path().join("cache"),
        std::sync::Arc::new(neuropipe::registry::DefaultTransport),
    )
    .unwrap();
    let opts = RunOptions {
        threads: 1,
        model_overrides: BTreeMap::from([(
            "brain".to_string(),
            models.join("skullstrip_toy.dnmd"),
        )]),
        ..RunOptions::default()
    };
    let bound = bind(cfg, &registry, &opts).unwrap();
    let case = CaseInputs {
        id: "case".into(),
        files: BTreeMap::from([
            ("flair".to_string(), phantom.join("flair.nii.gz")),
            ("t1post".to_string(), phantom.join("t1post.nii.gz")),
        ]),
        output_dir: tmp.path().join("out"),
    };
    let report = bound.run(&[case]);
    let c = &report.cases[0];
    assert!(c.error.is_none(), "{:?}", c.error);
    sha256_hex(&std::fs::read(&c.outputs[0]).unwrap())
}
