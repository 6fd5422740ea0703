//! Pipeline runner behavior through the binary and the library, using
//! small freshly initialized models so nothing depends on the bundled ones.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neuropipe::assets;
use neuropipe::cli::write_phantom;
use neuropipe::pipeline::{bind, CaseInputs, PipelineConfig, PipelineError, RunOptions};
use neuropipe::registry::Registry;
use neuropipe_core::collection::INPUT_DATA;
use neuropipe_core::infer::infer_volume;
use neuropipe_core::tensornet::{build_unet, Model, UNetConfig};
use neuropipe_core::transforms::TransformChain;
use neuropipe_core::volio::read_nifti;
use neuropipe_core::AffineVolume;
use serde_json::json;

struct Fixture {
    dir: tempfile::TempDir,
    model: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_phantom(&dir.path().join("head"), 0).unwrap();
        let mut cfg = UNetConfig::new(vec![16, 16, 4, 2], 2, 8);
        cfg.pool_size = vec![2, 2, 1];
        let model = dir.path().join("brain.dnmd");
        build_unet(&cfg, 5).unwrap().save(&model).unwrap();
        Self { dir, model }
    }

    fn input(&self, name: &str) -> PathBuf {
        self.dir.path().join("head").join(format!("{name}.nii.gz"))
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn neuropipe(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuropipe"))
        .args(args)
        .env("NEUROPIPE_CACHE", cache)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The skullstrip pipeline with its postprocessing removed, so outputs are
/// raw probabilities.
fn raw_skullstrip() -> PipelineConfig {
    let mut c = PipelineConfig::from_json(assets::SKULLSTRIP_PIPELINE).unwrap();
    c.postprocess = json!([]);
    c.outputs = BTreeMap::from([("brain".to_string(), "prob.nii".to_string())]);
    c
}

fn bundled() -> Registry {
    Registry::bundled().unwrap()
}

#[test]
fn missing_input_exits_2_and_names_the_flag() {
    let f = Fixture::new();
    let o = neuropipe(
        &f.out("cache"),
        &[
            "run",
            "--config",
            "skullstrip",
            "--input",
            &format!("flair={}", s(&f.input("flair"))),
            "--output",
            s(&f.out("o")),
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("t1post"), "{err}");
    assert!(!f.out("o").exists());

    // The dedicated subcommand rejects it at argument parsing.
    let o = neuropipe(
        &f.out("cache"),
        &[
            "skullstrip",
            "--flair",
            s(&f.input("flair")),
            "--output",
            s(&f.out("o")),
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--t1post"));
}

#[test]
fn unknown_skip_step_is_a_config_error() {
    let f = Fixture::new();
    let opts = RunOptions {
        skip_preprocess: vec!["normalisation".into()],
        model_overrides: BTreeMap::from([("brain".to_string(), f.model.clone())]),
        ..RunOptions::default()
    };
    match bind(&raw_skullstrip(), &bundled(), &opts) {
        Err(PipelineError::Config(m)) => assert!(
            m.contains("normalisation") && m.contains("normalization"),
            "{m}"
        ),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("accepted"),
    }
}

/// Runs the pipeline and reproduces it by hand with the same chain minus
/// the skipped steps; both must agree exactly.
fn check_skip(f: &Fixture, skip: &[&str]) -> AffineVolume {
    let cfg = raw_skullstrip();
    let opts = RunOptions {
        skip_preprocess: skip.iter().map(|s| s.to_string()).collect(),
        model_overrides: BTreeMap::from([("brain".to_string(), f.model.clone())]),
        ..RunOptions::default()
    };
    let out = f.out(&format!("skip-{}", skip.join("+")));
    let case = CaseInputs {
        id: "c".into(),
        files: BTreeMap::from([
            ("flair".to_string(), f.input("flair")),
            ("t1post".to_string(), f.input("t1post")),
        ]),
        output_dir: out.clone(),
    };
    let report = bind(&cfg, &bundled(), &opts).unwrap().run(&[case]);
    assert_eq!(report.exit_code(), 0, "{:?}", report.cases[0].error);
    let got = read_nifti(out.join("prob.nii")).unwrap();

    let x = AffineVolume::stack_channels(&[
        &read_nifti(f.input("flair")).unwrap(),
        &read_nifti(f.input("t1post")).unwrap(),
    ])
    .unwrap();
    let skip: Vec<String> = opts.skip_preprocess.clone();
    let chain: TransformChain = cfg.preprocess_chain().unwrap().without(&skip);
    let x = chain.apply_volume(&x, INPUT_DATA).unwrap();
    let model = Model::load(&f.model).unwrap();
    let want = infer_volume(&model, &x, &cfg.models[0].plan, &TransformChain::default()).unwrap();
    assert_eq!(got.data(), want.data());
    got
}

#[test]
fn skipping_a_step_removes_exactly_that_step() {
    let f = Fixture::new();
    let full = check_skip(&f, &[]);
    let no_norm = check_skip(&f, &["normalization"]);
    let no_clip = check_skip(&f, &["clip"]);
    assert_ne!(full.data(), no_norm.data());
    assert_ne!(full.data(), no_clip.data());
}

#[test]
fn a_bad_case_does_not_stop_the_others() {
    let f = Fixture::new();
    let csv = f.out("cases.csv");
    std::fs::write(
        &csv,
        format!(
            "case,flair,t1post\ngood,{flair},{t1post}\nbroken,{flair},does/not/exist.nii.gz\nalso_good,{t1post},{flair}\n",
            flair = s(&f.input("flair")),
            t1post = s(&f.input("t1post"))
        ),
    )
    .unwrap();
    let out = f.out("batch");
    let o = neuropipe(
        &f.out("cache"),
        &[
            "run",
            "--config",
            "skullstrip",
            "--cases",
            s(&csv),
            "--output",
            s(&out),
            "--model",
            &format!("brain={}", s(&f.model)),
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("case broken") && err.contains("exist.nii.gz"),
        "{err}"
    );
    assert!(err.contains("1 of 3 cases failed"), "{err}");
    assert!(out.join("good/mask.nii.gz").is_file());
    assert!(out.join("also_good/mask.nii.gz").is_file());
    assert!(!out.join("broken/mask.nii.gz").exists());
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let f = Fixture::new();
    let cfg = raw_skullstrip();
    let cases = |root: &Path| -> Vec<CaseInputs> {
        (0..3)
            .map(|k| CaseInputs {
                id: format!("c{k}"),
                files: BTreeMap::from([
                    ("flair".to_string(), f.input("flair")),
                    ("t1post".to_string(), f.input("t1post")),
                ]),
                output_dir: root.join(format!("c{k}")),
            })
            .collect()
    };
    let mut bytes = Vec::new();
    for threads in [1, 3] {
        let opts = RunOptions {
            threads,
            model_overrides: BTreeMap::from([("brain".to_string(), f.model.clone())]),
            ..RunOptions::default()
        };
        let root = f.out(&format!("t{threads}"));
        let report = bind(&cfg, &bundled(), &opts).unwrap().run(&cases(&root));
        assert_eq!(report.exit_code(), 0);
        assert_eq!(
            report
                .cases
                .iter()
                .map(|c| c.id.as_str())
                .collect::<Vec<_>>(),
            ["c0", "c1", "c2"]
        );
        bytes.push(
            (0..3)
                .map(|k| std::fs::read(root.join(format!("c{k}/prob.nii"))).unwrap())
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(bytes[0], bytes[1]);
    assert!(bytes[0].windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn output_keeps_the_input_geometry() {
    let f = Fixture::new();
    let out = f.out("geom");
    let o = neuropipe(
        &f.out("cache"),
        &[
            "skullstrip",
            "--flair",
            s(&f.input("flair")),
            "--t1post",
            s(&f.input("t1post")),
            "--output",
            s(&out),
            "--model",
            &format!("brain={}", s(&f.model)),
            "--overlap",
            "0.25",
        ],
    );
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let mask = read_nifti(out.join("mask.nii.gz")).unwrap();
    let flair = read_nifti(f.input("flair")).unwrap();
    assert_eq!(mask.shape(), flair.shape());
    assert_eq!(mask.affine(), flair.affine());
    assert!(mask.is_binary());
}

#[test]
fn bad_overlap_and_override_are_rejected() {
    let f = Fixture::new();
    let (flair, t1post, out) = (f.input("flair"), f.input("t1post"), f.out("x"));
    for extra in [["--overlap", "1.0"], ["--model", "nope=x.dnmd"]] {
        let mut args = vec!["skullstrip", "--flair", s(&flair), "--t1post", s(&t1post)];
        args.extend(["--output", s(&out)]);
        args.extend(extra);
        let o = neuropipe(&f.out("cache"), &args);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{extra:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
}
