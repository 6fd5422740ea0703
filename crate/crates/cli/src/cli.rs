//! Argument parsing and command dispatch for the `neuropipe` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use neuropipe_core::synthetic::head_phantom;
use neuropipe_core::volio::write_nifti;

use crate::assets;
use crate::pipeline::{bind, CaseInputs, PipelineConfig, PipelineReport, RunOptions};
use crate::registry::Registry;
use crate::training::{run_training, TrainingJob};

#[derive(Debug, Parser)]
#[command(
    name = "neuropipe",
    version,
    about = "Neuroimaging segmentation pipelines"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Brain mask from FLAIR and post-contrast T1.
    Skullstrip {
        #[arg(long, value_name = "NIFTI")]
        flair: PathBuf,
        #[arg(long, value_name = "NIFTI")]
        t1post: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Whole-tumor and enhancing-tumor masks from FLAIR, pre- and
    /// post-contrast T1.
    SegmentGbm {
        #[arg(long, value_name = "NIFTI")]
        flair: PathBuf,
        #[arg(long, value_name = "NIFTI")]
        t1pre: PathBuf,
        #[arg(long, value_name = "NIFTI")]
        t1post: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Any pipeline definition, on one case or a CSV of cases.
    Run {
        /// Pipeline JSON file, or the name of a shipped pipeline.
        #[arg(long, value_name = "PIPELINE")]
        config: String,
        /// Input binding for a single case, repeatable.
        #[arg(long = "input", value_name = "FLAG=NIFTI", conflicts_with = "cases")]
        inputs: Vec<String>,
        /// CSV with a `case` column and one column per input flag. Each
        /// case writes into `<output>/<case>`.
        #[arg(long, value_name = "CSV")]
        cases: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a model from a job description.
    Train {
        #[arg(long, value_name = "JSON")]
        config: PathBuf,
        /// Continue from the job's output file when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Manage the local model cache.
    Model {
        #[command(subcommand)]
        action: ModelAction,
    },
    /// Write the synthetic head phantom used by the demos.
    Phantom {
        #[arg(long, value_name = "DIR")]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
pub enum ModelAction {
    /// Download and verify a model.
    Fetch { name: String },
    /// Remove a cached model.
    Delete { name: String },
    /// Show manifest entries and whether each is cached.
    List,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, value_name = "DIR")]
    pub output: PathBuf,
    /// Case id used in output templates and messages.
    #[arg(long, default_value = "case")]
    pub case_id: String,
    /// Leave out a preprocessing step by name, repeatable.
    #[arg(long = "skip-preprocess", value_name = "STEP")]
    pub skip_preprocess: Vec<String>,
    /// Patch overlap fraction for every model.
    #[arg(long, value_name = "F")]
    pub overlap: Option<f64>,
    /// Cases processed at once.
    #[arg(long, default_value_t = 1, value_name = "N")]
    pub threads: usize,
    #[arg(long, default_value_t = 0, value_name = "S")]
    pub seed: u64,
    /// Print per-stage timings.
    #[arg(long)]
    pub verbose: bool,
    /// Model file for a stage instead of the registry entry, repeatable.
    #[arg(long = "model", value_name = "STAGE=DNMD")]
    pub models: Vec<String>,
}

fn split_binding(s: &str, what: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_string(), PathBuf::from(v))),
        _ => Err(format!("{what} {s:?} is not of the form NAME=PATH")),
    }
}

impl RunArgs {
    fn options(&self) -> Result<RunOptions, String> {
        let model_overrides = self
            .models
            .iter()
            .map(|m| split_binding(m, "--model"))
            .collect::<Result<BTreeMap<_, _>, _>>()?;
        Ok(RunOptions {
            skip_preprocess: self.skip_preprocess.clone(),
            overlap: self.overlap,
            threads: self.threads,
            seed: self.seed,
            verbose: self.verbose,
            model_overrides,
        })
    }
}

fn load_pipeline(config: &str) -> Result<PipelineConfig, String> {
    let r = match assets::pipeline(config) {
        Some(json) if !Path::new(config).exists() => PipelineConfig::from_json(json),
        _ => PipelineConfig::from_file(config),
    };
    r.map_err(|e| e.to_string())
}

/// Reads a case table: header `case,<flag>,...`, one row per case.
fn read_cases(path: &Path, output: &Path) -> Result<Vec<CaseInputs>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| format!("{}: empty case table", path.display()))?
        .split(',')
        .map(str::trim)
        .collect();
    if header.first() != Some(&"case") {
        return Err(format!("{}: first column must be `case`", path.display()));
    }
    lines
        .enumerate()
        .map(|(row, line)| {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != header.len() {
                return Err(format!(
                    "{}: row {} has {} cells, expected {}",
                    path.display(),
                    row + 2,
                    cells.len(),
                    header.len()
                ));
            }
            let files = header[1..]
                .iter()
                .zip(&cells[1..])
                .map(|(h, c)| {
                    let p = PathBuf::from(c);
                    (
                        h.to_string(),
                        if p.is_relative() { base.join(p) } else { p },
                    )
                })
                .collect();
            Ok(CaseInputs {
                id: cells[0].to_string(),
                files,
                output_dir: output.join(cells[0]),
            })
        })
        .collect()
}

fn summarize(report: &PipelineReport) -> i32 {
    for c in &report.cases {
        match &c.error {
            None => {
                for o in &c.outputs {
                    println!("{}: wrote {}", c.id, o.display());
                }
            }
            Some(e) => eprintln!("error: case {}: {e}", c.id),
        }
    }
    let failed = report.failures().count();
    if failed > 0 {
        eprintln!("{failed} of {} cases failed", report.cases.len());
    }
    report.exit_code()
}

fn execute(config: &PipelineConfig, cases: &[CaseInputs], args: &RunArgs) -> i32 {
    let opts = match args.options() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let registry = match Registry::bundled() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match bind(config, &registry, &opts) {
        Ok(bound) => summarize(&bound.run(cases)),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn single_case(args: &RunArgs, files: &[(&str, &PathBuf)]) -> Vec<CaseInputs> {
    vec![CaseInputs {
        id: args.case_id.clone(),
        files: files
            .iter()
            .map(|(k, v)| (k.to_string(), (*v).clone()))
            .collect(),
        output_dir: args.output.clone(),
    }]
}

fn shipped(name: &str) -> PipelineConfig {
    PipelineConfig::from_json(assets::pipeline(name).expect("shipped pipeline"))
        .expect("shipped pipeline is valid")
}

fn model_command(action: &ModelAction) -> i32 {
    let registry = match Registry::bundled() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let r = match action {
        ModelAction::Fetch { name } => registry.fetch(name).map(|p| println!("{}", p.display())),
        ModelAction::Delete { name } => registry.delete(name),
        ModelAction::List => {
            for s in registry.list() {
                let where_ = s
                    .cached
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "-".into());
                println!(
                    "{}\t{}\t{}\t{}",
                    s.entry.name, s.entry.version, s.entry.bytes, where_
                );
            }
            Ok(())
        }
    };
    match r {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, crate::registry::RegistryError::NotInManifest(_)) {
                2
            } else {
                1
            }
        }
    }
}

/// Grid, slice thickness and noise of the demo phantom.
pub const PHANTOM_SHAPE: [usize; 3] = [48, 48, 16];
pub const PHANTOM_SLICE_MM: f64 = 3.0;
pub const PHANTOM_NOISE: f32 = 0.05;

/// Writes the phantom's three modalities and three label maps as
/// `<name>.nii.gz`.
pub fn write_phantom(dir: &Path, seed: u64) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let p = head_phantom(PHANTOM_SHAPE, PHANTOM_SLICE_MM, PHANTOM_NOISE, seed);
    for (name, v) in [
        ("flair", &p.flair),
        ("t1pre", &p.t1pre),
        ("t1post", &p.t1post),
        ("brain", &p.brain),
        ("wholetumor", &p.whole_tumor),
        ("enhancing", &p.enhancing),
    ] {
        let path = dir.join(format!("{name}.nii.gz"));
        write_nifti(v, &path, true).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(())
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Skullstrip { flair, t1post, run } => {
            let cases = single_case(&run, &[("flair", &flair), ("t1post", &t1post)]);
            execute(&shipped("skullstrip"), &cases, &run)
        }
        Command::SegmentGbm {
            flair,
            t1pre,
            t1post,
            run,
        } => {
            let cases = single_case(
                &run,
                &[("flair", &flair), ("t1pre", &t1pre), ("t1post", &t1post)],
            );
            execute(&shipped("segment_gbm"), &cases, &run)
        }
        Command::Run {
            config,
            inputs,
            cases,
            run,
        } => {
            let config = match load_pipeline(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return 2;
                }
            };
            let cases = match cases {
                Some(csv) => read_cases(&csv, &run.output),
                None => inputs
                    .iter()
                    .map(|b| split_binding(b, "--input"))
                    .collect::<Result<BTreeMap<_, _>, _>>()
                    .map(|files| {
                        vec![CaseInputs {
                            id: run.case_id.clone(),
                            files,
                            output_dir: run.output.clone(),
                        }]
                    }),
            };
            let cases = match cases {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return 2;
                }
            };
            for c in &cases {
                for i in &config.inputs {
                    if !c.files.contains_key(&i.flag) {
                        eprintln!(
                            "error: case {}: missing input --input {}=<NIFTI>",
                            c.id, i.flag
                        );
                        return 2;
                    }
                }
            }
            execute(&config, &cases, &run)
        }
        Command::Train { config, resume } => {
            let job = match TrainingJob::from_file(&config) {
                Ok(j) => j,
                Err(e) => {
                    eprintln!("error: {e}");
                    return e.exit_code();
                }
            };
            match run_training(&job, resume) {
                Ok(out) => {
                    let last = out.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
                    println!(
                        "trained {} steps on {} samples, final loss {last:.6}; wrote {}",
                        out.records.len(),
                        out.samples,
                        job.output.display()
                    );
                    0
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
            }
        }
        Command::Model { action } => model_command(&action),
        Command::Phantom { output, seed } => match write_phantom(&output, seed) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                1
            }
        },
    }
}
