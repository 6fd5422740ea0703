//! JSON-defined inference pipelines: inputs bound to command-line flags, a
//! preprocessing chain, an ordered list of models (each may take earlier
//! model outputs as extra channels), postprocessing and output files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use neuropipe_core::collection::INPUT_DATA;
use neuropipe_core::infer::{infer_volume, InferError, PlanParams};
use neuropipe_core::tensornet::{unet_graph, ConvRole, Model, NetError, UNetConfig};
use neuropipe_core::transforms::{TransformChain, PREDICTION};
use neuropipe_core::volio::{read_nifti, write_nifti};
use neuropipe_core::AffineVolume;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::registry::{Registry, RegistryError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("model {stage:?}: {source}")]
    Model {
        stage: String,
        #[source]
        source: NetError,
    },
}

impl PipelineError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    /// Command-line flag without dashes.
    pub flag: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelStage {
    pub name: String,
    /// Registry name, or a path to a `.dnmd` file.
    pub model: String,
    /// Reference architecture this stage is defined for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<UNetConfig>,
    #[serde(default)]
    pub plan: PlanParams,
    /// Earlier stages whose raw probability maps are appended as channels.
    #[serde(default)]
    pub feed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub inputs: Vec<InputSpec>,
    #[serde(default = "empty_chain")]
    pub preprocess: Value,
    pub models: Vec<ModelStage>,
    #[serde(default = "empty_chain")]
    pub postprocess: Value,
    /// Stage name → output file, relative to the output directory; `{case}`
    /// expands to the case id.
    pub outputs: BTreeMap<String, String>,
}

fn empty_chain() -> Value {
    Value::Array(vec![])
}

fn cfg_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(e.to_string())
}

impl PipelineConfig {
    pub fn from_json(s: &str) -> Result<Self, PipelineError> {
        let c: Self = serde_json::from_str(s).map_err(cfg_err)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let p = path.as_ref();
        let s = std::fs::read_to_string(p).map_err(|e| cfg_err(format!("{}: {e}", p.display())))?;
        Self::from_json(&s)
    }

    pub fn preprocess_chain(&self) -> Result<TransformChain, PipelineError> {
        TransformChain::from_json_value(&self.preprocess, INPUT_DATA).map_err(cfg_err)
    }

    pub fn postprocess_chain(&self) -> Result<TransformChain, PipelineError> {
        TransformChain::from_json_value(&self.postprocess, PREDICTION).map_err(cfg_err)
    }

    /// Checks names, feed order, output references, chain syntax and, for
    /// stages with a reference architecture, that its input channels equal
    /// the declared inputs plus the fed outputs.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.inputs.is_empty() {
            return Err(cfg_err("no inputs declared"));
        }
        let mut flags = BTreeSet::new();
        for i in &self.inputs {
            if !flags.insert(i.flag.as_str()) {
                return Err(cfg_err(format!("input flag {:?} declared twice", i.flag)));
            }
        }
        if self.models.is_empty() {
            return Err(cfg_err("no models declared"));
        }
        let mut outputs_of: BTreeMap<&str, Option<usize>> = BTreeMap::new();
        for m in &self.models {
            if outputs_of.contains_key(m.name.as_str()) {
                return Err(cfg_err(format!("model stage {:?} declared twice", m.name)));
            }
            let mut fed = 0;
            let mut fed_known = true;
            for f in &m.feed {
                match outputs_of.get(f.as_str()) {
                    Some(Some(c)) => fed += c,
                    Some(None) => fed_known = false,
                    None => {
                        return Err(cfg_err(format!(
                            "stage {:?} is fed by {f:?}, which is not an earlier stage",
                            m.name
                        )))
                    }
                }
            }
            if let Some(a) = &m.architecture {
                a.validate()
                    .map_err(|e| cfg_err(format!("stage {:?}: {e}", m.name)))?;
                let want = self.inputs.len() + fed;
                if fed_known && a.input_channels() != want {
                    return Err(cfg_err(format!(
                        "stage {:?}: architecture takes {} channels but {} inputs and {fed} fed channels give {want}",
                        m.name,
                        a.input_channels(),
                        self.inputs.len()
                    )));
                }
            }
            outputs_of.insert(&m.name, m.architecture.as_ref().map(|a| a.num_outputs));
        }
        for stage in self.outputs.keys() {
            if !outputs_of.contains_key(stage.as_str()) {
                return Err(cfg_err(format!("output for unknown stage {stage:?}")));
            }
        }
        self.preprocess_chain()?;
        self.postprocess_chain()?;
        Ok(())
    }

    /// Trainable block convolutions of each stage's reference architecture.
    pub fn architecture_conv_counts(&self) -> Result<Vec<(String, usize)>, PipelineError> {
        self.models
            .iter()
            .filter_map(|m| m.architecture.as_ref().map(|a| (m, a)))
            .map(|(m, a)| {
                let g = unet_graph(a).map_err(|e| cfg_err(format!("stage {:?}: {e}", m.name)))?;
                Ok((m.name.clone(), g.convs(ConvRole::Block)))
            })
            .collect()
    }
}

/// Options shared by every case of a run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Preprocessing steps to leave out, by name.
    pub skip_preprocess: Vec<String>,
    /// Replaces every stage's overlap fraction.
    pub overlap: Option<f64>,
    /// Cases processed concurrently; 1 keeps runs strictly sequential.
    pub threads: usize,
    /// Reserved for stochastic stages; inference itself draws nothing.
    pub seed: u64,
    pub verbose: bool,
    /// Stage name → model file, bypassing the registry.
    pub model_overrides: BTreeMap<String, PathBuf>,
}

/// One case's input files and output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseInputs {
    pub id: String,
    /// Input flag → NIfTI path.
    pub files: BTreeMap<String, PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub id: String,
    pub outputs: Vec<PathBuf>,
    /// `stage: message` of the first failure.
    pub error: Option<String>,
    pub timings: Vec<(String, Duration)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineReport {
    pub cases: Vec<CaseReport>,
}

impl PipelineReport {
    pub fn failures(&self) -> impl Iterator<Item = &CaseReport> {
        self.cases.iter().filter(|c| c.error.is_some())
    }

    pub fn exit_code(&self) -> i32 {
        i32::from(self.failures().next().is_some())
    }
}

/// Models resolved and checked against the pipeline's channel arithmetic.
pub struct BoundPipeline {
    pub config: PipelineConfig,
    preprocess: TransformChain,
    postprocess: TransformChain,
    models: Vec<Model>,
    opts: RunOptions,
}

fn is_path(model: &str) -> bool {
    model.ends_with(".dnmd") || model.contains('/') || model.contains('\\')
}

/// Loads every stage's model and verifies that channels add up.
pub fn bind(
    config: &PipelineConfig,
    registry: &Registry,
    opts: &RunOptions,
) -> Result<BoundPipeline, PipelineError> {
    config.validate()?;
    let all = config.preprocess_chain()?;
    let known: Vec<&str> = all.names();
    for s in &opts.skip_preprocess {
        if !known.contains(&s.as_str()) {
            return Err(cfg_err(format!(
                "--skip-preprocess {s:?} names no preprocessing step (steps: {})",
                known.join(", ")
            )));
        }
    }
    for stage in opts.model_overrides.keys() {
        if !config.models.iter().any(|m| &m.name == stage) {
            return Err(cfg_err(format!(
                "model override for unknown stage {stage:?}"
            )));
        }
    }
    if let Some(o) = opts.overlap {
        if !(0.0..1.0).contains(&o) {
            return Err(cfg_err(format!("overlap {o} outside [0, 1)")));
        }
    }
    let preprocess = all.without(&opts.skip_preprocess);
    let mut models: Vec<Model> = Vec::new();
    for m in &config.models {
        let path = match opts.model_overrides.get(&m.name) {
            Some(p) => p.clone(),
            None if is_path(&m.model) => PathBuf::from(&m.model),
            None => registry.fetch(&m.model)?,
        };
        let model = Model::load(&path).map_err(|source| PipelineError::Model {
            stage: m.name.clone(),
            source,
        })?;
        let fed: usize = m
            .feed
            .iter()
            .map(|f| {
                let k = config
                    .models
                    .iter()
                    .position(|s| &s.name == f)
                    .expect("validated");
                models[k].output_channels()
            })
            .sum();
        model
            .bind_input_channels(config.inputs.len() + fed)
            .map_err(|e| cfg_err(format!("stage {:?}: {e}", m.name)))?;
        models.push(model);
    }
    Ok(BoundPipeline {
        config: config.clone(),
        preprocess,
        postprocess: config.postprocess_chain()?,
        models,
        opts: opts.clone(),
    })
}

struct Stopwatch<'a> {
    case: &'a str,
    verbose: bool,
    timings: Vec<(String, Duration)>,
}

impl Stopwatch<'_> {
    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
        let t = Instant::now();
        let r = f().map_err(|e| format!("{stage}: {e}"));
        let d = t.elapsed();
        if self.verbose {
            eprintln!("[{}] {stage}: {:.3} s", self.case, d.as_secs_f64());
        }
        self.timings.push((stage.to_string(), d));
        r
    }
}

impl BoundPipeline {
    pub fn models(&self) -> &[Model] {
        &self.models
    }

    /// Runs one case to completion or to its first failing stage.
    pub fn run_case(&self, case: &CaseInputs) -> CaseReport {
        let mut sw = Stopwatch {
            case: &case.id,
            verbose: self.opts.verbose,
            timings: Vec::new(),
        };
        let mut outputs = Vec::new();
        let result = self.run_case_inner(case, &mut sw, &mut outputs);
        CaseReport {
            id: case.id.clone(),
            outputs,
            error: result.err(),
            timings: sw.timings,
        }
    }

    fn run_case_inner(
        &self,
        case: &CaseInputs,
        sw: &mut Stopwatch<'_>,
        outputs: &mut Vec<PathBuf>,
    ) -> Result<(), String> {
        let cfg = &self.config;
        let input = sw.time("load", || {
            let mut parts = Vec::new();
            for i in &cfg.inputs {
                let path = case
                    .files
                    .get(&i.flag)
                    .ok_or_else(|| format!("no file for input --{}", i.flag))?;
                let v = read_nifti(path).map_err(|e| format!("{}: {e}", path.display()))?;
                if v.channels() != 1 {
                    return Err(format!(
                        "{}: expected one channel, found {}",
                        path.display(),
                        v.channels()
                    ));
                }
                parts.push(v);
            }
            AffineVolume::stack_channels(&parts.iter().collect::<Vec<_>>())
                .map_err(|e| e.to_string())
        })?;
        let source_affine = *input.affine();
        let input = sw.time("preprocess", || {
            let mut groups = BTreeMap::from([(INPUT_DATA.to_string(), input)]);
            self.preprocess
                .apply_case(&mut groups)
                .map_err(|e| e.to_string())?;
            Ok(groups.remove(INPUT_DATA).expect("group retained"))
        })?;
        let empty = TransformChain::default();
        let mut raw: Vec<AffineVolume> = Vec::new();
        for (stage, model) in cfg.models.iter().zip(&self.models) {
            let x = if stage.feed.is_empty() {
                input.clone()
            } else {
                let mut parts = vec![&input];
                for f in &stage.feed {
                    let k = cfg
                        .models
                        .iter()
                        .position(|s| &s.name == f)
                        .expect("validated");
                    parts.push(&raw[k]);
                }
                AffineVolume::stack_channels(&parts).map_err(|e| format!("{}: {e}", stage.name))?
            };
            let mut plan = stage.plan.clone();
            if let Some(o) = self.opts.overlap {
                plan.overlap = o;
            }
            let p = sw.time(&format!("model {}", stage.name), || {
                infer_volume(model, &x, &plan, &empty).map_err(|e: InferError| e.to_string())
            })?;
            raw.push(p);
        }
        for (stage, template) in &cfg.outputs {
            let k = cfg
                .models
                .iter()
                .position(|s| &s.name == stage)
                .expect("validated");
            let path = case.output_dir.join(template.replace("{case}", &case.id));
            sw.time(&format!("postprocess {stage}"), || {
                let mut out = self
                    .postprocess
                    .apply_volume(&raw[k], PREDICTION)
                    .map_err(|e| e.to_string())?;
                out.set_affine(source_affine).map_err(|e| e.to_string())?;
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
                }
                let gz = path.extension().is_some_and(|e| e == "gz");
                write_nifti(&out, &path, gz).map_err(|e| format!("{}: {e}", path.display()))
            })?;
            outputs.push(path);
        }
        Ok(())
    }

    /// Runs every case; a failing case is reported and the rest continue.
    pub fn run(&self, cases: &[CaseInputs]) -> PipelineReport {
        let threads = self.opts.threads.max(1);
        let cases_out = if threads == 1 || cases.len() < 2 {
            cases.iter().map(|c| self.run_case(c)).collect()
        } else {
            let mut slots: Vec<Option<CaseReport>> = vec![None; cases.len()];
            let chunk = cases.len().div_ceil(threads);
            std::thread::scope(|s| {
                for (cs, out) in cases.chunks(chunk).zip(slots.chunks_mut(chunk)) {
                    s.spawn(move || {
                        for (c, o) in cs.iter().zip(out.iter_mut()) {
                            *o = Some(self.run_case(c));
                        }
                    });
                }
            });
            slots
                .into_iter()
                .map(|s| s.expect("every case ran"))
                .collect()
        };
        PipelineReport { cases: cases_out }
    }
}

/// Binds `config` and runs `cases`.
pub fn run_pipeline(
    config: &PipelineConfig,
    cases: &[CaseInputs],
    registry: &Registry,
    opts: &RunOptions,
) -> Result<PipelineReport, PipelineError> {
    Ok(bind(config, registry, opts)?.run(cases))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets;

    #[test]
    fn shipped_configs_validate() {
        for name in ["skullstrip", "segment_gbm"] {
            let c = PipelineConfig::from_json(assets::pipeline(name).unwrap()).unwrap();
            assert_eq!(c.name, name);
        }
    }

    #[test]
    fn feed_must_point_backwards() {
        let mut c = PipelineConfig::from_json(assets::SEGMENT_GBM_PIPELINE).unwrap();
        c.models.swap(0, 1);
        assert!(
            matches!(c.validate(), Err(PipelineError::Config(m)) if m.contains("not an earlier stage"))
        );

        let mut c = PipelineConfig::from_json(assets::SEGMENT_GBM_PIPELINE).unwrap();
        c.models[1].architecture.as_mut().unwrap().input_shape[3] = 3;
        assert!(
            matches!(c.validate(), Err(PipelineError::Config(m)) if m.contains("takes 3 channels"))
        );

        let mut c = PipelineConfig::from_json(assets::SKULLSTRIP_PIPELINE).unwrap();
        c.outputs.insert("nope".into(), "x.nii".into());
        assert!(c.validate().is_err());
    }
}
