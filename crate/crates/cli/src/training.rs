//! Training jobs described by a JSON file: where the data comes from, how it
//! is preprocessed and augmented, the architecture, and the schedule.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use neuropipe_core::augment::{expand, nodes_from_json_value, AugmentationNode};
use neuropipe_core::collection::{DataCollection, PatternMap, INPUT_DATA};
use neuropipe_core::synthetic::disk_collection;
use neuropipe_core::tensornet::{
    build_unet, train, JsonLinesHistory, Model, StepRecord, TrainCallback, TrainConfig, UNetConfig,
};
use neuropipe_core::transforms::TransformChain;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("training config: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("training: {0}")]
    Run(String),
}

impl TrainingError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 1,
        }
    }
}

fn cfg_err(e: impl std::fmt::Display) -> TrainingError {
    TrainingError::Config(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> TrainingError {
    TrainingError::Data(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupPatterns {
    pub name: String,
    pub patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CollectionSpec {
    /// Seeded 2-D disk images.
    SyntheticDisks {
        size: usize,
        count: usize,
        #[serde(default)]
        noise: f32,
        #[serde(default)]
        seed: u64,
    },
    Archive {
        path: PathBuf,
    },
    Directory {
        root: PathBuf,
        groups: Vec<GroupPatterns>,
    },
    Csv {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default)]
    pub epochs: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

fn one() -> usize {
    1
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            batch_size: 1,
            steps: None,
            epochs: Some(1),
            seed: 0,
            learning_rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingJob {
    pub collection: CollectionSpec,
    #[serde(default)]
    pub preprocess: Option<Value>,
    #[serde(default)]
    pub augmentation: Option<Value>,
    pub model: UNetConfig,
    #[serde(default)]
    pub train: TrainParams,
    /// Final model file; also the checkpoint written every epoch.
    pub output: PathBuf,
    /// JSON-lines file receiving one record per step.
    #[serde(default)]
    pub history: Option<PathBuf>,
}

impl TrainingJob {
    /// Parses and validates; relative paths are resolved against `base`.
    pub fn from_json(s: &str, base: Option<&Path>) -> Result<Self, TrainingError> {
        let mut job: Self = serde_json::from_str(s).map_err(cfg_err)?;
        if let Some(b) = base {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = b.join(&*p);
                }
            };
            fix(&mut job.output);
            if let Some(h) = job.history.as_mut() {
                fix(h);
            }
            match &mut job.collection {
                CollectionSpec::Archive { path } | CollectionSpec::Csv { path } => fix(path),
                CollectionSpec::Directory { root, .. } => fix(root),
                CollectionSpec::SyntheticDisks { .. } => {}
            }
        }
        job.validate()?;
        Ok(job)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TrainingError> {
        let p = path.as_ref();
        let s = std::fs::read_to_string(p).map_err(|e| cfg_err(format!("{}: {e}", p.display())))?;
        Self::from_json(&s, p.parent())
    }

    /// Everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<(), TrainingError> {
        self.model.validate().map_err(cfg_err)?;
        self.preprocess_chain()?;
        self.augmentation_nodes()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(cfg_err("batch_size must be positive"));
        }
        if t.steps.is_none() && t.epochs.is_none() {
            return Err(cfg_err("one of steps or epochs is required"));
        }
        if let Some(lr) = t.learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(cfg_err(format!("learning_rate {lr} must be positive")));
            }
        }
        if let CollectionSpec::SyntheticDisks { size, count, .. } = self.collection {
            if size == 0 || count == 0 {
                return Err(cfg_err("synthetic_disks needs positive size and count"));
            }
        }
        Ok(())
    }

    pub fn preprocess_chain(&self) -> Result<TransformChain, TrainingError> {
        match &self.preprocess {
            None => Ok(TransformChain::default()),
            Some(v) => TransformChain::from_json_value(v, INPUT_DATA).map_err(cfg_err),
        }
    }

    pub fn augmentation_nodes(&self) -> Result<Vec<AugmentationNode>, TrainingError> {
        match &self.augmentation {
            None => Ok(Vec::new()),
            Some(v) => nodes_from_json_value(v).map_err(cfg_err),
        }
    }

    pub fn load_collection(&self) -> Result<DataCollection, TrainingError> {
        let c = match &self.collection {
            CollectionSpec::SyntheticDisks {
                size,
                count,
                noise,
                seed,
            } => disk_collection(*size, *count, *noise, *seed),
            CollectionSpec::Archive { path } => DataCollection::read_archive(path),
            CollectionSpec::Csv { path } => DataCollection::from_csv(path),
            CollectionSpec::Directory { root, groups } => {
                let patterns: PatternMap = groups
                    .iter()
                    .map(|g| (g.name.clone(), g.patterns.clone()))
                    .collect();
                DataCollection::from_directory(root, &patterns)
            }
        }
        .map_err(data_err)?;
        if c.is_empty() {
            return Err(TrainingError::Data("collection has no cases".into()));
        }
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            steps: self.train.steps,
            epochs: self.train.epochs,
            seed: self.train.seed,
            checkpoint_path: Some(self.output.clone()),
            learning_rate: self.train.learning_rate,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub model: Model,
    pub records: Vec<StepRecord>,
    pub samples: usize,
}

/// Runs the job. With `resume`, training continues from the model at
/// `output` when that file exists.
pub fn run_training(job: &TrainingJob, resume: bool) -> Result<TrainingOutcome, TrainingError> {
    job.validate()?;
    let raw = job.load_collection()?;
    let chain = job.preprocess_chain()?;
    let data = if chain.is_empty() {
        raw
    } else {
        chain.apply_collection(&raw).map_err(data_err)?
    };
    let nodes = job.augmentation_nodes()?;
    let stream = expand(&data, &nodes, job.train.seed).map_err(data_err)?;

    let mut model = if resume && job.output.is_file() {
        let m = Model::load(&job.output).map_err(|e| TrainingError::Run(e.to_string()))?;
        if m.config() != &job.model {
            return Err(cfg_err(format!(
                "{} was trained with a different model configuration",
                job.output.display()
            )));
        }
        log::info!("resuming from {} at step {}", job.output.display(), m.step);
        m
    } else {
        build_unet(&job.model, job.train.seed).map_err(cfg_err)?
    };
    if let Some(dir) = job.output.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| TrainingError::Run(format!("{}: {e}", dir.display())))?;
    }

    let mut history = match &job.history {
        Some(p) => {
            let f = File::options()
                .create(true)
                .append(resume)
                .write(true)
                .truncate(!resume)
                .open(p)
                .map_err(|e| TrainingError::Run(format!("{}: {e}", p.display())))?;
            Some(JsonLinesHistory(BufWriter::new(f)))
        }
        None => None,
    };
    let mut callbacks: Vec<&mut dyn TrainCallback> = Vec::new();
    if let Some(h) = history.as_mut() {
        callbacks.push(h);
    }
    let records = train(&mut model, &stream, &job.train_config(), &mut callbacks)
        .map_err(|e| TrainingError::Run(e.to_string()))?;
    drop(callbacks);
    if let Some(JsonLinesHistory(mut w)) = history {
        use std::io::Write;
        w.flush().map_err(|e| TrainingError::Run(e.to_string()))?;
    }
    model
        .save(&job.output)
        .map_err(|e| TrainingError::Run(e.to_string()))?;
    Ok(TrainingOutcome {
        model,
        records,
        samples: stream.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strict_parsing() {
        let ok = r#"{"collection": {"kind": "synthetic_disks", "size": 16, "count": 2},
                     "model": {"input_shape": [16, 16, 1], "depth": 1, "max_filter": 8,
                               "pool_size": [2, 2], "kernel_size": [3, 3]},
                     "train": {"steps": 2}, "output": "m.dnmd"}"#;
        let j = TrainingJob::from_json(ok, Some(Path::new("/tmp/x"))).unwrap();
        assert_eq!(j.output, PathBuf::from("/tmp/x/m.dnmd"));
        let bad = ok.replace("\"steps\"", "\"stepz\"");
        assert!(matches!(
            TrainingJob::from_json(&bad, None),
            Err(TrainingError::Config(_))
        ));
    }
}
