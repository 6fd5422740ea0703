//! Deterministic single-threaded training loop.
//!
//! Batch `s` is drawn from a per-epoch permutation keyed on the seed, and
//! dropout masks are keyed on `(seed, s)`, so a run resumed from a
//! checkpoint replays exactly what an uninterrupted run would have done.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::collection::{DataCollection, GROUND_TRUTH, INPUT_DATA};
use crate::rng::{derive_seed, rng_for};
use crate::volume::AffineVolume;

use super::exec::{self, ForwardOpts};
use super::loss;
use super::model::{Model, StepRecord};
use super::NetError;

/// Indexed source of (input, target) pairs.
pub trait TrainingSet {
    fn len(&self) -> usize;
    fn pair(&self, index: usize) -> Result<(Arc<AffineVolume>, Arc<AffineVolume>), NetError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TrainingSet for DataCollection {
    fn len(&self) -> usize {
        DataCollection::len(self)
    }

    fn pair(&self, index: usize) -> Result<(Arc<AffineVolume>, Arc<AffineVolume>), NetError> {
        let x = self
            .case_tensor_at(index, INPUT_DATA)
            .map_err(|e| NetError::Data(e.to_string()))?;
        let y = self
            .case_tensor_at(index, GROUND_TRUTH)
            .map_err(|e| NetError::Data(e.to_string()))?;
        Ok((x, y))
    }
}

impl TrainingSet for Vec<(Arc<AffineVolume>, Arc<AffineVolume>)> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn pair(&self, index: usize) -> Result<(Arc<AffineVolume>, Arc<AffineVolume>), NetError> {
        self.get(index)
            .cloned()
            .ok_or_else(|| NetError::Data(format!("sample {index} out of range")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Total step budget; takes precedence over `epochs`.
    pub steps: Option<u64>,
    pub epochs: Option<u64>,
    pub seed: u64,
    pub checkpoint_path: Option<PathBuf>,
    /// Overrides the configuration's initial learning rate.
    pub learning_rate: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1,
            steps: None,
            epochs: Some(1),
            seed: 0,
            checkpoint_path: None,
            learning_rate: None,
        }
    }
}

pub trait TrainCallback {
    fn on_step(&mut self, _record: &StepRecord) -> Result<(), NetError> {
        Ok(())
    }

    fn on_epoch_end(&mut self, _epoch: u64, _mean_loss: f64) -> Result<(), NetError> {
        Ok(())
    }
}

/// Writes one JSON object per step.
pub struct JsonLinesHistory<W: Write>(pub W);

impl<W: Write> TrainCallback for JsonLinesHistory<W> {
    fn on_step(&mut self, record: &StepRecord) -> Result<(), NetError> {
        serde_json::to_writer(&mut self.0, record).map_err(|e| NetError::Io(e.into()))?;
        self.0.write_all(b"\n")?;
        Ok(())
    }
}

/// Where the best-epoch snapshot of `checkpoint` is written.
pub fn best_checkpoint_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    checkpoint.with_file_name(format!("{stem}.best.dnmd"))
}

fn cropped(v: &AffineVolume, to: [usize; 3], rank: usize) -> Result<Vec<f32>, NetError> {
    let s = v.spatial_shape();
    let from = [s[0], s[1], if rank == 3 { s[2] } else { 1 }];
    if from == to {
        return Ok(v.data().to_vec());
    }
    if (0..3).any(|a| from[a] < to[a]) {
        return Err(NetError::ShapeMismatch(format!(
            "target {from:?} smaller than output {to:?}"
        )));
    }
    let c = v.channels();
    let off: Vec<usize> = (0..3).map(|a| (from[a] - to[a]) / 2).collect();
    let mut out = Vec::with_capacity(to.iter().product::<usize>() * c);
    for x in 0..to[0] {
        for y in 0..to[1] {
            for z in 0..to[2] {
                let i = (((x + off[0]) * from[1] + y + off[1]) * from[2] + z + off[2]) * c;
                out.extend_from_slice(&v.data()[i..i + c]);
            }
        }
    }
    Ok(out)
}

struct Batcher<'a> {
    data: &'a dyn TrainingSet,
    seed: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl Batcher<'_> {
    fn index(&mut self, position: u64) -> usize {
        let len = self.data.len() as u64;
        let epoch = position / len;
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..self.data.len()).collect();
            perm.shuffle(&mut rng_for(self.seed, &[0x7e, epoch]));
            self.epoch = Some((epoch, perm));
        }
        self.epoch.as_ref().expect("set above").1[(position % len) as usize]
    }
}

/// Trains until `model.step` reaches the step budget. Returns the records
/// of the steps taken by this call.
pub fn train(
    model: &mut Model,
    data: &dyn TrainingSet,
    cfg: &TrainConfig,
    callbacks: &mut [&mut dyn TrainCallback],
) -> Result<Vec<StepRecord>, NetError> {
    if data.is_empty() {
        return Err(NetError::Data("no training samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(NetError::Data("batch_size must be at least 1".into()));
    }
    let bs = cfg.batch_size as u64;
    let steps_per_epoch = (data.len() as u64).div_ceil(bs);
    let total = match (cfg.steps, cfg.epochs) {
        (Some(s), _) => s,
        (None, Some(e)) => e * steps_per_epoch,
        (None, None) => steps_per_epoch,
    };
    let lr = cfg
        .learning_rate
        .unwrap_or(model.config().initial_learning_rate);
    let rank = model.config().spatial_rank();
    let in_shape = model.config().input_shape.clone();
    let out_sp = model.output_spatial();
    let outputs = model.output_channels();
    let cost = model.config().cost_function;

    let mut batcher = Batcher {
        data,
        seed: cfg.seed,
        epoch: None,
    };
    let start = Instant::now();
    let mut records = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut best = f64::INFINITY;
    while model.step < total {
        let step = model.step;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for j in 0..bs {
            let (xi, yi) = data.pair(batcher.index(step * bs + j))?;
            let mut shape = xi.spatial_shape().to_vec();
            shape.push(xi.channels());
            if shape != in_shape {
                return Err(NetError::ShapeMismatch(format!(
                    "sample input {shape:?}, model expects {in_shape:?}"
                )));
            }
            if yi.channels() != outputs {
                return Err(NetError::ShapeMismatch(format!(
                    "target has {} channels, model outputs {outputs}",
                    yi.channels()
                )));
            }
            x.extend_from_slice(xi.data());
            y.extend(cropped(&yi, out_sp, rank)?);
        }
        let n = bs as usize;
        let opts = ForwardOpts {
            training: true,
            dropout_seed: derive_seed(cfg.seed, &[0xd0, step]),
        };
        let tape = exec::forward(model.graph(), &model.params, &model.state, &x, n, opts)?;
        let (value, grad) = loss::evaluate(cost, tape.output(), &y, n)?;
        if !value.is_finite() {
            return Err(NetError::NonFiniteLoss { step });
        }
        let grads = exec::backward(model.graph(), &model.params, &tape, grad);
        if grads.params.iter().flatten().any(|g| !g.is_finite()) {
            return Err(NetError::NonFiniteLoss { step });
        }
        exec::update_running_stats(&model.graph, &mut model.state, &tape);
        let Model {
            params, optimizer, ..
        } = model;
        optimizer.step(params, &grads.params, lr);
        model.step += 1;
        let rec = StepRecord {
            step,
            loss: value,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        model.history.push(rec.clone());
        for cb in callbacks.iter_mut() {
            cb.on_step(&rec)?;
        }
        records.push(rec);
        epoch_losses.push(value);

        if model.step % steps_per_epoch == 0 {
            let epoch = model.step / steps_per_epoch - 1;
            let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
            epoch_losses.clear();
            if let Some(path) = &cfg.checkpoint_path {
                model.save(path)?;
                if mean < best {
                    model.save(best_checkpoint_path(path))?;
                }
            }
            best = best.min(mean);
            for cb in callbacks.iter_mut() {
                cb.on_epoch_end(epoch, mean)?;
            }
        }
    }
    if let Some(path) = &cfg.checkpoint_path {
        if !records.is_empty() && model.step % steps_per_epoch != 0 {
            model.save(path)?;
        }
    }
    Ok(records)
}
