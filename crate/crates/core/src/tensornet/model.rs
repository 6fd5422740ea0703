//! Trainable model: graph, named parameters, training state, and the `DNMD`
//! single-file format.
//!
//! The `DNMD` file uses the shared container layout with magic `DNMD`. The
//! manifest holds the configuration, the step counter, the optimizer kind
//! and timestep, the training history, and one entry per tensor:
//! `{"section": "param"|"state"|"adam_m"|"adam_v", "name", "shape",
//! "offset", "length", "crc32"}`.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::container::{check_layout, BlobRef, BlobWriter, Container};
use crate::rng::rng_for;
use crate::tensor::Tensor;

use super::exec::{self, ForwardOpts};
use super::graph::{ConvRole, Graph, Init};
use super::optim::{Optimizer, OptimizerKind};
use super::unet::{unet_graph, UNetConfig};
use super::NetError;

pub const MODEL_MAGIC: [u8; 4] = *b"DNMD";
pub const MODEL_VERSION: u32 = 1;

/// One optimizer step as recorded in the history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: UNetConfig,
    pub(crate) graph: Graph,
    pub(crate) params: Vec<Vec<f32>>,
    pub(crate) state: Vec<Vec<f32>>,
    pub(crate) optimizer: Optimizer,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub history: Vec<StepRecord>,
}

fn init_param(init: Init, len: usize, seed: u64, index: usize) -> Vec<f32> {
    match init {
        Init::Zeros => vec![0.0; len],
        Init::Ones => vec![1.0; len],
        Init::HeUniform { fan_in } => {
            let limit = (6.0 / fan_in.max(1) as f64).sqrt();
            let mut rng = rng_for(seed, &[0x1417, index as u64]);
            (0..len)
                .map(|_| rng.gen_range(-limit..limit) as f32)
                .collect()
        }
    }
}

/// Builds and initializes the U-Net described by `cfg`.
pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<Model, NetError> {
    let graph = unet_graph(cfg)?;
    Ok(Model::from_graph(cfg.clone(), graph, seed))
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: UNetConfig,
    step: u64,
    optimizer: OptimizerKind,
    #[serde(default)]
    adam_t: u64,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    history: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    section: String,
    name: String,
    shape: Vec<usize>,
    #[serde(flatten)]
    blob: BlobRef,
}

impl Model {
    fn from_graph(config: UNetConfig, graph: Graph, seed: u64) -> Self {
        let params: Vec<Vec<f32>> = graph
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| init_param(p.init, p.len(), seed, i))
            .collect();
        let state = graph
            .state
            .iter()
            .map(|s| init_param(s.init, s.len(), seed, 0))
            .collect();
        let optimizer = Optimizer::new(config.optimizer, &params);
        Self {
            config,
            graph,
            params,
            state,
            optimizer,
            step: 0,
            history: Vec::new(),
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn input_channels(&self) -> usize {
        self.config.input_channels()
    }

    pub fn output_channels(&self) -> usize {
        self.graph.output_dims().c
    }

    /// Input patch extent, padded to three axes with 1.
    pub fn input_spatial(&self) -> [usize; 3] {
        self.graph.input_dims().spatial()
    }

    pub fn output_spatial(&self) -> [usize; 3] {
        self.graph.output_dims().spatial()
    }

    /// Trainable convolutions, excluding auxiliary and output projections.
    pub fn block_convs(&self) -> usize {
        self.graph.convs(ConvRole::Block)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.graph.params.iter().map(|p| p.name.as_str())
    }

    fn param_index(&self, name: &str) -> Option<usize> {
        self.graph.params.iter().position(|p| p.name == name)
    }

    pub fn param(&self, name: &str) -> Option<&[f32]> {
        self.param_index(name).map(|i| self.params[i].as_slice())
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        self.param_index(name)
            .map(move |i| self.params[i].as_mut_slice())
    }

    pub fn params(&self) -> &[Vec<f32>] {
        &self.params
    }

    pub fn state(&self) -> &[Vec<f32>] {
        &self.state
    }

    pub fn state_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let i = self.graph.state.iter().position(|s| s.name == name)?;
        Some(self.state[i].as_mut_slice())
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    /// Verifies that data with `channels` input channels can feed this model.
    pub fn bind_input_channels(&self, channels: usize) -> Result<(), NetError> {
        if channels != self.input_channels() {
            return Err(NetError::ShapeMismatch(format!(
                "model expects {} input channels, pipeline provides {channels}",
                self.input_channels()
            )));
        }
        Ok(())
    }

    /// Checks `[N, spatial.., C]` against the configured input and returns N.
    pub fn check_input(&self, shape: &[usize]) -> Result<usize, NetError> {
        let expect = &self.config.input_shape;
        if shape.len() != expect.len() + 1 || &shape[1..] != expect.as_slice() || shape[0] == 0 {
            return Err(NetError::ShapeMismatch(format!(
                "input shape {shape:?} does not match [batch, {}]",
                expect
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        Ok(shape[0])
    }

    pub fn output_shape(&self, batch: usize) -> Vec<usize> {
        let d = self.graph.output_dims();
        let mut s = vec![batch];
        s.extend_from_slice(&d.spatial()[..self.config.spatial_rank()]);
        s.push(d.c);
        s
    }

    /// Runs the network. With `training` set, BN uses batch statistics and
    /// dropout draws masks from `dropout_seed`; nothing is mutated.
    pub fn forward_with(&self, x: &Tensor, opts: ForwardOpts) -> Result<Tensor, NetError> {
        let n = self.check_input(&x.shape)?;
        let tape = exec::forward(&self.graph, &self.params, &self.state, &x.data, n, opts)?;
        let out = tape.outputs.into_iter().last().expect("graph has nodes");
        Ok(Tensor::from_vec(self.output_shape(n), out))
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor, NetError> {
        self.forward_with(
            x,
            ForwardOpts {
                training,
                dropout_seed: 0,
            },
        )
    }

    /// Parameters widened to f64, for verification passes.
    pub fn params_f64(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|p| p.iter().map(|&v| v as f64).collect())
            .collect()
    }

    pub fn state_f64(&self) -> Vec<Vec<f64>> {
        self.state
            .iter()
            .map(|p| p.iter().map(|&v| v as f64).collect())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BlobWriter::default();
        let mut tensors = Vec::new();
        let mut put =
            |w: &mut BlobWriter, section: &str, name: &str, shape: &[usize], data: &[f32]| {
                tensors.push(TensorEntry {
                    section: section.into(),
                    name: name.into(),
                    shape: shape.to_vec(),
                    blob: w.push_f32(data),
                });
            };
        for (spec, data) in self.graph.params.iter().zip(&self.params) {
            put(&mut w, "param", &spec.name, &spec.shape, data);
        }
        for (spec, data) in self.graph.state.iter().zip(&self.state) {
            put(&mut w, "state", &spec.name, &spec.shape, data);
        }
        let mut adam_t = 0;
        if let Optimizer::Adam { t, m, v } = &self.optimizer {
            adam_t = *t;
            for (spec, data) in self.graph.params.iter().zip(m) {
                put(&mut w, "adam_m", &spec.name, &spec.shape, data);
            }
            for (spec, data) in self.graph.params.iter().zip(v) {
                put(&mut w, "adam_v", &spec.name, &spec.shape, data);
            }
        }
        let manifest = Manifest {
            config: self.config.clone(),
            step: self.step,
            optimizer: self.optimizer.kind(),
            adam_t,
            tensors,
            history: self.history.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        w.finish(MODEL_MAGIC, MODEL_VERSION, &json)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let c = Container::parse(bytes, MODEL_MAGIC, MODEL_VERSION)?;
        let m: Manifest =
            serde_json::from_slice(c.manifest).map_err(|e| NetError::Manifest(e.to_string()))?;
        check_layout(m.tensors.iter().map(|t| (t.name.as_str(), &t.blob)))?;
        let graph = unet_graph(&m.config)?;
        let mut model = Model::from_graph(m.config, graph, 0);
        if m.optimizer != model.config.optimizer {
            model.optimizer = Optimizer::new(m.optimizer, &model.params);
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &m.tensors {
            if !seen.insert((t.section.as_str(), t.name.as_str())) {
                return Err(NetError::Manifest(format!(
                    "duplicate tensor {}/{}",
                    t.section, t.name
                )));
            }
            let data = c.read_f32(&t.name, &t.blob)?;
            let specs = if t.section == "state" {
                &model.graph.state
            } else {
                &model.graph.params
            };
            let i = specs.iter().position(|s| s.name == t.name).ok_or_else(|| {
                NetError::Manifest(format!("unknown tensor {}/{}", t.section, t.name))
            })?;
            if specs[i].shape != t.shape || data.len() != specs[i].len() {
                return Err(NetError::Manifest(format!(
                    "tensor {} has shape {:?}, architecture needs {:?}",
                    t.name, t.shape, specs[i].shape
                )));
            }
            let slot = match (t.section.as_str(), &mut model.optimizer) {
                ("param", _) => &mut model.params[i],
                ("state", _) => &mut model.state[i],
                ("adam_m", Optimizer::Adam { m, .. }) => &mut m[i],
                ("adam_v", Optimizer::Adam { v, .. }) => &mut v[i],
                (s, _) => return Err(NetError::Manifest(format!("unexpected section {s:?}"))),
            };
            *slot = data;
        }
        let params = model.graph.params.len();
        let states = model.graph.state.len();
        let count = |s: &str| m.tensors.iter().filter(|t| t.section == s).count();
        let moments = if matches!(model.optimizer, Optimizer::Adam { .. }) {
            params
        } else {
            0
        };
        if count("param") != params
            || count("state") != states
            || count("adam_m") != moments
            || count("adam_v") != moments
        {
            return Err(NetError::Manifest(
                "tensor list does not cover the architecture".into(),
            ));
        }
        if let Optimizer::Adam { t, .. } = &mut model.optimizer {
            *t = m.adam_t;
        }
        model.step = m.step;
        model.history = m.history;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetError> {
        let path = path.as_ref();
        let tmp = path.with_extension("dnmd.partial");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensornet::unet::BlockStyle;

    fn tiny() -> Model {
        let mut cfg = UNetConfig::new(vec![8, 8, 2], 2, 8);
        cfg.block_style = BlockStyle::Se;
        build_unet(&cfg, 7).unwrap()
    }

    fn input(n: usize) -> Tensor {
        let mut rng = rng_for(3, &[]);
        Tensor::from_vec(
            vec![n, 8, 8, 2],
            (0..n * 128).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn save_load_bit_exact() {
        let m = tiny();
        let x = input(2);
        let y = m.forward(&x, false).unwrap();
        let back = Model::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.forward(&x, false).unwrap().data, y.data);
    }

    #[test]
    fn corrupt_files_are_errors() {
        let bytes = tiny().to_bytes();
        for cut in [0, 3, 10, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(Model::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 2;
        flipped[last] ^= 0x40;
        assert!(matches!(
            Model::from_bytes(&flipped),
            Err(NetError::ChecksumMismatch { .. })
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Model::from_bytes(&magic), Err(NetError::BadMagic)));
        let mut ver = bytes;
        ver[4] = 9;
        assert!(matches!(
            Model::from_bytes(&ver),
            Err(NetError::VersionUnsupported(9))
        ));
    }

    #[test]
    fn forward_contract() {
        let m = tiny();
        assert!(m.forward(&Tensor::zeros(vec![1, 8, 8, 3]), false).is_err());
        let one = input(1);
        let mut two = one.data.clone();
        two.extend_from_slice(&one.data);
        let y = m
            .forward(&Tensor::from_vec(vec![2, 8, 8, 2], two), false)
            .unwrap();
        assert_eq!(y.shape, vec![2, 8, 8, 1]);
        assert_eq!(y.data[..64], y.data[64..]);
        assert!(y.data.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(
            m.forward(&one, false).unwrap(),
            m.forward(&one, false).unwrap()
        );
        assert!(matches!(
            m.bind_input_channels(3),
            Err(NetError::ShapeMismatch(_))
        ));
    }
}
