//! Static layer graphs with shape inference.
//!
//! Activations are 5-D `[batch, x, y, z, channels]`, row-major with channels
//! fastest. 2-D networks run with `z = 1` and kernels of depth 1.

use serde::{Deserialize, Serialize};

use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub c: usize,
}

impl Dims {
    pub fn new(n: usize, spatial: [usize; 3], c: usize) -> Self {
        Self {
            n,
            x: spatial[0],
            y: spatial[1],
            z: spatial[2],
            c,
        }
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }

    pub fn voxels(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn len(&self) -> usize {
        self.n * self.voxels() * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index of voxel `(n, x, y, z)`, channel 0.
    #[inline]
    pub fn at(&self, n: usize, x: usize, y: usize, z: usize) -> usize {
        (((n * self.x + x) * self.y + y) * self.z + z) * self.c
    }

    pub fn with_batch(self, n: usize) -> Self {
        Self { n, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    Softmax,
    Tanh,
    Linear,
}

/// Why a convolution exists, for architecture bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvRole {
    /// One of the two convolutions of an encoder/bottleneck/decoder stage.
    Block,
    /// Extra convolutions introduced by a block style (projections,
    /// parallel inception paths).
    Auxiliary,
    /// Final 1×1 output projection.
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    Conv {
        filters: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
        role: ConvRole,
    },
    MaxPool {
        window: [usize; 3],
        stride: [usize; 3],
        padding: Padding,
    },
    UpsampleNearest {
        factor: [usize; 3],
    },
    /// Crops `size` voxels starting at `offset`.
    Crop {
        offset: [usize; 3],
        size: [usize; 3],
    },
    Concat,
    Add,
    BatchNorm {
        momentum: f64,
        eps: f64,
    },
    Activation {
        function: Activation,
    },
    Dropout {
        rate: f64,
    },
    /// Per-position fully connected layer over channels.
    Dense {
        units: usize,
    },
    GlobalAvgPool,
    /// Multiplies input 0 by a per-(batch, channel) gate from input 1.
    Scale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    /// Indices into the graph's parameter list.
    pub params: Vec<usize>,
    /// Indices into the graph's non-trainable state list.
    pub state: Vec<usize>,
    /// Output dims for batch size 1.
    pub dims: Dims,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform in ±sqrt(6 / fan_in).
    HeUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Nodes in topological order; node 0 is the input, the last node the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub nodes: Vec<LayerNode>,
    pub params: Vec<ParamSpec>,
    pub state: Vec<ParamSpec>,
    pub spatial_rank: usize,
}

fn same_out(n: usize, s: usize) -> usize {
    n.div_ceil(s)
}

/// Leading pad for "same" padding.
pub fn same_pad(n: usize, k: usize, s: usize) -> usize {
    let out = same_out(n, s);
    ((out - 1) * s + k).saturating_sub(n) / 2
}

impl Graph {
    pub fn new(spatial: [usize; 3], channels: usize, spatial_rank: usize) -> Self {
        Self {
            nodes: vec![LayerNode {
                name: "input".into(),
                kind: LayerKind::Input { channels },
                inputs: vec![],
                params: vec![],
                state: vec![],
                dims: Dims::new(1, spatial, channels),
            }],
            params: vec![],
            state: vec![],
            spatial_rank,
        }
    }

    pub fn input_dims(&self) -> Dims {
        self.nodes[0].dims
    }

    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn output_dims(&self) -> Dims {
        self.nodes[self.output()].dims
    }

    pub fn dims(&self, node: usize) -> Dims {
        self.nodes[node].dims
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamSpec::len).sum()
    }

    pub fn convs(&self, role: ConvRole) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, LayerKind::Conv { role: r, .. } if r == role))
            .count()
    }

    /// Appends a node after inferring its shape and registering parameters.
    pub fn push(
        &mut self,
        name: impl Into<String>,
        kind: LayerKind,
        inputs: &[usize],
    ) -> Result<usize, NetError> {
        let name = name.into();
        if inputs.iter().any(|&i| i >= self.nodes.len()) {
            return Err(NetError::Graph(format!(
                "{name}: input refers to a later node"
            )));
        }
        let ins: Vec<Dims> = inputs.iter().map(|&i| self.nodes[i].dims).collect();
        let arity = |k: usize| -> Result<(), NetError> {
            if ins.len() != k {
                return Err(NetError::Graph(format!(
                    "{name}: expected {k} inputs, got {}",
                    ins.len()
                )));
            }
            Ok(())
        };
        let mut params = Vec::new();
        let mut state = Vec::new();
        let dims = match &kind {
            LayerKind::Input { .. } => return Err(NetError::Graph("only one input node".into())),
            LayerKind::Conv {
                filters,
                kernel,
                stride,
                padding,
                ..
            } => {
                arity(1)?;
                let d = ins[0];
                let sp = d.spatial();
                let mut out = [0; 3];
                for a in 0..3 {
                    if stride[a] == 0 || kernel[a] == 0 {
                        return Err(NetError::Graph(format!("{name}: zero kernel or stride")));
                    }
                    if *padding == Padding::Same && kernel[a] % 2 == 0 {
                        return Err(NetError::ShapeMismatch(format!(
                            "{name}: even kernel {} on axis {a} with same padding",
                            kernel[a]
                        )));
                    }
                    out[a] = match padding {
                        Padding::Same => same_out(sp[a], stride[a]),
                        Padding::Valid => {
                            if sp[a] < kernel[a] {
                                return Err(NetError::Graph(format!(
                                    "{name}: kernel {} exceeds extent {} on axis {a}",
                                    kernel[a], sp[a]
                                )));
                            }
                            (sp[a] - kernel[a]) / stride[a] + 1
                        }
                    };
                }
                let fan_in = kernel.iter().product::<usize>() * d.c;
                params.push(self.add_param(
                    format!("{name}.weight"),
                    vec![kernel[0], kernel[1], kernel[2], d.c, *filters],
                    Init::HeUniform { fan_in },
                ));
                params.push(self.add_param(format!("{name}.bias"), vec![*filters], Init::Zeros));
                Dims::new(1, out, *filters)
            }
            LayerKind::MaxPool {
                window,
                stride,
                padding,
            } => {
                arity(1)?;
                let d = ins[0];
                let sp = d.spatial();
                let mut out = [0; 3];
                for a in 0..3 {
                    out[a] = match padding {
                        Padding::Same => same_out(sp[a], stride[a]),
                        Padding::Valid => {
                            if sp[a] < window[a] {
                                return Err(NetError::Graph(format!(
                                    "{name}: window exceeds extent on axis {a}"
                                )));
                            }
                            (sp[a] - window[a]) / stride[a] + 1
                        }
                    };
                }
                Dims::new(1, out, d.c)
            }
            LayerKind::UpsampleNearest { factor } => {
                arity(1)?;
                let d = ins[0];
                Dims::new(1, [d.x * factor[0], d.y * factor[1], d.z * factor[2]], d.c)
            }
            LayerKind::Crop { offset, size } => {
                arity(1)?;
                let d = ins[0];
                let sp = d.spatial();
                for a in 0..3 {
                    if offset[a] + size[a] > sp[a] || size[a] == 0 {
                        return Err(NetError::Graph(format!(
                            "{name}: crop exceeds extent on axis {a}"
                        )));
                    }
                }
                Dims::new(1, *size, d.c)
            }
            LayerKind::Concat => {
                if ins.is_empty() {
                    return Err(NetError::Graph(format!("{name}: concat needs inputs")));
                }
                let sp = ins[0].spatial();
                if ins.iter().any(|d| d.spatial() != sp) {
                    return Err(NetError::Graph(format!(
                        "{name}: concat inputs differ spatially: {ins:?}"
                    )));
                }
                Dims::new(1, sp, ins.iter().map(|d| d.c).sum())
            }
            LayerKind::Add => {
                arity(2)?;
                if ins[0] != ins[1] {
                    return Err(NetError::Graph(format!(
                        "{name}: add inputs differ: {ins:?}"
                    )));
                }
                ins[0]
            }
            LayerKind::BatchNorm { .. } => {
                arity(1)?;
                let c = ins[0].c;
                params.push(self.add_param(format!("{name}.gamma"), vec![c], Init::Ones));
                params.push(self.add_param(format!("{name}.beta"), vec![c], Init::Zeros));
                state.push(self.add_state(format!("{name}.running_mean"), vec![c], Init::Zeros));
                state.push(self.add_state(format!("{name}.running_var"), vec![c], Init::Ones));
                ins[0]
            }
            LayerKind::Activation { .. } | LayerKind::Dropout { .. } => {
                arity(1)?;
                ins[0]
            }
            LayerKind::Dense { units } => {
                arity(1)?;
                let d = ins[0];
                params.push(self.add_param(
                    format!("{name}.weight"),
                    vec![d.c, *units],
                    Init::HeUniform { fan_in: d.c },
                ));
                params.push(self.add_param(format!("{name}.bias"), vec![*units], Init::Zeros));
                Dims { c: *units, ..d }
            }
            LayerKind::GlobalAvgPool => {
                arity(1)?;
                Dims::new(1, [1, 1, 1], ins[0].c)
            }
            LayerKind::Scale => {
                arity(2)?;
                if ins[1].voxels() != 1 || ins[1].c != ins[0].c {
                    return Err(NetError::Graph(format!(
                        "{name}: gate must be [1,1,1,{}], got {:?}",
                        ins[0].c, ins[1]
                    )));
                }
                ins[0]
            }
        };
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(NetError::Graph(format!("duplicate node name {name:?}")));
        }
        self.nodes.push(LayerNode {
            name,
            kind,
            inputs: inputs.to_vec(),
            params,
            state,
            dims,
        });
        Ok(self.nodes.len() - 1)
    }

    fn add_param(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.params.push(ParamSpec { name, shape, init });
        self.params.len() - 1
    }

    fn add_state(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.state.push(ParamSpec { name, shape, init });
        self.state.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_shapes() {
        assert_eq!(same_pad(5, 3, 1), 1);
        assert_eq!(same_pad(5, 5, 1), 2);
        assert_eq!(same_pad(4, 3, 2), 0);
        let mut g = Graph::new([5, 6, 1], 2, 2);
        let c = g
            .push(
                "c",
                LayerKind::Conv {
                    filters: 4,
                    kernel: [3, 3, 1],
                    stride: [1, 1, 1],
                    padding: Padding::Same,
                    role: ConvRole::Block,
                },
                &[0],
            )
            .unwrap();
        assert_eq!(g.dims(c), Dims::new(1, [5, 6, 1], 4));
        let v = g
            .push(
                "v",
                LayerKind::Conv {
                    filters: 1,
                    kernel: [3, 3, 1],
                    stride: [1, 1, 1],
                    padding: Padding::Valid,
                    role: ConvRole::Block,
                },
                &[c],
            )
            .unwrap();
        assert_eq!(g.dims(v).spatial(), [3, 4, 1]);
        assert_eq!(g.params[0].shape, vec![3, 3, 1, 2, 4]);
        assert!(g.push("c", LayerKind::Add, &[c, c]).is_err());
        assert!(g.push("bad", LayerKind::Add, &[c, v]).is_err());
    }
}
