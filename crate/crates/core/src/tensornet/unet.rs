//! U-Net configuration surface and graph builder.

use serde::{Deserialize, Serialize};

use super::graph::{Activation, ConvRole, Graph, LayerKind, Padding};
use super::loss::CostFunction;
use super::optim::OptimizerKind;
use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    #[default]
    ConvBnAct,
    BnActConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStyle {
    #[default]
    Plain,
    Residual,
    Dense,
    Se,
    Inception,
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-3;
/// Channel reduction of the squeeze-and-excitation bottleneck.
pub const SE_REDUCTION: usize = 4;

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn relu() -> Activation {
    Activation::Relu
}
fn same() -> Padding {
    Padding::Same
}
fn soft_dice() -> CostFunction {
    CostFunction::SoftDice
}
fn lr_default() -> f64 {
    1e-4
}
fn adam() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Spatial extents followed by the channel count.
    pub input_shape: Vec<usize>,
    pub depth: usize,
    pub max_filter: usize,
    #[serde(default = "one")]
    pub downsize_filters_factor: usize,
    pub pool_size: Vec<usize>,
    pub kernel_size: Vec<usize>,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "yes")]
    pub batch_norm: bool,
    #[serde(default = "relu")]
    pub activation: Activation,
    #[serde(default = "same")]
    pub padding: Padding,
    #[serde(default = "one")]
    pub num_outputs: usize,
    #[serde(default = "soft_dice")]
    pub cost_function: CostFunction,
    #[serde(default = "lr_default")]
    pub initial_learning_rate: f64,
    #[serde(default = "adam")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub block_order: BlockOrder,
    #[serde(default)]
    pub block_style: BlockStyle,
    /// Backend the configuration was written for. Informational: this crate
    /// ships a single engine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

fn bad(field: &str, message: String) -> NetError {
    NetError::Config {
        field: field.to_string(),
        message,
    }
}

impl UNetConfig {
    /// Minimal configuration with defaults for everything optional.
    pub fn new(input_shape: Vec<usize>, depth: usize, max_filter: usize) -> Self {
        let rank = input_shape.len().saturating_sub(1);
        Self {
            input_shape,
            depth,
            max_filter,
            downsize_filters_factor: 1,
            pool_size: vec![2; rank],
            kernel_size: vec![3; rank],
            dropout: 0.0,
            batch_norm: true,
            activation: Activation::Relu,
            padding: Padding::Same,
            num_outputs: 1,
            cost_function: CostFunction::SoftDice,
            initial_learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            block_order: BlockOrder::ConvBnAct,
            block_style: BlockStyle::Plain,
            backend: None,
        }
    }

    pub fn spatial_rank(&self) -> usize {
        self.input_shape.len().saturating_sub(1)
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.input_shape[..self.spatial_rank()]
    }

    pub fn input_channels(&self) -> usize {
        *self.input_shape.last().unwrap_or(&0)
    }

    /// Filters of stage `level` (0 = top, `depth` = bottleneck).
    pub fn filters_at(&self, level: usize) -> usize {
        let div = (1usize << (self.depth - level)) * self.downsize_filters_factor;
        (self.max_filter / div).max(1)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let rank = self.spatial_rank();
        if !(rank == 2 || rank == 3) {
            return Err(bad(
                "input_shape",
                format!(
                    "expected 2 or 3 spatial axes plus channels, got {:?}",
                    self.input_shape
                ),
            ));
        }
        if self.input_shape.contains(&0) {
            return Err(bad(
                "input_shape",
                format!("zero extent in {:?}", self.input_shape),
            ));
        }
        if self.depth == 0 {
            return Err(bad("depth", "must be at least 1".into()));
        }
        if self.depth > 16 {
            return Err(bad("depth", format!("{} is unreasonably deep", self.depth)));
        }
        for (field, v) in [
            ("pool_size", &self.pool_size),
            ("kernel_size", &self.kernel_size),
        ] {
            if v.len() != rank {
                return Err(bad(field, format!("needs {rank} entries, got {v:?}")));
            }
            if v.contains(&0) {
                return Err(bad(field, format!("zero entry in {v:?}")));
            }
        }
        if self.padding == Padding::Same {
            if let Some(a) = self.kernel_size.iter().position(|k| k % 2 == 0) {
                return Err(bad(
                    "kernel_size",
                    format!(
                        "axis {a}: even kernel {} with same padding",
                        self.kernel_size[a]
                    ),
                ));
            }
            for a in 0..rank {
                let f = self.pool_size[a].pow(self.depth as u32);
                if self.input_shape[a] % f != 0 {
                    return Err(bad(
                        "input_shape",
                        format!(
                            "axis {a}: extent {} not divisible by pool_size[{a}]^depth = {f}",
                            self.input_shape[a]
                        ),
                    ));
                }
            }
        }
        if self.downsize_filters_factor == 0 {
            return Err(bad("downsize_filters_factor", "must be at least 1".into()));
        }
        if self.max_filter / self.downsize_filters_factor < (1 << self.depth) {
            return Err(bad(
                "max_filter",
                format!(
                    "max_filter / downsize_filters_factor = {} leaves no filters at the top stage (need >= 2^depth = {})",
                    self.max_filter / self.downsize_filters_factor,
                    1usize << self.depth
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(bad("dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        if self.num_outputs == 0 {
            return Err(bad("num_outputs", "must be at least 1".into()));
        }
        if !(self.initial_learning_rate.is_finite() && self.initial_learning_rate >= 0.0) {
            return Err(bad(
                "initial_learning_rate",
                format!("{}", self.initial_learning_rate),
            ));
        }
        if matches!(self.activation, Activation::Softmax | Activation::Sigmoid) {
            return Err(bad(
                "activation",
                "hidden activation must not be an output head".into(),
            ));
        }
        Ok(())
    }

    fn axes3(&self, v: &[usize], fill: usize) -> [usize; 3] {
        [v[0], v[1], if v.len() > 2 { v[2] } else { fill }]
    }
}

struct Builder<'a> {
    cfg: &'a UNetConfig,
    g: Graph,
    kernel: [usize; 3],
    counter: usize,
}

impl Builder<'_> {
    fn name(&mut self, stem: &str, kind: &str) -> String {
        self.counter += 1;
        format!("{stem}.{kind}{}", self.counter)
    }

    fn push(
        &mut self,
        stem: &str,
        kind: &str,
        layer: LayerKind,
        inputs: &[usize],
    ) -> Result<usize, NetError> {
        let n = self.name(stem, kind);
        self.g.push(n, layer, inputs)
    }

    fn conv(
        &mut self,
        stem: &str,
        x: usize,
        filters: usize,
        kernel: [usize; 3],
        role: ConvRole,
    ) -> Result<usize, NetError> {
        let padding = if kernel == [1, 1, 1] {
            Padding::Same
        } else {
            self.cfg.padding
        };
        self.push(
            stem,
            "conv",
            LayerKind::Conv {
                filters,
                kernel,
                stride: [1, 1, 1],
                padding,
                role,
            },
            &[x],
        )
    }

    fn bn_act(&mut self, stem: &str, mut x: usize) -> Result<usize, NetError> {
        if self.cfg.batch_norm {
            x = self.push(
                stem,
                "bn",
                LayerKind::BatchNorm {
                    momentum: BN_MOMENTUM,
                    eps: BN_EPS,
                },
                &[x],
            )?;
        }
        self.push(
            stem,
            "act",
            LayerKind::Activation {
                function: self.cfg.activation,
            },
            &[x],
        )
    }

    /// One convolution with normalization and activation in the configured
    /// order, or an inception unit in its place.
    fn block(&mut self, stem: &str, x: usize, filters: usize) -> Result<usize, NetError> {
        let order = self.cfg.block_order;
        let h = if order == BlockOrder::BnActConv {
            self.bn_act(stem, x)?
        } else {
            x
        };
        let c = if self.cfg.block_style == BlockStyle::Inception {
            self.inception(stem, h, filters)?
        } else {
            let k = self.kernel;
            self.conv(stem, h, filters, k, ConvRole::Block)?
        };
        if order == BlockOrder::ConvBnAct {
            self.bn_act(stem, c)
        } else {
            Ok(c)
        }
    }

    fn inception(&mut self, stem: &str, x: usize, filters: usize) -> Result<usize, NetError> {
        let one = [1, 1, 1];
        let k = self.kernel;
        let a = self.conv(stem, x, filters, one, ConvRole::Auxiliary)?;
        let b = self.conv(stem, x, filters, k, ConvRole::Block)?;
        let pool = [3, 3, if self.g.spatial_rank == 3 { 3 } else { 1 }];
        let p = self.push(
            stem,
            "pool",
            LayerKind::MaxPool {
                window: pool,
                stride: [1, 1, 1],
                padding: Padding::Same,
            },
            &[x],
        )?;
        let c = self.conv(stem, p, filters, one, ConvRole::Auxiliary)?;
        let (a, c) = if self.cfg.padding == Padding::Valid {
            (self.crop_to(stem, a, b)?, self.crop_to(stem, c, b)?)
        } else {
            (a, c)
        };
        let cat = self.push(stem, "concat", LayerKind::Concat, &[a, b, c])?;
        self.conv(stem, cat, filters, one, ConvRole::Auxiliary)
    }

    /// Center-crops `x` to the spatial extent of `like` when they differ.
    fn crop_to(&mut self, stem: &str, x: usize, like: usize) -> Result<usize, NetError> {
        let (xs, ls) = (self.g.dims(x).spatial(), self.g.dims(like).spatial());
        if xs == ls {
            return Ok(x);
        }
        let mut offset = [0; 3];
        for a in 0..3 {
            if xs[a] < ls[a] {
                return Err(NetError::Graph(format!(
                    "{stem}: cannot crop {xs:?} to {ls:?}"
                )));
            }
            offset[a] = (xs[a] - ls[a]) / 2;
        }
        self.push(stem, "crop", LayerKind::Crop { offset, size: ls }, &[x])
    }

    /// Two blocks wired according to the block style.
    fn stage(&mut self, stem: &str, x: usize, filters: usize) -> Result<usize, NetError> {
        match self.cfg.block_style {
            BlockStyle::Plain | BlockStyle::Inception => {
                let h = self.block(stem, x, filters)?;
                self.block(stem, h, filters)
            }
            BlockStyle::Residual => {
                let h1 = self.block(stem, x, filters)?;
                let h2 = self.block(stem, h1, filters)?;
                let h1 = self.crop_to(stem, h1, h2)?;
                self.push(stem, "add", LayerKind::Add, &[h1, h2])
            }
            BlockStyle::Dense => {
                let h1 = self.block(stem, x, filters)?;
                let xc = self.crop_to(stem, x, h1)?;
                let s1 = self.push(stem, "concat", LayerKind::Concat, &[xc, h1])?;
                let h2 = self.block(stem, s1, filters)?;
                let xc = self.crop_to(stem, xc, h2)?;
                let h1c = self.crop_to(stem, h1, h2)?;
                let s2 = self.push(stem, "concat", LayerKind::Concat, &[xc, h1c, h2])?;
                self.conv(stem, s2, filters, [1, 1, 1], ConvRole::Auxiliary)
            }
            BlockStyle::Se => {
                let h = self.block(stem, x, filters)?;
                let h = self.block(stem, h, filters)?;
                let s = self.push(stem, "gap", LayerKind::GlobalAvgPool, &[h])?;
                let s = self.push(
                    stem,
                    "squeeze",
                    LayerKind::Dense {
                        units: (filters / SE_REDUCTION).max(1),
                    },
                    &[s],
                )?;
                let s = self.push(
                    stem,
                    "act",
                    LayerKind::Activation {
                        function: Activation::Relu,
                    },
                    &[s],
                )?;
                let s = self.push(stem, "excite", LayerKind::Dense { units: filters }, &[s])?;
                let s = self.push(
                    stem,
                    "gate",
                    LayerKind::Activation {
                        function: Activation::Sigmoid,
                    },
                    &[s],
                )?;
                self.push(stem, "scale", LayerKind::Scale, &[h, s])
            }
        }
    }

    fn dropout(&mut self, stem: &str, x: usize) -> Result<usize, NetError> {
        if self.cfg.dropout > 0.0 {
            self.push(
                stem,
                "dropout",
                LayerKind::Dropout {
                    rate: self.cfg.dropout,
                },
                &[x],
            )
        } else {
            Ok(x)
        }
    }
}

/// Builds the layer graph of `cfg` without allocating any weights.
pub fn unet_graph(cfg: &UNetConfig) -> Result<Graph, NetError> {
    cfg.validate()?;
    let rank = cfg.spatial_rank();
    let spatial = cfg.axes3(cfg.spatial_shape(), 1);
    let pool = cfg.axes3(&cfg.pool_size, 1);
    let mut b = Builder {
        cfg,
        g: Graph::new(spatial, cfg.input_channels(), rank),
        kernel: cfg.axes3(&cfg.kernel_size, 1),
        counter: 0,
    };
    let mut x = 0;
    let mut skips = Vec::with_capacity(cfg.depth);
    for level in 0..cfg.depth {
        let stem = format!("down{level}");
        x = b.stage(&stem, x, cfg.filters_at(level))?;
        x = b.dropout(&stem, x)?;
        skips.push(x);
        x = b.push(
            &stem,
            "pool",
            LayerKind::MaxPool {
                window: pool,
                stride: pool,
                padding: Padding::Valid,
            },
            &[x],
        )?;
    }
    x = b.stage("bottom", x, cfg.filters_at(cfg.depth))?;
    x = b.dropout("bottom", x)?;
    for level in (0..cfg.depth).rev() {
        let stem = format!("up{level}");
        x = b.push(
            &stem,
            "upsample",
            LayerKind::UpsampleNearest { factor: pool },
            &[x],
        )?;
        let skip = b.crop_to(&stem, skips[level], x)?;
        x = b.push(&stem, "concat", LayerKind::Concat, &[skip, x])?;
        x = b.stage(&stem, x, cfg.filters_at(level))?;
    }
    x = b.conv("head", x, cfg.num_outputs, [1, 1, 1], ConvRole::Output)?;
    let head = if cfg.num_outputs == 1 {
        Activation::Sigmoid
    } else {
        Activation::Softmax
    };
    b.push(
        "head",
        "act",
        LayerKind::Activation { function: head },
        &[x],
    )?;
    Ok(b.g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_schedule() {
        let cfg = UNetConfig::new(vec![64, 64, 8, 2], 4, 512);
        let f: Vec<_> = (0..=4).map(|l| cfg.filters_at(l)).collect();
        assert_eq!(f, vec![32, 64, 128, 256, 512]);
    }

    #[test]
    fn validation_names_field() {
        let mut cfg = UNetConfig::new(vec![64, 60, 8, 2], 3, 64);
        cfg.pool_size = vec![2, 2, 1];
        match cfg.validate() {
            Err(NetError::Config { field, message }) => {
                assert_eq!(field, "input_shape");
                assert!(message.contains("axis 1"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let mut cfg = UNetConfig::new(vec![16, 16, 1], 2, 8);
        cfg.kernel_size = vec![3];
        assert!(
            matches!(cfg.validate(), Err(NetError::Config { field, .. }) if field == "kernel_size")
        );
        let cfg = UNetConfig::new(vec![16, 16, 1], 3, 4);
        assert!(
            matches!(cfg.validate(), Err(NetError::Config { field, .. }) if field == "max_filter")
        );
        let cfg = UNetConfig::new(vec![16, 16, 1], 0, 4);
        assert!(matches!(cfg.validate(), Err(NetError::Config { field, .. }) if field == "depth"));
    }

    #[test]
    fn block_convs_per_style() {
        for style in [
            BlockStyle::Plain,
            BlockStyle::Residual,
            BlockStyle::Dense,
            BlockStyle::Se,
            BlockStyle::Inception,
        ] {
            for order in [BlockOrder::ConvBnAct, BlockOrder::BnActConv] {
                let mut cfg = UNetConfig::new(vec![8, 8, 2], 2, 16);
                cfg.block_style = style;
                cfg.block_order = order;
                let g = unet_graph(&cfg).unwrap();
                assert_eq!(g.convs(ConvRole::Block), 10, "{style:?}");
                assert_eq!(g.convs(ConvRole::Output), 1);
                assert_eq!(g.output_dims().spatial(), [8, 8, 1]);
            }
        }
    }

    #[test]
    fn valid_padding_crops_skips() {
        let mut cfg = UNetConfig::new(vec![28, 28, 1], 1, 8);
        cfg.padding = Padding::Valid;
        let g = unet_graph(&cfg).unwrap();
        // 28 -> 24 -> pool 12 -> 8 -> up 16 -> 12
        assert_eq!(g.output_dims().spatial(), [12, 12, 1]);
    }
}
