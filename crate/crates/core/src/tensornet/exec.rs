//! Graph execution: a forward pass recording a tape, and reverse-mode
//! accumulation over it.

use rand::Rng as _;

use crate::rng::rng_for;

use super::graph::{Activation, Dims, Graph, LayerKind};
use super::ops::{self, BnCache, ConvGeom};
use super::scalar::Scalar;
use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOpts {
    /// Batch statistics for BN and active dropout.
    pub training: bool,
    /// Seeds the dropout masks of this pass.
    pub dropout_seed: u64,
}

pub(crate) enum Cache<T> {
    None,
    Pool(Vec<u32>),
    Bn(BnCache<T>),
    Dropout(Vec<T>),
}

pub struct Tape<T> {
    pub outputs: Vec<Vec<T>>,
    pub dims: Vec<Dims>,
    pub(crate) caches: Vec<Cache<T>>,
    /// Batch (mean, var) of every BN node run in training mode.
    pub batch_stats: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> Tape<T> {
    pub fn output(&self) -> &[T] {
        self.outputs.last().expect("graph has nodes")
    }

    pub fn output_dims(&self) -> Dims {
        *self.dims.last().expect("graph has nodes")
    }
}

pub struct Gradients<T> {
    pub params: Vec<Vec<T>>,
    pub input: Vec<T>,
}

fn geom(
    d: Dims,
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: super::graph::Padding,
) -> ConvGeom {
    ConvGeom::new(d, kernel, stride, padding)
}

pub fn forward<T: Scalar>(
    graph: &Graph,
    params: &[Vec<T>],
    state: &[Vec<T>],
    input: &[T],
    batch: usize,
    opts: ForwardOpts,
) -> Result<Tape<T>, NetError> {
    let in_dims = graph.input_dims().with_batch(batch);
    if batch == 0 || input.len() != in_dims.len() {
        return Err(NetError::ShapeMismatch(format!(
            "input has {} elements, graph expects batch × {:?} = {}",
            input.len(),
            graph.input_dims(),
            in_dims.len()
        )));
    }
    let count = graph.nodes.len();
    let mut tape = Tape {
        outputs: Vec::with_capacity(count),
        dims: Vec::with_capacity(count),
        caches: Vec::with_capacity(count),
        batch_stats: Vec::with_capacity(count),
    };
    tape.outputs.push(input.to_vec());
    tape.dims.push(in_dims);
    tape.caches.push(Cache::None);
    tape.batch_stats.push(None);

    for (idx, node) in graph.nodes.iter().enumerate().skip(1) {
        let yd = node.dims.with_batch(batch);
        let x0 = &tape.outputs[node.inputs[0]];
        let xd = tape.dims[node.inputs[0]];
        let mut cache = Cache::None;
        let mut stats = None;
        let y = match &node.kind {
            LayerKind::Input { .. } => unreachable!("input is node 0"),
            LayerKind::Conv {
                kernel,
                stride,
                padding,
                ..
            } => {
                let g = geom(xd, *kernel, *stride, *padding);
                ops::conv_forward(
                    x0,
                    xd,
                    &params[node.params[0]],
                    &params[node.params[1]],
                    &g,
                    yd,
                )
            }
            LayerKind::MaxPool {
                window,
                stride,
                padding,
            } => {
                let g = geom(xd, *window, *stride, *padding);
                let (y, arg) = ops::maxpool_forward(x0, xd, &g, yd);
                cache = Cache::Pool(arg);
                y
            }
            LayerKind::UpsampleNearest { factor } => ops::upsample_forward(x0, xd, *factor, yd),
            LayerKind::Crop { offset, .. } => ops::crop(x0, xd, *offset, yd, false),
            LayerKind::Concat => {
                let parts: Vec<(&[T], usize)> = node
                    .inputs
                    .iter()
                    .map(|&i| (tape.outputs[i].as_slice(), tape.dims[i].c))
                    .collect();
                ops::concat_forward(&parts, yd.n * yd.voxels())
            }
            LayerKind::Add => {
                let x1 = &tape.outputs[node.inputs[1]];
                x0.iter().zip(x1).map(|(&a, &b)| a + b).collect()
            }
            LayerKind::BatchNorm { eps, .. } => {
                let (gamma, beta) = (&params[node.params[0]], &params[node.params[1]]);
                let eps = T::from_f64(*eps);
                let (y, c) = if opts.training {
                    let (mean, var) = ops::channel_stats(x0, xd.c);
                    let r = ops::bn_forward(x0, xd.c, gamma, beta, &mean, &var, eps, true);
                    stats = Some((mean, var));
                    r
                } else {
                    let (rm, rv) = (&state[node.state[0]], &state[node.state[1]]);
                    ops::bn_forward(x0, xd.c, gamma, beta, rm, rv, eps, false)
                };
                cache = Cache::Bn(c);
                y
            }
            LayerKind::Activation { function } => ops::activation_forward(x0, xd.c, *function),
            LayerKind::Dropout { rate } => {
                if opts.training && *rate > 0.0 {
                    let mut rng = rng_for(opts.dropout_seed, &[idx as u64]);
                    let keep = T::from_f64(1.0 / (1.0 - rate));
                    let mask: Vec<T> = (0..x0.len())
                        .map(|_| {
                            if rng.gen::<f64>() < *rate {
                                T::zero()
                            } else {
                                keep
                            }
                        })
                        .collect();
                    let y = x0.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                    cache = Cache::Dropout(mask);
                    y
                } else {
                    x0.clone()
                }
            }
            LayerKind::Dense { .. } => {
                ops::dense_forward(x0, xd.c, &params[node.params[0]], &params[node.params[1]])
            }
            LayerKind::GlobalAvgPool => ops::global_pool_forward(x0, xd),
            LayerKind::Scale => ops::scale_forward(x0, xd, &tape.outputs[node.inputs[1]]),
        };
        debug_assert_eq!(y.len(), yd.len(), "{}", node.name);
        tape.outputs.push(y);
        tape.dims.push(yd);
        tape.caches.push(cache);
        tape.batch_stats.push(stats);
    }
    Ok(tape)
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

/// Reverse pass from `d_output`, the loss gradient w.r.t. the graph output.
pub fn backward<T: Scalar>(
    graph: &Graph,
    params: &[Vec<T>],
    tape: &Tape<T>,
    d_output: Vec<T>,
) -> Gradients<T> {
    let mut pgrads: Vec<Vec<T>> = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
    let mut grads: Vec<Option<Vec<T>>> = (0..graph.nodes.len()).map(|_| None).collect();
    grads[graph.output()] = Some(d_output);

    for (idx, node) in graph.nodes.iter().enumerate().skip(1).rev() {
        let Some(dy) = grads[idx].take() else {
            continue;
        };
        let yd = tape.dims[idx];
        let i0 = node.inputs[0];
        let x0 = &tape.outputs[i0];
        let xd = tape.dims[i0];
        let mut add_param = |slot: usize, g: Vec<T>| {
            pgrads[slot]
                .iter_mut()
                .zip(&g)
                .for_each(|(a, &b)| *a = *a + b);
        };
        match &node.kind {
            LayerKind::Input { .. } => unreachable!(),
            LayerKind::Conv {
                kernel,
                stride,
                padding,
                ..
            } => {
                let g = geom(xd, *kernel, *stride, *padding);
                let (dx, dw, db) = ops::conv_backward(x0, xd, &params[node.params[0]], &g, &dy, yd);
                add_param(node.params[0], dw);
                add_param(node.params[1], db);
                accumulate(&mut grads[i0], dx);
            }
            LayerKind::MaxPool { .. } => {
                let Cache::Pool(arg) = &tape.caches[idx] else {
                    unreachable!()
                };
                accumulate(&mut grads[i0], ops::maxpool_backward(&dy, arg, xd.len()));
            }
            LayerKind::UpsampleNearest { factor } => {
                accumulate(&mut grads[i0], ops::upsample_backward(&dy, xd, *factor, yd));
            }
            LayerKind::Crop { offset, .. } => {
                accumulate(&mut grads[i0], ops::crop(&dy, xd, *offset, yd, true));
            }
            LayerKind::Concat => {
                let chans: Vec<usize> = node.inputs.iter().map(|&i| tape.dims[i].c).collect();
                let parts = ops::concat_backward(&dy, &chans, yd.n * yd.voxels());
                for (&i, p) in node.inputs.iter().zip(parts) {
                    accumulate(&mut grads[i], p);
                }
            }
            LayerKind::Add => {
                accumulate(&mut grads[node.inputs[1]], dy.clone());
                accumulate(&mut grads[i0], dy);
            }
            LayerKind::BatchNorm { .. } => {
                let Cache::Bn(c) = &tape.caches[idx] else {
                    unreachable!()
                };
                let (dx, dg, db) = ops::bn_backward(&dy, xd.c, &params[node.params[0]], c);
                add_param(node.params[0], dg);
                add_param(node.params[1], db);
                accumulate(&mut grads[i0], dx);
            }
            LayerKind::Activation { function } => {
                let dx = ops::activation_backward(x0, &tape.outputs[idx], &dy, xd.c, *function);
                accumulate(&mut grads[i0], dx);
            }
            LayerKind::Dropout { .. } => {
                let dx = match &tape.caches[idx] {
                    Cache::Dropout(mask) => dy.iter().zip(mask).map(|(&d, &m)| d * m).collect(),
                    _ => dy,
                };
                accumulate(&mut grads[i0], dx);
            }
            LayerKind::Dense { units } => {
                let (dx, dw, db) =
                    ops::dense_backward(x0, xd.c, &params[node.params[0]], &dy, *units);
                add_param(node.params[0], dw);
                add_param(node.params[1], db);
                accumulate(&mut grads[i0], dx);
            }
            LayerKind::GlobalAvgPool => {
                accumulate(&mut grads[i0], ops::global_pool_backward(&dy, xd));
            }
            LayerKind::Scale => {
                let i1 = node.inputs[1];
                let (dx, dg) = ops::scale_backward(x0, xd, &tape.outputs[i1], &dy);
                accumulate(&mut grads[i0], dx);
                accumulate(&mut grads[i1], dg);
            }
        }
    }
    let input = grads[0]
        .take()
        .unwrap_or_else(|| vec![T::zero(); tape.outputs[0].len()]);
    Gradients {
        params: pgrads,
        input,
    }
}

/// Folds the batch statistics of a training pass into the running averages:
/// `running = momentum · running + (1 − momentum) · batch`.
pub fn update_running_stats<T: Scalar>(graph: &Graph, state: &mut [Vec<T>], tape: &Tape<T>) {
    for (node, stats) in graph.nodes.iter().zip(&tape.batch_stats) {
        let (LayerKind::BatchNorm { momentum, .. }, Some((mean, var))) = (&node.kind, stats) else {
            continue;
        };
        let m = T::from_f64(*momentum);
        let r = T::one() - m;
        for (s, &b) in state[node.state[0]].iter_mut().zip(mean) {
            *s = m * *s + r * b;
        }
        for (s, &b) in state[node.state[1]].iter_mut().zip(var) {
            *s = m * *s + r * b;
        }
    }
}

/// Discrete features of a pass that make it non-differentiable when they
/// change: the sign pattern at every rectifier and every pooling winner.
pub fn kink_signature<T: Scalar>(graph: &Graph, tape: &Tape<T>) -> Vec<u32> {
    let mut sig = Vec::new();
    for (idx, node) in graph.nodes.iter().enumerate() {
        match &node.kind {
            LayerKind::Activation {
                function: Activation::Relu | Activation::LeakyRelu,
            } => {
                sig.extend(
                    tape.outputs[node.inputs[0]]
                        .iter()
                        .map(|&v| u32::from(v > T::zero())),
                );
            }
            LayerKind::MaxPool { .. } => {
                if let Cache::Pool(arg) = &tape.caches[idx] {
                    sig.extend_from_slice(arg);
                }
            }
            _ => {}
        }
    }
    sig
}
