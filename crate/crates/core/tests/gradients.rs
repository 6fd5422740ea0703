//! Central-difference checks of every differentiable op, every block style,
//! and both losses, in f64.

use neuropipe_core::rng::rng_for;
use neuropipe_core::tensornet::gradcheck::{check_function, grad_check, GradReport};
use neuropipe_core::tensornet::graph::{Graph, Init, LayerKind};
use neuropipe_core::tensornet::loss::{binary_crossentropy, soft_dice};
use neuropipe_core::tensornet::ops::sigmoid;
use neuropipe_core::tensornet::{
    unet_graph, Activation, BlockOrder, BlockStyle, ConvRole, ForwardOpts, Padding, UNetConfig,
};
use rand::Rng;

const H: f64 = 1e-5;
const EVAL: ForwardOpts = ForwardOpts {
    training: false,
    dropout_seed: 0,
};
const TRAIN: ForwardOpts = ForwardOpts {
    training: true,
    dropout_seed: 11,
};

fn random(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut r = rng_for(seed, &[]);
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

fn init(g: &Graph, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let params = g
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| match p.init {
            // Random rather than 0/1 so every parameter has a generic gradient.
            Init::Ones => random(p.len(), seed + i as u64, 0.5, 1.5),
            _ => random(p.len(), seed + i as u64, -0.6, 0.6),
        })
        .collect();
    let state = g
        .state
        .iter()
        .enumerate()
        .map(|(i, s)| match s.init {
            Init::Ones => random(s.len(), 100 + i as u64, 0.5, 2.0),
            _ => random(s.len(), 200 + i as u64, -0.3, 0.3),
        })
        .collect();
    (params, state)
}

/// Random linear read-out of the graph output.
fn projection(len: usize, seed: u64) -> impl Fn(&[f64]) -> (f64, Vec<f64>) {
    let r = random(len, seed, -1.0, 1.0);
    move |y: &[f64]| (y.iter().zip(&r).map(|(a, b)| a * b).sum(), r.clone())
}

fn check_graph(g: &Graph, batch: usize, opts: ForwardOpts, seed: u64) -> GradReport {
    let (p, s) = init(g, seed);
    let x = random(g.input_dims().len() * batch, seed ^ 0x55, -1.0, 1.0);
    let out = g.output_dims().len() * batch;
    let loss = projection(out, seed ^ 0xaa);
    grad_check(g, &p, &s, &x, batch, opts, &loss, H).unwrap()
}

fn assert_report(what: &str, r: &GradReport, tol: f64) {
    let worst = r.max_error();
    println!(
        "{what}: max rel error {worst:.3e} over {} coords, {} skipped",
        r.checked(),
        r.skipped()
    );
    assert!(worst < tol, "{what}: {worst:e} >= {tol:e}\n{r:#?}");
    assert!(
        r.skipped() * 20 <= r.checked(),
        "{what}: too many kink-crossing coordinates skipped ({} of {})",
        r.skipped(),
        r.checked()
    );
}

fn single(spatial: [usize; 3], c: usize, rank: usize, kind: LayerKind) -> Graph {
    let mut g = Graph::new(spatial, c, rank);
    g.push("op", kind, &[0]).unwrap();
    g
}

fn conv(filters: usize, kernel: [usize; 3], stride: [usize; 3], padding: Padding) -> LayerKind {
    LayerKind::Conv {
        filters,
        kernel,
        stride,
        padding,
        role: ConvRole::Block,
    }
}

#[test]
fn conv_2d_small_case() {
    let g = single(
        [4, 4, 1],
        2,
        2,
        conv(3, [3, 3, 1], [1, 1, 1], Padding::Same),
    );
    assert_report("conv 4x4x2->3 same", &check_graph(&g, 1, EVAL, 1), 1e-6);
}

#[test]
fn conv_variants() {
    let cases = [
        (
            "valid",
            single(
                [5, 4, 1],
                2,
                2,
                conv(2, [3, 3, 1], [1, 1, 1], Padding::Valid),
            ),
        ),
        (
            "stride 2",
            single(
                [5, 6, 1],
                1,
                2,
                conv(2, [3, 3, 1], [2, 2, 1], Padding::Same),
            ),
        ),
        (
            "3d",
            single(
                [4, 3, 3],
                2,
                3,
                conv(2, [3, 3, 3], [1, 1, 1], Padding::Same),
            ),
        ),
        (
            "5x5",
            single(
                [5, 5, 1],
                1,
                2,
                conv(1, [5, 5, 1], [1, 1, 1], Padding::Same),
            ),
        ),
    ];
    for (name, g) in &cases {
        assert_report(name, &check_graph(g, 2, EVAL, 2), 1e-6);
    }
}

#[test]
fn linear_ops() {
    let dense = single([2, 2, 1], 3, 2, LayerKind::Dense { units: 2 });
    let r = check_graph(&dense, 2, EVAL, 3);
    assert!(r.max_error() < 1e-8, "dense {r:?}");
    assert_report("dense", &r, 1e-8);
    let ups = single(
        [2, 3, 1],
        2,
        2,
        LayerKind::UpsampleNearest { factor: [2, 2, 1] },
    );
    assert_report("upsample", &check_graph(&ups, 1, EVAL, 4), 1e-6);
    let crop = single(
        [4, 4, 2],
        1,
        3,
        LayerKind::Crop {
            offset: [1, 0, 1],
            size: [2, 3, 1],
        },
    );
    assert_report("crop", &check_graph(&crop, 1, EVAL, 5), 1e-6);
    let gap = single([3, 2, 1], 2, 2, LayerKind::GlobalAvgPool);
    assert_report("global pool", &check_graph(&gap, 2, EVAL, 6), 1e-6);
}

#[test]
fn pooling() {
    let pool = |padding| LayerKind::MaxPool {
        window: [2, 2, 1],
        stride: [2, 2, 1],
        padding,
    };
    assert_report(
        "maxpool",
        &check_graph(&single([4, 4, 1], 2, 2, pool(Padding::Valid)), 1, EVAL, 7),
        1e-6,
    );
    assert_report(
        "maxpool same",
        &check_graph(&single([5, 3, 1], 1, 2, pool(Padding::Same)), 1, EVAL, 8),
        1e-6,
    );
    let p3 = LayerKind::MaxPool {
        window: [3, 3, 3],
        stride: [1, 1, 1],
        padding: Padding::Same,
    };
    assert_report(
        "maxpool 3d same",
        &check_graph(&single([3, 3, 3], 1, 3, p3), 1, EVAL, 9),
        1e-6,
    );
}

#[test]
fn multi_input_ops() {
    let mut g = Graph::new([3, 2, 1], 2, 2);
    let a = g
        .push("a", conv(2, [1, 1, 1], [1, 1, 1], Padding::Same), &[0])
        .unwrap();
    let s = g.push("s", LayerKind::Add, &[0, a]).unwrap();
    g.push("c", LayerKind::Concat, &[s, 0, a]).unwrap();
    assert_report("add+concat", &check_graph(&g, 2, EVAL, 10), 1e-6);

    let mut g = Graph::new([3, 3, 1], 2, 2);
    let p = g.push("gap", LayerKind::GlobalAvgPool, &[0]).unwrap();
    let d = g.push("d", LayerKind::Dense { units: 2 }, &[p]).unwrap();
    g.push("scale", LayerKind::Scale, &[0, d]).unwrap();
    assert_report("scale", &check_graph(&g, 2, EVAL, 11), 1e-6);
}

#[test]
fn activations() {
    for f in [
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Softmax,
        Activation::Linear,
    ] {
        let g = single([3, 3, 1], 3, 2, LayerKind::Activation { function: f });
        assert_report(&format!("{f:?}"), &check_graph(&g, 2, EVAL, 12), 1e-6);
    }
}

#[test]
fn batch_norm_modes() {
    let bn = LayerKind::BatchNorm {
        momentum: 0.9,
        eps: 1e-3,
    };
    let g = single([3, 3, 1], 2, 2, bn.clone());
    assert_report("bn frozen", &check_graph(&g, 2, EVAL, 13), 1e-6);
    assert_report("bn training", &check_graph(&g, 2, TRAIN, 14), 1e-5);
}

#[test]
fn dropout_fixed_mask() {
    let g = single([4, 4, 1], 2, 2, LayerKind::Dropout { rate: 0.4 });
    assert_report("dropout", &check_graph(&g, 1, TRAIN, 15), 1e-6);
}

#[test]
fn conv_bn_relu_block() {
    let mut g = Graph::new([4, 4, 1], 2, 2);
    let c = g
        .push("c", conv(3, [3, 3, 1], [1, 1, 1], Padding::Same), &[0])
        .unwrap();
    let b = g
        .push(
            "bn",
            LayerKind::BatchNorm {
                momentum: 0.9,
                eps: 1e-3,
            },
            &[c],
        )
        .unwrap();
    g.push(
        "act",
        LayerKind::Activation {
            function: Activation::Relu,
        },
        &[b],
    )
    .unwrap();
    assert_report("conv+bn+relu frozen", &check_graph(&g, 2, EVAL, 16), 1e-5);
    assert_report(
        "conv+bn+relu training",
        &check_graph(&g, 2, TRAIN, 17),
        1e-5,
    );
}

fn tiny_unet(style: BlockStyle, order: BlockOrder, rank: usize) -> Graph {
    let shape = if rank == 2 {
        vec![4, 4, 2]
    } else {
        vec![4, 4, 2, 1]
    };
    let mut cfg = UNetConfig::new(shape, 1, 4);
    if rank == 3 {
        cfg.pool_size = vec![2, 2, 1];
    }
    cfg.block_style = style;
    cfg.block_order = order;
    unet_graph(&cfg).unwrap()
}

#[test]
fn composed_blocks() {
    for style in [
        BlockStyle::Plain,
        BlockStyle::Residual,
        BlockStyle::Dense,
        BlockStyle::Se,
        BlockStyle::Inception,
    ] {
        for order in [BlockOrder::ConvBnAct, BlockOrder::BnActConv] {
            let g = tiny_unet(style, order, 2);
            assert_report(
                &format!("{style:?}/{order:?} frozen"),
                &check_graph(&g, 1, EVAL, 18),
                1e-5,
            );
            assert_report(
                &format!("{style:?}/{order:?} training"),
                &check_graph(&g, 2, TRAIN, 19),
                1e-5,
            );
        }
    }
    let g = tiny_unet(BlockStyle::Plain, BlockOrder::ConvBnAct, 3);
    assert_report("3d plain", &check_graph(&g, 1, EVAL, 20), 1e-5);
}

#[test]
fn soft_dice_on_random_logits() {
    let t: Vec<f64> = random(40, 21, 0.0, 1.0)
        .iter()
        .map(|&v| f64::from(v > 0.6))
        .collect();
    let logits = random(40, 22, -3.0, 3.0);
    let err = check_function(&logits, H, |z| {
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let (l, g) = soft_dice(&p, &t, 2, 1.0).unwrap();
        let dz = g.iter().zip(&p).map(|(d, p)| d * p * (1.0 - p)).collect();
        (l, dz)
    });
    println!("soft dice: {err:.3e}");
    assert!(err < 1e-6, "{err:e}");
    let p = random(40, 23, 0.05, 0.95);
    let err = check_function(&p, H, |p| soft_dice(p, &t, 4, 1.0).unwrap());
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn cross_entropy_head() {
    let t: Vec<f64> = random(30, 24, 0.0, 1.0)
        .iter()
        .map(|&v| f64::from(v > 0.5))
        .collect();
    let p = random(30, 25, 0.05, 0.95);
    let err = check_function(&p, H, |p| binary_crossentropy(p, &t, 3).unwrap());
    println!("bce: {err:.3e}");
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn heads_through_network() {
    let mut cfg = UNetConfig::new(vec![4, 4, 1], 1, 4);
    cfg.num_outputs = 1;
    let g = unet_graph(&cfg).unwrap();
    let (p, s) = init(&g, 26);
    let x = random(16, 27, -1.0, 1.0);
    let t: Vec<f64> = random(16, 28, 0.0, 1.0)
        .iter()
        .map(|&v| f64::from(v > 0.5))
        .collect();
    let dice = |y: &[f64]| soft_dice(y, &t, 1, 1.0).unwrap();
    let r = grad_check(&g, &p, &s, &x, 1, EVAL, &dice, H).unwrap();
    assert_report("unet + soft dice", &r, 1e-5);
    let bce = |y: &[f64]| binary_crossentropy(y, &t, 1).unwrap();
    let r = grad_check(&g, &p, &s, &x, 1, EVAL, &bce, H).unwrap();
    assert_report("unet + bce", &r, 1e-5);
}
