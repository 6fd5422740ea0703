//! Central-difference verification of analytic gradients in f64.
//!
//! Error is `max_i |a_i − n_i| / max(|a_i|, |n_i|, 1e-3 · max_j |a_j|)`:
//! relative per coordinate, floored by the largest analytic gradient of the
//! whole check (all tensors) so that components which are analytically zero,
//! such as a bias feeding batch normalization, do not divide by round-off.

use super::exec::{self, ForwardOpts};
use super::graph::Graph;
use super::NetError;

/// Loss value and its gradient with respect to the network output.
pub type LossFn<'a> = dyn Fn(&[f64]) -> (f64, Vec<f64>) + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a rectifier kink or changed a
    /// pooling winner.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradReport {
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.entries.iter().map(|e| e.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.entries.iter().map(|e| e.skipped).sum()
    }
}

struct ErrAcc {
    scale: f64,
    worst: f64,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

impl ErrAcc {
    fn new(scale: f64) -> Self {
        Self {
            scale: 1e-3 * scale,
            worst: 0.0,
        }
    }

    fn push(&mut self, a: f64, n: f64) {
        let denom = a.abs().max(n.abs()).max(self.scale).max(f64::MIN_POSITIVE);
        self.worst = self.worst.max((a - n).abs() / denom);
    }
}

/// Checks the gradient returned by `f` at `x`.
pub fn check_function(x: &[f64], h: f64, f: impl Fn(&[f64]) -> (f64, Vec<f64>)) -> f64 {
    let (_, analytic) = f(x);
    let mut acc = ErrAcc::new(max_abs(&analytic));
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let lp = f(&p).0;
        p[i] = x[i] - h;
        let lm = f(&p).0;
        p[i] = x[i];
        acc.push(analytic[i], (lp - lm) / (2.0 * h));
    }
    acc.worst
}

/// Checks every parameter and input coordinate of `graph` under the scalar
/// `loss`, which maps the graph output to (value, d value / d output).
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    graph: &Graph,
    params: &[Vec<f64>],
    state: &[Vec<f64>],
    input: &[f64],
    batch: usize,
    opts: ForwardOpts,
    loss: &LossFn<'_>,
    h: f64,
) -> Result<GradReport, NetError> {
    let base = exec::forward(graph, params, state, input, batch, opts)?;
    let signature = exec::kink_signature(graph, &base);
    let (_, dout) = loss(base.output());
    let grads = exec::backward(graph, params, &base, dout);
    let scale = grads
        .params
        .iter()
        .map(|g| max_abs(g))
        .fold(max_abs(&grads.input), f64::max);

    let eval = |p: &[Vec<f64>], x: &[f64]| -> Result<Option<f64>, NetError> {
        let t = exec::forward(graph, p, state, x, batch, opts)?;
        if exec::kink_signature(graph, &t) != signature {
            return Ok(None);
        }
        Ok(Some(loss(t.output()).0))
    };

    let mut report = GradReport::default();
    let mut p = params.to_vec();
    for (k, spec) in graph.params.iter().enumerate() {
        let mut acc = ErrAcc::new(scale);
        let (mut checked, mut skipped) = (0, 0);
        for i in 0..p[k].len() {
            let w = params[k][i];
            p[k][i] = w + h;
            let lp = eval(&p, input)?;
            p[k][i] = w - h;
            let lm = eval(&p, input)?;
            p[k][i] = w;
            match (lp, lm) {
                (Some(a), Some(b)) => {
                    acc.push(grads.params[k][i], (a - b) / (2.0 * h));
                    checked += 1;
                }
                _ => skipped += 1,
            }
        }
        report.entries.push(GradEntry {
            name: spec.name.clone(),
            max_rel_error: acc.worst,
            checked,
            skipped,
        });
    }
    let mut acc = ErrAcc::new(scale);
    let (mut checked, mut skipped) = (0, 0);
    let mut x = input.to_vec();
    for i in 0..x.len() {
        x[i] = input[i] + h;
        let lp = eval(params, &x)?;
        x[i] = input[i] - h;
        let lm = eval(params, &x)?;
        x[i] = input[i];
        match (lp, lm) {
            (Some(a), Some(b)) => {
                acc.push(grads.input[i], (a - b) / (2.0 * h));
                checked += 1;
            }
            _ => skipped += 1,
        }
    }
    report.entries.push(GradEntry {
        name: "input".into(),
        max_rel_error: acc.worst,
        checked,
        skipped,
    });
    Ok(report)
}
