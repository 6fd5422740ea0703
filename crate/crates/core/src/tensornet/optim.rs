use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer with its moment buffers. Element updates are computed in f64
/// and rounded once into the f32 parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam {
        t: u64,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[Vec<f32>]) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Adam => Self::Adam {
                t: 0,
                m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
                v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Sgd => OptimizerKind::Sgd,
            Self::Adam { .. } => OptimizerKind::Adam,
        }
    }

    pub fn step(&mut self, params: &mut [Vec<f32>], grads: &[Vec<f32>], lr: f64) {
        match self {
            Self::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.iter_mut().zip(g) {
                        *w = (*w as f64 - lr * d as f64) as f32;
                    }
                }
            }
            Self::Adam { t, m, v } => {
                *t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    for (((w, &d), mi), vi) in
                        p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        let d = d as f64;
                        let mn = ADAM_BETA1 * *mi as f64 + (1.0 - ADAM_BETA1) * d;
                        let vn = ADAM_BETA2 * *vi as f64 + (1.0 - ADAM_BETA2) * d * d;
                        *mi = mn as f32;
                        *vi = vn as f32;
                        let upd = lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
                        *w = (*w as f64 - upd) as f32;
                    }
                }
            }
        }
    }
}
