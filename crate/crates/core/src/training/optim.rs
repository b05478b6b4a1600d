use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Which update rule a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Optimizer with its running state.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(Adam),
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamStore<f64>,
    pub v: ParamStore<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore<f64>) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: params.zeros_like(),
                v: params.zeros_like(),
            }),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Adam(_) => OptimizerKind::Adam,
            Optimizer::Sgd => OptimizerKind::Sgd,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<f64>, grads: &Gradients<f64>, lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => {
                for (name, p) in params.iter_mut() {
                    let g = grads.get(name)?;
                    for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= lr * d;
                    }
                }
            }
            Optimizer::Adam(a) => {
                a.step += 1;
                let bc1 = 1.0 - a.beta1.powi(a.step as i32);
                let bc2 = 1.0 - a.beta2.powi(a.step as i32);
                for (name, p) in params.iter_mut() {
                    let g = grads.get(name)?;
                    let m = a.m.get_mut(name)?;
                    for (mi, &d) in m.data_mut().iter_mut().zip(g.data()) {
                        *mi = a.beta1 * *mi + (1.0 - a.beta1) * d;
                    }
                    let v = a.v.get_mut(name)?;
                    for (vi, &d) in v.data_mut().iter_mut().zip(g.data()) {
                        *vi = a.beta2 * *vi + (1.0 - a.beta2) * d * d;
                    }
                    let (m, v) = (a.m.get(name)?, a.v.get(name)?);
                    for ((x, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                        *x -= lr * (mi / bc1) / ((vi / bc2).sqrt() + a.eps);
                    }
                }
            }
        }
        if params.iter().any(|(_, t)| !t.all_finite()) {
            return Err(Error::numerical("parameter update produced a non-finite value"));
        }
        Ok(())
    }
}

/// Rescale `grads` in place so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Gradients<f64>, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}
