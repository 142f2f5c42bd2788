//! Parameter updates and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::{zeros_like, ParamMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: ParamMap,
    v: ParamMap,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamMap) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (ParamMap::new(), ParamMap::new()),
            OptimizerKind::Adam => (zeros_like(params), zeros_like(params)),
        };
        Optimizer { kind, lr, m, v, steps: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Descends along `grads`; parameters without a gradient are untouched.
    pub fn step(&mut self, params: &mut ParamMap, grads: &ParamMap) {
        self.steps += 1;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.m.get_mut(name).expect("moment for every parameter").data_mut();
                    let v = self.v.get_mut(name).expect("moment for every parameter").data_mut();
                    let c1 = 1.0 - BETA1.powi(self.steps);
                    let c2 = 1.0 - BETA2.powi(self.steps);
                    for (i, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * d;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * d * d;
                        *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamMap, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// `acc += scale · g` for every entry of `g`.
pub(crate) fn accumulate(acc: &mut ParamMap, g: &ParamMap, scale: f64) {
    for (name, t) in g {
        match acc.get_mut(name) {
            Some(a) => a.data_mut().iter_mut().zip(t.data()).for_each(|(a, x)| *a += scale * x),
            None => {
                let mut t = t.clone();
                t.data_mut().iter_mut().for_each(|x| *x *= scale);
                acc.insert(name.clone(), t);
            }
        }
    }
}
