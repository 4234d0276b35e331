use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dualnet::{DualBranchNetwork, ParamId};
use crate::scalar::Real;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SGD_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    /// Heavy-ball momentum 0.9.
    Sgd,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Schedule {
    /// Half cosine from the base rate to 0 over the stage.
    Cosine,
    /// x0.1 after 60% and again after 80% of the stage.
    Step,
    Constant,
}

impl Schedule {
    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Cosine => "cosine",
            Schedule::Step => "step",
            Schedule::Constant => "constant",
        }
    }
}

/// Learning rate of step `step` out of `total` steps.
pub fn learning_rate(schedule: Schedule, base: f64, step: usize, total: usize) -> f64 {
    let frac = if total == 0 { 0.0 } else { step as f64 / total as f64 };
    match schedule {
        Schedule::Constant => base,
        Schedule::Cosine => base * 0.5 * (1.0 + (PI * frac).cos()),
        Schedule::Step => {
            if frac >= 0.8 {
                base * 0.01
            } else if frac >= 0.6 {
                base * 0.1
            } else {
                base
            }
        }
    }
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    kind: OptimizerKind,
    steps: i32,
    first: BTreeMap<ParamId, Vec<S>>,
    second: BTreeMap<ParamId, Vec<S>>,
}

impl<S: Real> Optimizer<S> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, steps: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Applies one update; `grads[i]` belongs to `ids[i]`.
    pub fn step(&mut self, net: &mut DualBranchNetwork<S>, ids: &[ParamId], grads: &[Vec<S>], lr: f64) {
        self.steps += 1;
        let lr = S::lit(lr);
        match self.kind {
            OptimizerKind::Adam => {
                let (b1, b2) = (S::lit(ADAM_BETA1), S::lit(ADAM_BETA2));
                let c1 = S::one() - b1.powi(self.steps);
                let c2 = S::one() - b2.powi(self.steps);
                let eps = S::lit(ADAM_EPS);
                for (id, g) in ids.iter().zip(grads) {
                    let m = self.first.entry(*id).or_insert_with(|| vec![S::zero(); g.len()]);
                    let v = self.second.entry(*id).or_insert_with(|| vec![S::zero(); g.len()]);
                    for (((p, &g), m), v) in net.param_mut(*id).iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (S::one() - b1) * g;
                        *v = b2 * *v + (S::one() - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd => {
                let mu = S::lit(SGD_MOMENTUM);
                for (id, g) in ids.iter().zip(grads) {
                    let vel = self.first.entry(*id).or_insert_with(|| vec![S::zero(); g.len()]);
                    for ((p, &g), v) in net.param_mut(*id).iter_mut().zip(g).zip(vel.iter_mut()) {
                        *v = mu * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
        }
    }
}
