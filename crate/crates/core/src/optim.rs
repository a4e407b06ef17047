//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "sgd_momentum" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::config("optimizer", format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        let state = |on: bool| if on { vec![0.0; n] } else { Vec::new() };
        Optimizer {
            kind,
            lr,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: state(kind != OptimizerKind::Sgd),
            v: state(kind == OptimizerKind::Adam),
            t: 0,
        }
    }

    pub fn sgd(lr: f64, n: usize) -> Self {
        Optimizer::new(OptimizerKind::Sgd, lr, n)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// In-place update; `grad` entries outside the trainable mask should
    /// already be zero.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        assert_eq!(theta.len(), grad.len(), "parameter/gradient length");
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in theta.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::SgdMomentum => {
                for ((p, g), m) in theta.iter_mut().zip(grad).zip(&mut self.m) {
                    *m = self.momentum * *m + g;
                    *p -= self.lr * *m;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - self.beta1.powi(self.t);
                let c2 = 1.0 - self.beta2.powi(self.t);
                for (((p, g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    // frozen entries keep zero moments and never move
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                }
            }
        }
    }
}
