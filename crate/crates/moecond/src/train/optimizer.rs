//! Parameter update rules.

use crate::error::Result;
use crate::moe::{for_each_param_pair, ModelGrads, MoeModel};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(crate::error::Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// SGD or adaptive-moment updates. Moment stores are flat in the model's
/// fixed parameter traversal order.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut MoeModel, grads: &ModelGrads) -> Result<()> {
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for_each_param_pair(model, grads, |p, g| p.add_scaled_in_place(g, -lr))
            }
            OptimizerKind::Adam => {
                self.step += 1;
                if self.m.is_empty() {
                    let m = &mut self.m;
                    let v = &mut self.v;
                    for_each_param_pair(model, grads, |p, _| {
                        m.push(Matrix::zeros(p.rows(), p.cols()));
                        v.push(Matrix::zeros(p.rows(), p.cols()));
                        Ok(())
                    })?;
                }
                let bc1 = 1.0 - BETA1.powi(self.step as i32);
                let bc2 = 1.0 - BETA2.powi(self.step as i32);
                let m = &mut self.m;
                let v = &mut self.v;
                let mut cursor = 0usize;
                for_each_param_pair(model, grads, |p, g| {
                    let mm = &mut m[cursor];
                    let vv = &mut v[cursor];
                    cursor += 1;
                    for (((pp, gg), a), b) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(mm.data_mut())
                        .zip(vv.data_mut())
                    {
                        *a = BETA1 * *a + (1.0 - BETA1) * gg;
                        *b = BETA2 * *b + (1.0 - BETA2) * gg * gg;
                        let mhat = *a / bc1;
                        let vhat = *b / bc2;
                        *pp -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                    Ok(())
                })
            }
        }
    }
}

/// One SGD update on a standalone parameter block: θ ← θ − lr·g.
pub fn sgd_update(param: &mut Matrix, grad: &Matrix, lr: f64) -> Result<()> {
    param.add_scaled_in_place(grad, -lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_on_quadratic_shrinks_by_one_minus_lr() {
        // f = ½‖θ‖² has gradient θ, so one step gives θ(1 − lr).
        let mut theta = Matrix::col(vec![2.0, -4.0, 0.5]);
        let grad = theta.clone();
        sgd_update(&mut theta, &grad, 0.1).unwrap();
        assert_eq!(theta.data(), &[2.0 * 0.9, -4.0 * 0.9, 0.5 * 0.9]);
    }
}
