//! A small multi-layer network of MoE blocks with residual connections and
//! a linear readout, the unit that trainers, pruners, and analyses operate on.

use super::layer::{LayerNodeIds, MoEConfig, MoeLayer};
use super::router::RouterDecision;
use crate::error::{Error, Result};
use crate::routing::BackwardRegime;
use crate::tensor::{Matrix, NodeId, Tape, TapeGrads};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub moe: MoEConfig,
    pub layers: usize,
    pub d_out: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.moe.validate()?;
        if self.layers == 0 || self.d_out == 0 {
            return Err(Error::Config("model needs at least one layer and one output".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    pub cfg: ModelConfig,
    pub layers: Vec<MoeLayer>,
    /// d_model×d_out readout applied transposed.
    pub readout: Matrix,
}

/// Plain (untaped) forward results for one token.
pub struct ModelForward {
    pub output: Vec<f64>,
    /// One routing decision per layer.
    pub decisions: Vec<RouterDecision>,
    /// Each layer's MoE block output (pre-residual), for divergence analyses.
    pub layer_outputs: Vec<Vec<f64>>,
}

pub struct ModelBinding {
    pub layers: Vec<LayerNodeIds>,
    pub readout: NodeId,
}

pub struct TapedModelOut {
    pub output: NodeId,
    /// Per-layer full gate-weight nodes (for auxiliary-loss seeding).
    pub weight_nodes: Vec<NodeId>,
    pub decisions: Vec<RouterDecision>,
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub experts: Vec<(Matrix, Matrix)>,
    pub shared: Vec<(Matrix, Matrix)>,
    pub gate: Matrix,
}

/// Gradient (or moment) storage mirroring the model's parameter layout.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
    pub readout: Matrix,
}

impl MoeModel {
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers).map(|_| MoeLayer::init(&cfg.moe, rng)).collect();
        let readout = Matrix::randn(
            cfg.moe.d_model,
            cfg.d_out,
            1.0 / (cfg.moe.d_model as f64).sqrt(),
            rng,
        );
        Ok(Self { cfg, layers, readout })
    }

    fn active_condensers(layer: &MoeLayer, regime: BackwardRegime, demote: bool) -> &[usize] {
        if demote || regime != BackwardRegime::Condenser {
            &[]
        } else {
            &layer.condensers
        }
    }

    /// Plain forward. Condensers are honored when the layer has them;
    /// `demote_condensers` reroutes them as ordinary top-k candidates.
    pub fn forward(&self, x: &[f64], demote_condensers: bool) -> Result<ModelForward> {
        if x.len() != self.cfg.moe.d_model {
            return Err(Error::dim(
                "model_forward",
                format!("token length {} vs d_model {}", x.len(), self.cfg.moe.d_model),
            ));
        }
        let mut h = Matrix::col(x.to_vec());
        let mut decisions = Vec::with_capacity(self.layers.len());
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let j: &[usize] = if demote_condensers { &[] } else { &layer.condensers };
            let (out, d) = layer.forward_with(&self.cfg.moe, &h, j)?;
            decisions.push(d);
            layer_outputs.push(out.data().to_vec());
            h = h.add(&out)?;
        }
        let y = self.readout.matmul_tn(&h)?;
        Ok(ModelForward {
            output: y.data().to_vec(),
            decisions,
            layer_outputs,
        })
    }

    /// Binds every trainable parameter as a tape leaf, in a fixed order.
    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        ModelBinding {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            readout: tape.leaf(self.readout.clone()),
        }
    }

    /// Records a full forward pass for one token on the tape.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        binding: &ModelBinding,
        x: &[f64],
        regime: BackwardRegime,
        demote_condensers: bool,
    ) -> Result<TapedModelOut> {
        let mut h = tape.leaf(Matrix::col(x.to_vec()));
        let mut weight_nodes = Vec::with_capacity(self.layers.len());
        let mut decisions = Vec::with_capacity(self.layers.len());
        for (layer, ids) in self.layers.iter().zip(&binding.layers) {
            let j = Self::active_condensers(layer, regime, demote_condensers).to_vec();
            let out = layer.forward_taped(&self.cfg.moe, tape, ids, h, regime, &j)?;
            weight_nodes.push(out.weights);
            decisions.push(out.decision);
            h = tape.add(h, out.out)?;
        }
        let output = tape.matmul_tn(binding.readout, h)?;
        Ok(TapedModelOut {
            output,
            weight_nodes,
            decisions,
        })
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrads {
                    experts: l
                        .experts
                        .iter()
                        .map(|e| (
                            Matrix::zeros(e.up.rows(), e.up.cols()),
                            Matrix::zeros(e.down.rows(), e.down.cols()),
                        ))
                        .collect(),
                    shared: l
                        .shared
                        .iter()
                        .map(|e| (
                            Matrix::zeros(e.up.rows(), e.up.cols()),
                            Matrix::zeros(e.down.rows(), e.down.cols()),
                        ))
                        .collect(),
                    gate: Matrix::zeros(l.router.gate.rows(), l.router.gate.cols()),
                })
                .collect(),
            readout: Matrix::zeros(self.readout.rows(), self.readout.cols()),
        }
    }

    /// Extracts this model's parameter gradients from a finished backward pass.
    pub fn grads_from(&self, tape_grads: &TapeGrads, binding: &ModelBinding) -> ModelGrads {
        let pull = |id: NodeId, like: &Matrix| tape_grads.get_or_zeros(id, like.rows(), like.cols());
        ModelGrads {
            layers: self
                .layers
                .iter()
                .zip(&binding.layers)
                .map(|(l, ids)| LayerGrads {
                    experts: l
                        .experts
                        .iter()
                        .zip(&ids.experts)
                        .map(|(e, &(u, d))| (pull(u, &e.up), pull(d, &e.down)))
                        .collect(),
                    shared: l
                        .shared
                        .iter()
                        .zip(&ids.shared)
                        .map(|(e, &(u, d))| (pull(u, &e.up), pull(d, &e.down)))
                        .collect(),
                    gate: pull(ids.gate, &l.router.gate),
                })
                .collect(),
            readout: pull(binding.readout, &self.readout),
        }
    }
}

impl ModelGrads {
    pub fn add_in_place(&mut self, other: &ModelGrads) -> Result<()> {
        self.zip_mut(other, |a, b| a.add_scaled_in_place(b, 1.0))
    }

    pub fn scale_in_place(&mut self, c: f64) {
        let _ = self.map_mut(|m| {
            *m = m.scale(c);
            Ok(())
        });
    }

    pub fn map_mut(&mut self, mut f: impl FnMut(&mut Matrix) -> Result<()>) -> Result<()> {
        for l in &mut self.layers {
            for (u, d) in &mut l.experts {
                f(u)?;
                f(d)?;
            }
            for (u, d) in &mut l.shared {
                f(u)?;
                f(d)?;
            }
            f(&mut l.gate)?;
        }
        f(&mut self.readout)
    }

    pub fn zip_mut(
        &mut self,
        other: &ModelGrads,
        mut f: impl FnMut(&mut Matrix, &Matrix) -> Result<()>,
    ) -> Result<()> {
        for (l, ol) in self.layers.iter_mut().zip(&other.layers) {
            for ((u, d), (ou, od)) in l.experts.iter_mut().zip(&ol.experts) {
                f(u, ou)?;
                f(d, od)?;
            }
            for ((u, d), (ou, od)) in l.shared.iter_mut().zip(&ol.shared) {
                f(u, ou)?;
                f(d, od)?;
            }
            f(&mut l.gate, &ol.gate)?;
        }
        f(&mut self.readout, &other.readout)
    }

    /// ℓ2 norm over each routed expert's FFN parameters, per layer.
    pub fn expert_grad_norms(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| {
                l.experts
                    .iter()
                    .map(|(u, d)| (u.sq_norm() + d.sq_norm()).sqrt())
                    .collect()
            })
            .collect()
    }
}

/// Applies `f` to every (parameter, companion) pair in the fixed traversal
/// order shared by bindings and gradient stores.
pub fn for_each_param_pair(
    model: &mut MoeModel,
    grads: &ModelGrads,
    mut f: impl FnMut(&mut Matrix, &Matrix) -> Result<()>,
) -> Result<()> {
    for (layer, lg) in model.layers.iter_mut().zip(&grads.layers) {
        for (e, (gu, gd)) in layer.experts.iter_mut().zip(&lg.experts) {
            f(&mut e.up, gu)?;
            f(&mut e.down, gd)?;
        }
        for (e, (gu, gd)) in layer.shared.iter_mut().zip(&lg.shared) {
            f(&mut e.up, gu)?;
            f(&mut e.down, gd)?;
        }
        f(&mut layer.router.gate, &lg.gate)?;
    }
    f(&mut model.readout, &grads.readout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    pub(crate) fn small_model(seed_val: u64, layers: usize, r: usize) -> MoeModel {
        let cfg = ModelConfig {
            moe: MoEConfig {
                n: 4,
                k: 2,
                r,
                n_shared: 1,
                d_model: 6,
                d_hidden: 4,
            },
            layers,
            d_out: 3,
        };
        let mut rng = seed::rng(seed_val, "init", 0);
        MoeModel::init(cfg, &mut rng).unwrap()
    }

    #[test]
    fn forward_shapes_and_budget() {
        let m = small_model(1, 2, 0);
        let x: Vec<f64> = (0..6).map(|i| 0.1 * i as f64).collect();
        let f = m.forward(&x, false).unwrap();
        assert_eq!(f.output.len(), 3);
        assert_eq!(f.decisions.len(), 2);
        for d in &f.decisions {
            assert_eq!(d.selected.len(), 2);
        }
    }

    #[test]
    fn taped_forward_matches_plain() {
        let mut m = small_model(2, 2, 1);
        m.layers[0].condensers = vec![3];
        m.layers[1].condensers = vec![0];
        let x: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
        let plain = m.forward(&x, false).unwrap();
        let mut tape = Tape::new();
        let binding = m.bind(&mut tape);
        let taped = m
            .forward_taped(&mut tape, &binding, &x, BackwardRegime::Condenser, false)
            .unwrap();
        let out = tape.value(taped.output).data();
        for (a, b) in out.iter().zip(&plain.output) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(taped.decisions[0].selected, plain.decisions[0].selected);
    }

    #[test]
    fn condenser_persistence_across_tokens() {
        let mut m = small_model(3, 2, 2);
        m.layers[0].condensers = vec![1, 2];
        m.layers[1].condensers = vec![0, 3];
        for t in 0..50 {
            let mut rng = seed::rng(3, "tok", t);
            let x = Matrix::randn(6, 1, 1.0, &mut rng);
            let f = m.forward(x.data(), false).unwrap();
            for (l, d) in f.decisions.iter().enumerate() {
                for j in &m.layers[l].condensers {
                    assert!(d.selected.contains(j), "J ⊆ S violated at layer {l}");
                }
            }
        }
    }
}
