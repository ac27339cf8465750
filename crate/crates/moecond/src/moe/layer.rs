//! One MoE feed-forward layer: routed experts, static shared experts, and
//! the two forward formulations (standard sparse and condenser-augmented).

use super::expert::{expert_forward_taped, ExpertParams};
use super::router::{decide, RouterDecision, RouterParams};
use crate::error::{Error, Result};
use crate::routing::BackwardRegime;
use crate::tensor::{BackwardCtx, CustomBackward, Matrix, NodeId, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoEConfig {
    /// Routed expert count.
    pub n: usize,
    /// Activation budget per token.
    pub k: usize,
    /// Condenser count (0 ≤ r ≤ k).
    pub r: usize,
    /// Static shared expert count n̂.
    pub n_shared: usize,
    pub d_model: usize,
    pub d_hidden: usize,
}

impl MoEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.k > self.n {
            return Err(Error::Config(format!(
                "need 1 <= k <= n, got k={}, n={}",
                self.k, self.n
            )));
        }
        if self.r > self.k {
            return Err(Error::Config(format!("need r <= k, got r={}, k={}", self.r, self.k)));
        }
        if self.d_model == 0 || self.d_hidden == 0 {
            return Err(Error::Config("zero layer width".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeLayer {
    pub experts: Vec<ExpertParams>,
    pub shared: Vec<ExpertParams>,
    pub router: RouterParams,
    /// Condenser set J, ascending; empty until selected.
    pub condensers: Vec<usize>,
}

impl MoeLayer {
    pub fn init(cfg: &MoEConfig, rng: &mut impl Rng) -> Self {
        Self {
            experts: (0..cfg.n)
                .map(|_| ExpertParams::randn(cfg.d_model, cfg.d_hidden, rng))
                .collect(),
            shared: (0..cfg.n_shared)
                .map(|_| ExpertParams::randn(cfg.d_model, cfg.d_hidden, rng))
                .collect(),
            router: RouterParams::randn(cfg.d_model, cfg.n, rng),
            condensers: Vec::new(),
        }
    }

    /// Standard sparse forward (no condensers): S = TopK over s̃, output
    /// Σ_{i∈S} wᵢ·Eᵢ(x) + Σ shared.
    pub fn forward_standard(&self, cfg: &MoEConfig, x: &Matrix) -> Result<(Matrix, RouterDecision)> {
        if cfg.r != 0 {
            return Err(Error::Config(format!("standard forward requires r = 0, got r={}", cfg.r)));
        }
        self.forward_inner(cfg, x, &[])
    }

    /// Condenser-augmented forward: S = J ∪ TopK over the complement,
    /// condensers gated by the same unbiased softmax as routed experts.
    pub fn forward_condenser(&self, cfg: &MoEConfig, x: &Matrix) -> Result<(Matrix, RouterDecision)> {
        if self.condensers.len() != cfg.r {
            return Err(Error::State(format!(
                "layer has {} condensers, config says r={}",
                self.condensers.len(),
                cfg.r
            )));
        }
        self.forward_inner(cfg, x, &self.condensers.clone())
    }

    /// Forward with an explicit condenser set (empty to demote them).
    pub fn forward_with(&self, cfg: &MoEConfig, x: &Matrix, condensers: &[usize]) -> Result<(Matrix, RouterDecision)> {
        self.forward_inner(cfg, x, condensers)
    }

    fn forward_inner(&self, cfg: &MoEConfig, x: &Matrix, condensers: &[usize]) -> Result<(Matrix, RouterDecision)> {
        let s = self.router.logits(x)?;
        let d = decide(&s, &self.router.bias, cfg.k, condensers)?;
        let mut h = Matrix::zeros(cfg.d_model, 1);
        for &i in &d.selected {
            let v = self.experts[i].forward(x)?;
            h.add_scaled_in_place(&v, d.weights[i])?;
        }
        for sh in &self.shared {
            // Static shared experts contribute with weight exactly 1.
            h.add_scaled_in_place(&sh.forward(x)?, 1.0)?;
        }
        Ok((h, d))
    }
}

/// Tape node ids for one layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerNodeIds {
    pub experts: Vec<(NodeId, NodeId)>,
    pub shared: Vec<(NodeId, NodeId)>,
    pub gate: NodeId,
}

pub struct TapedLayerOut {
    pub out: NodeId,
    /// The full n-way gate-weight node (softmax of unbiased logits).
    pub weights: NodeId,
    pub decision: RouterDecision,
}

/// Backward rule for the gated top-k combine h = Σ_{i∈S} wᵢ·vᵢ.
///
/// Selected expert outputs receive wᵢ·g. The gate-weight vector receives
/// ⟨g, vᵢ⟩ on the selected entries; under the straight-through rule it
/// receives ⟨g, vᵢ⟩ on every entry, with the unselected experts' outputs
/// recomputed densely here rather than cached at forward time.
struct RouterCombine {
    weights: NodeId,
    selected: Vec<(usize, NodeId)>,
    dense: Option<DenseBackward>,
}

struct DenseBackward {
    expert_params: Vec<(NodeId, NodeId)>,
    input: NodeId,
}

impl CustomBackward for RouterCombine {
    fn backward(&self, upstream: &Matrix, ctx: &mut BackwardCtx<'_>) -> Result<()> {
        let w = ctx.value(self.weights).data().to_vec();
        let mut dw = vec![0.0; w.len()];
        for &(i, vnode) in &self.selected {
            let v = ctx.value(vnode).clone();
            dw[i] = upstream.dot(&v)?;
            ctx.accumulate(vnode, upstream.scale(w[i]))?;
        }
        if let Some(dense) = &self.dense {
            for (i, &(up, down)) in dense.expert_params.iter().enumerate() {
                if self.selected.iter().any(|&(j, _)| j == i) {
                    continue;
                }
                let v = {
                    let z = ctx.value(up).matmul_tn(ctx.value(dense.input))?;
                    ctx.value(down).matmul_tn(&z.map(crate::tensor::silu))?
                };
                // Gate-weight gradient only; the forward output never
                // depended on these experts' parameters.
                dw[i] = upstream.dot(&v)?;
            }
        }
        ctx.accumulate(self.weights, Matrix::col(dw))
    }
}

impl MoeLayer {
    /// Records the layer forward on a tape. `condensers` is the active J
    /// (empty for standard routing or when demoted).
    pub fn forward_taped(
        &self,
        cfg: &MoEConfig,
        tape: &mut Tape,
        ids: &LayerNodeIds,
        x: NodeId,
        regime: BackwardRegime,
        condensers: &[usize],
    ) -> Result<TapedLayerOut> {
        let logits = tape.matmul_tn(ids.gate, x)?;
        let weights = tape.softmax(logits)?;
        let decision = decide(tape.value(logits).data(), &self.router.bias, cfg.k, condensers)?;

        let mut selected_nodes = Vec::with_capacity(decision.selected.len());
        let mut combined = Matrix::zeros(cfg.d_model, 1);
        for &i in &decision.selected {
            let (up, down) = ids.experts[i];
            let v = expert_forward_taped(tape, up, down, x)?;
            combined.add_scaled_in_place(tape.value(v), decision.weights[i])?;
            selected_nodes.push((i, v));
        }
        let dense = match regime {
            BackwardRegime::Ste => Some(DenseBackward {
                expert_params: ids.experts.clone(),
                input: x,
            }),
            BackwardRegime::Masked | BackwardRegime::Condenser => None,
        };
        let mut out = tape.custom(
            combined,
            Box::new(RouterCombine {
                weights,
                selected: selected_nodes,
                dense,
            }),
        );
        for (s, _) in ids.shared.iter().enumerate() {
            let (up, down) = ids.shared[s];
            let sh = expert_forward_taped(tape, up, down, x)?;
            out = tape.add(out, sh)?;
        }
        Ok(TapedLayerOut {
            out,
            weights,
            decision,
        })
    }

    /// Binds this layer's trainable parameters as tape leaves.
    pub fn bind(&self, tape: &mut Tape) -> LayerNodeIds {
        LayerNodeIds {
            experts: self
                .experts
                .iter()
                .map(|e| (tape.leaf(e.up.clone()), tape.leaf(e.down.clone())))
                .collect(),
            shared: self
                .shared
                .iter()
                .map(|e| (tape.leaf(e.up.clone()), tape.leaf(e.down.clone())))
                .collect(),
            gate: tape.leaf(self.router.gate.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn cfg(n: usize, k: usize, r: usize, n_shared: usize) -> MoEConfig {
        MoEConfig {
            n,
            k,
            r,
            n_shared,
            d_model: 6,
            d_hidden: 4,
        }
    }

    #[test]
    fn single_expert_gets_full_weight() {
        let c = cfg(1, 1, 0, 0);
        let mut rng = seed::rng(11, "t", 0);
        let layer = MoeLayer::init(&c, &mut rng);
        let x = Matrix::randn(6, 1, 1.0, &mut rng);
        let (h, d) = layer.forward_standard(&c, &x).unwrap();
        assert_eq!(d.weights, vec![1.0]);
        let direct = layer.experts[0].forward(&x).unwrap();
        for (a, b) in h.data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_logits_average_two_experts() {
        let c = cfg(2, 2, 0, 0);
        let mut rng = seed::rng(12, "t", 0);
        let mut layer = MoeLayer::init(&c, &mut rng);
        // Zero gate: s = [0,0] for any token, so w = [0.5, 0.5].
        layer.router.gate = Matrix::zeros(6, 2);
        let x = Matrix::randn(6, 1, 1.0, &mut rng);
        let (h, d) = layer.forward_standard(&c, &x).unwrap();
        assert_eq!(d.weights, vec![0.5, 0.5]);
        let e0 = layer.experts[0].forward(&x).unwrap();
        let e1 = layer.experts[1].forward(&x).unwrap();
        for i in 0..6 {
            let expect = 0.5 * e0.data()[i] + 0.5 * e1.data()[i];
            assert!((h.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_sum_matches_independent_arithmetic() {
        let c = cfg(4, 2, 0, 1);
        let mut rng = seed::rng(13, "t", 0);
        let layer = MoeLayer::init(&c, &mut rng);
        let x = Matrix::randn(6, 1, 1.0, &mut rng);
        let (h, d) = layer.forward_standard(&c, &x).unwrap();
        let mut expect = vec![0.0; 6];
        for &i in &d.selected {
            let v = layer.experts[i].forward(&x).unwrap();
            for (e, vv) in expect.iter_mut().zip(v.data()) {
                *e += d.weights[i] * vv;
            }
        }
        let sh = layer.shared[0].forward(&x).unwrap();
        for (e, s) in expect.iter_mut().zip(sh.data()) {
            *e += s;
        }
        for (a, b) in h.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn full_selection_equals_dense_mixture() {
        // r = k = n: every expert is a condenser; output is the dense mixture.
        let c = cfg(3, 3, 3, 1);
        let mut rng = seed::rng(14, "t", 0);
        let mut layer = MoeLayer::init(&c, &mut rng);
        layer.condensers = vec![0, 1, 2];
        let x = Matrix::randn(6, 1, 1.0, &mut rng);
        let (h, d) = layer.forward_condenser(&c, &x).unwrap();
        assert_eq!(d.selected, vec![0, 1, 2]);
        let mut expect = layer.shared[0].forward(&x).unwrap();
        for i in 0..3 {
            // Prepend routed contributions in the same order as the layer.
            let _ = i;
        }
        let mut routed = Matrix::zeros(6, 1);
        for i in 0..3 {
            routed
                .add_scaled_in_place(&layer.experts[i].forward(&x).unwrap(), d.weights[i])
                .unwrap();
        }
        expect = routed.add(&expect).unwrap();
        for (a, b) in h.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn degenerate_condenser_forward_is_bitwise_standard() {
        let c = cfg(5, 2, 0, 1);
        let mut rng = seed::rng(15, "t", 0);
        let layer = MoeLayer::init(&c, &mut rng);
        for t in 0..20 {
            let x = Matrix::randn(6, 1, 1.0, &mut seed::rng(15, "x", t));
            let (a, da) = layer.forward_standard(&c, &x).unwrap();
            let (b, db) = layer.forward_condenser(&c, &x).unwrap();
            let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a), bits(&b));
            assert_eq!(da.selected, db.selected);
        }
    }

    #[test]
    fn taped_forward_value_matches_plain_bitwise() {
        let c = cfg(4, 2, 1, 1);
        let mut rng = seed::rng(16, "t", 0);
        let mut layer = MoeLayer::init(&c, &mut rng);
        layer.condensers = vec![2];
        let x = Matrix::randn(6, 1, 1.0, &mut rng);
        let (plain, _) = layer.forward_condenser(&c, &x).unwrap();
        let mut tape = Tape::new();
        let ids = layer.bind(&mut tape);
        let xn = tape.leaf(x.clone());
        let out = layer
            .forward_taped(&c, &mut tape, &ids, xn, BackwardRegime::Condenser, &[2])
            .unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&plain), bits(tape.value(out.out)));
    }

    #[test]
    fn dense_limit_output_independent_of_bias() {
        let c = cfg(4, 4, 0, 0);
        let mut rng = seed::rng(17, "t", 0);
        let mut layer = MoeLayer::init(&c, &mut rng);
        let x = Matrix::randn(6, 1, 1.0, &mut rng);
        let (a, _) = layer.forward_standard(&c, &x).unwrap();
        layer.router.bias = vec![5.0, -3.0, 0.25, 100.0];
        let (b, _) = layer.forward_standard(&c, &x).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
