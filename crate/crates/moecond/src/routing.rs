//! Routing policies: top-k selection, the three router-gradient regimes,
//! the auxiliary balancing loss, the bias controllers, and condenser
//! selection strategies.

use crate::error::{Error, Result};
use crate::moe::RouterDecision;
use crate::seed;
use crate::tensor::softmax_vjp;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

/// How router gradients are propagated through the non-differentiable
/// top-k selection. Fixed for a training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackwardRegime {
    /// Gradient flows only through the selected experts' gate weights.
    Masked,
    /// Straight-through: selection treated as identity, gradient flows to
    /// every expert's gate weight (requires a dense expert pass in backward).
    Ste,
    /// Masked rule with the condenser set always selected; biases are
    /// controller-updated, never loss-trained.
    Condenser,
}

impl fmt::Display for BackwardRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BackwardRegime::Masked => "masked",
            BackwardRegime::Ste => "ste",
            BackwardRegime::Condenser => "condenser",
        };
        f.write_str(s)
    }
}

impl FromStr for BackwardRegime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(BackwardRegime::Masked),
            "ste" => Ok(BackwardRegime::Ste),
            "condenser" => Ok(BackwardRegime::Condenser),
            other => Err(Error::Config(format!("unknown regime '{other}'"))),
        }
    }
}

fn check_finite(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Eval("non-finite score in top-k selection".into()));
    }
    Ok(())
}

/// Indices of the `k` largest scores, ties broken by lowest index.
/// Returned in ascending index order.
pub fn top_k_select(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!(
            "top-k budget {k} out of range for {} scores",
            scores.len()
        )));
    }
    check_finite(scores)?;
    Ok(top_k_unchecked(scores, k, &[]))
}

/// Top-k over indices not in `excluded` (both inputs validated by callers).
/// `k = 0` yields the empty set.
pub(crate) fn top_k_unchecked(scores: &[f64], k: usize, excluded: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len())
        .filter(|i| !excluded.contains(i))
        .collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Router gradient w.r.t. the unbiased logits, per regime.
///
/// `upstream` is ∂L/∂h at the layer output; `expert_outputs[i]` is expert
/// i's output vector (None when it was not computed). Masked regimes need
/// outputs for the selected experts only; STE needs all of them — the
/// dense backward pass.
pub fn backward_router(
    regime: BackwardRegime,
    decision: &RouterDecision,
    upstream: &[f64],
    expert_outputs: &[Option<Vec<f64>>],
) -> Result<Vec<f64>> {
    let n = decision.weights.len();
    if expert_outputs.len() != n {
        return Err(Error::State(format!(
            "{} expert outputs for {n} experts",
            expert_outputs.len()
        )));
    }
    let has_condensers = decision.is_condenser.iter().any(|&c| c);
    match regime {
        BackwardRegime::Masked | BackwardRegime::Ste => {
            if has_condensers {
                return Err(Error::State(
                    "decision carries condenser flags but regime has none".into(),
                ));
            }
        }
        BackwardRegime::Condenser => {}
    }
    let dot = |v: &[f64]| -> Result<f64> {
        if v.len() != upstream.len() {
            return Err(Error::dim("backward_router", "upstream/output length mismatch"));
        }
        Ok(v.iter().zip(upstream).map(|(a, b)| a * b).sum())
    };
    let mut dw = vec![0.0; n];
    match regime {
        BackwardRegime::Masked | BackwardRegime::Condenser => {
            for &i in &decision.selected {
                let v = expert_outputs[i].as_ref().ok_or_else(|| {
                    Error::State(format!("selected expert {i} has no recorded output"))
                })?;
                dw[i] = dot(v)?;
            }
        }
        BackwardRegime::Ste => {
            for (i, out) in expert_outputs.iter().enumerate() {
                let v = out.as_ref().ok_or_else(|| {
                    Error::State(format!("STE backward needs a dense pass; expert {i} missing"))
                })?;
                dw[i] = dot(v)?;
            }
        }
    }
    Ok(softmax_vjp(&decision.weights, &dw))
}

/// The auxiliary balancing loss L = α·Σᵢ fᵢ·Pᵢ over a window of tokens,
/// with fᵢ = (n/(K·T))·Σₜ 1[i selected] and Pᵢ the mean gate probability.
#[derive(Clone, Debug)]
pub struct AuxLoss {
    pub loss: f64,
    /// Normalized routing frequency fᵢ (piecewise constant, not differentiated).
    pub freq: Vec<f64>,
    /// Mean gate probability Pᵢ (the differentiable factor).
    pub mean_prob: Vec<f64>,
}

pub fn aux_balance_loss(decisions: &[RouterDecision], alpha: f64) -> Result<AuxLoss> {
    if decisions.is_empty() {
        return Err(Error::EmptyInput("aux_balance_loss needs at least one token"));
    }
    let n = decisions[0].weights.len();
    let k = decisions[0].selected.len();
    let t = decisions.len() as f64;
    let mut counts = vec![0u64; n];
    let mut mean_prob = vec![0.0; n];
    for d in decisions {
        if d.weights.len() != n || d.selected.len() != k {
            return Err(Error::State("inconsistent decisions in aux loss window".into()));
        }
        for &i in &d.selected {
            counts[i] += 1;
        }
        for (acc, w) in mean_prob.iter_mut().zip(&d.weights) {
            *acc += w / t;
        }
    }
    let freq: Vec<f64> = counts
        .iter()
        .map(|&c| (n as f64) * (c as f64) / (k as f64 * t))
        .collect();
    let loss = alpha * freq.iter().zip(&mean_prob).map(|(f, p)| f * p).sum::<f64>();
    Ok(AuxLoss { loss, freq, mean_prob })
}

/// Batch load counters feeding the per-step bias update (Appendix-style
/// controller: overloaded experts lose γ, underloaded gain γ).
#[derive(Clone, Debug)]
pub struct BiasControllerState {
    pub gamma: f64,
    /// Target share of token slots per expert, k/n.
    pub target_frac: f64,
    counts: Vec<u64>,
    tokens: u64,
}

impl BiasControllerState {
    pub fn new(n: usize, k: usize, gamma: f64) -> Result<Self> {
        if gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
        }
        if n == 0 || k == 0 || k > n {
            return Err(Error::Config(format!("invalid controller shape n={n}, k={k}")));
        }
        Ok(Self {
            gamma,
            target_frac: k as f64 / n as f64,
            counts: vec![0; n],
            tokens: 0,
        })
    }

    pub fn observe(&mut self, decision: &RouterDecision) {
        for &i in &decision.selected {
            self.counts[i] += 1;
        }
        self.tokens += 1;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn tokens(&self) -> u64 {
        self.tokens
    }

    /// Balancing update: bᵢ −= γ when overloaded, += γ when underloaded,
    /// unchanged at the exact target. Resets the step counters.
    pub fn bias_step(&mut self, bias: &mut [f64]) -> Result<()> {
        self.apply(bias, |load, target, b, gamma| {
            if load > target {
                b - gamma
            } else if load < target {
                b + gamma
            } else {
                b
            }
        })
    }

    /// Sparsifying update for fine-tuning: experts below half the uniform
    /// target accumulate −γ; the rest move up by γ but never above 0.
    pub fn sparsify_step(&mut self, bias: &mut [f64]) -> Result<()> {
        self.apply(bias, |load, target, b, gamma| {
            if load < 0.5 * target {
                b - gamma
            } else {
                (b + gamma).min(0.0)
            }
        })
    }

    fn apply(&mut self, bias: &mut [f64], rule: impl Fn(f64, f64, f64, f64) -> f64) -> Result<()> {
        if bias.len() != self.counts.len() {
            return Err(Error::State(format!(
                "controller tracks {} experts, bias has {}",
                self.counts.len(),
                bias.len()
            )));
        }
        let target = self.tokens as f64 * self.target_frac;
        for (b, &c) in bias.iter_mut().zip(&self.counts) {
            *b = rule(c as f64, target, *b, self.gamma);
        }
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.tokens = 0;
        Ok(())
    }
}

/// How the condenser set J is chosen at the warm-up boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CondenserStrategy {
    LowBias,
    HighBias,
    LowActivation,
    HighActivation,
    Random,
}

impl fmt::Display for CondenserStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CondenserStrategy::LowBias => "low-bias",
            CondenserStrategy::HighBias => "high-bias",
            CondenserStrategy::LowActivation => "low-activation",
            CondenserStrategy::HighActivation => "high-activation",
            CondenserStrategy::Random => "random",
        };
        f.write_str(s)
    }
}

impl FromStr for CondenserStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low-bias" => Ok(CondenserStrategy::LowBias),
            "high-bias" => Ok(CondenserStrategy::HighBias),
            "low-activation" => Ok(CondenserStrategy::LowActivation),
            "high-activation" => Ok(CondenserStrategy::HighActivation),
            "random" => Ok(CondenserStrategy::Random),
            other => Err(Error::Config(format!("unknown condenser strategy '{other}'"))),
        }
    }
}

/// Picks the condenser set J (returned in ascending index order).
///
/// `activation` holds per-expert activation fractions for the activation
/// strategies; `seed` drives the random strategy reproducibly.
pub fn select_condensers(
    bias: &[f64],
    activation: &[f64],
    r: usize,
    strategy: CondenserStrategy,
    seed_value: u64,
) -> Result<Vec<usize>> {
    let n = bias.len();
    if r > n {
        return Err(Error::Config(format!("condenser count {r} exceeds {n} experts")));
    }
    if r == 0 {
        return Ok(Vec::new());
    }
    if activation.len() != n {
        return Err(Error::State(format!(
            "{} activation stats for {n} experts",
            activation.len()
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let by_key = |idx: &mut Vec<usize>, key: &[f64], ascending: bool| {
        idx.sort_by(|&a, &b| {
            let ord = key[a].partial_cmp(&key[b]).unwrap_or(Ordering::Equal);
            let ord = if ascending { ord } else { ord.reverse() };
            ord.then(a.cmp(&b))
        });
    };
    match strategy {
        CondenserStrategy::LowBias => by_key(&mut idx, bias, true),
        CondenserStrategy::HighBias => by_key(&mut idx, bias, false),
        CondenserStrategy::LowActivation => by_key(&mut idx, activation, true),
        CondenserStrategy::HighActivation => by_key(&mut idx, activation, false),
        CondenserStrategy::Random => {
            let mut rng = seed::rng(seed_value, "condenser-select", 0);
            // Partial Fisher-Yates: the first r slots are a uniform sample.
            for i in 0..r.min(n.saturating_sub(1)) {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
            }
        }
    }
    idx.truncate(r);
    idx.sort_unstable();
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_basic_and_ties() {
        assert_eq!(top_k_select(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(top_k_select(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_select(&[5.0, -1.0, 0.0], 3).unwrap(), vec![0, 1, 2]);
        assert!(matches!(top_k_select(&[1.0], 2), Err(Error::Config(_))));
        assert!(matches!(top_k_select(&[1.0], 0), Err(Error::Config(_))));
    }

    #[test]
    fn aux_loss_matches_hand_computation() {
        // n=2, K=1, T=2, both tokens routed to expert 0, gate probs [0.8, 0.2].
        let d = |sel: usize| RouterDecision {
            logits: vec![0.0, 0.0],
            biased: vec![0.0, 0.0],
            weights: vec![0.8, 0.2],
            selected: vec![sel],
            is_condenser: vec![false],
        };
        let out = aux_balance_loss(&[d(0), d(0)], 1.0).unwrap();
        assert_eq!(out.freq, vec![2.0, 0.0]);
        assert!((out.mean_prob[0] - 0.8).abs() < 1e-15);
        assert!((out.loss - 1.6).abs() < 1e-12);
        // Zero alpha kills the loss but not the stats.
        let zero = aux_balance_loss(&[d(0), d(1)], 0.0).unwrap();
        assert_eq!(zero.loss, 0.0);
    }

    #[test]
    fn aux_loss_uniform_routing_reduces_to_alpha() {
        // Perfectly uniform routing and probs: fᵢ = 1 and ΣPᵢ = 1, so L = α.
        let d = |sel: usize| RouterDecision {
            logits: vec![0.0; 3],
            biased: vec![0.0; 3],
            weights: vec![1.0 / 3.0; 3],
            selected: vec![sel],
            is_condenser: vec![false],
        };
        let out = aux_balance_loss(&[d(0), d(1), d(2)], 0.7).unwrap();
        assert!((out.loss - 0.7).abs() < 1e-12);
    }

    #[test]
    fn bias_step_directions() {
        let mut st = BiasControllerState::new(2, 1, 1e-4).unwrap();
        let d = RouterDecision {
            logits: vec![0.0; 2],
            biased: vec![0.0; 2],
            weights: vec![0.5; 2],
            selected: vec![0],
            is_condenser: vec![false],
        };
        st.observe(&d);
        st.observe(&d);
        let mut bias = vec![0.0, 0.0];
        st.bias_step(&mut bias).unwrap();
        // Expert 0 took both slots (target 1.0 each): overloaded vs underloaded.
        assert_eq!(bias, vec![-1e-4, 1e-4]);
        assert_eq!(st.tokens(), 0);
    }

    #[test]
    fn bias_step_exact_target_is_a_fixed_point() {
        let mut st = BiasControllerState::new(4, 2, 1e-4).unwrap();
        for t in 0..8u64 {
            let sel = match t % 4 {
                0 => vec![0, 1],
                1 => vec![2, 3],
                2 => vec![0, 2],
                _ => vec![1, 3],
            };
            let k = sel.len();
            st.observe(&RouterDecision {
                logits: vec![0.0; 4],
                biased: vec![0.0; 4],
                weights: vec![0.25; 4],
                selected: sel,
                is_condenser: vec![false; k],
            });
        }
        let mut bias = vec![0.1, -0.2, 0.3, 0.0];
        let before = bias.clone();
        st.bias_step(&mut bias).unwrap();
        assert_eq!(bias, before);
    }

    #[test]
    fn sparsify_accumulates_and_caps() {
        let mut bias = vec![0.0, 0.0];
        let mut st = BiasControllerState::new(2, 1, 0.5).unwrap();
        for _ in 0..3 {
            for _ in 0..4 {
                st.observe(&RouterDecision {
                    logits: vec![0.0; 2],
                    biased: vec![0.0; 2],
                    weights: vec![0.5; 2],
                    selected: vec![0],
                    is_condenser: vec![false],
                });
            }
            st.sparsify_step(&mut bias).unwrap();
        }
        // Never-activated expert drops by E·γ; always-activated stays capped at 0.
        assert_eq!(bias[1], -1.5);
        assert_eq!(bias[0], 0.0);
    }

    #[test]
    fn condenser_selection_strategies() {
        let bias = [-3.0, -1.0, -2.0, 0.0];
        let act = [0.9, 0.1, 0.5, 0.2];
        assert_eq!(
            select_condensers(&bias, &act, 2, CondenserStrategy::LowBias, 0).unwrap(),
            vec![0, 2]
        );
        assert_eq!(
            select_condensers(&bias, &act, 2, CondenserStrategy::HighBias, 0).unwrap(),
            vec![1, 3]
        );
        assert_eq!(
            select_condensers(&bias, &act, 1, CondenserStrategy::HighActivation, 0).unwrap(),
            vec![0]
        );
        assert_eq!(
            select_condensers(&bias, &act, 0, CondenserStrategy::LowBias, 0).unwrap(),
            Vec::<usize>::new()
        );
        let r1 = select_condensers(&bias, &act, 2, CondenserStrategy::Random, 1234).unwrap();
        let r2 = select_condensers(&bias, &act, 2, CondenserStrategy::Random, 1234).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.len(), 2);
        assert!(matches!(
            select_condensers(&bias, &act, 5, CondenserStrategy::LowBias, 0),
            Err(Error::Config(_))
        ));
    }
}
