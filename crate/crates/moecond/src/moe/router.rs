//! Router: gate logits, biased selection scores, and per-token decisions.
//!
//! The bias vector participates in selection only. Gate weights always come
//! from the softmax of the unbiased logits over all n experts, with no
//! renormalization over the selected subset.

use crate::error::{Error, Result};
use crate::routing::top_k_unchecked;
use crate::tensor::{softmax, Matrix};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    /// d_model×n; logits are gateᵀ·x.
    pub gate: Matrix,
    /// Per-expert selection bias bᵢ, controller-updated, never loss-trained.
    pub bias: Vec<f64>,
}

impl RouterParams {
    pub fn randn(d_model: usize, n: usize, rng: &mut impl Rng) -> Self {
        Self {
            gate: Matrix::randn(d_model, n, 0.5 / (d_model as f64).sqrt(), rng),
            bias: vec![0.0; n],
        }
    }

    pub fn n_experts(&self) -> usize {
        self.gate.cols()
    }

    pub fn logits(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.gate.matmul_tn(x)?.data().to_vec())
    }
}

/// One token's routing outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision {
    /// Unbiased logits sᵢ.
    pub logits: Vec<f64>,
    /// Selection scores s̃ᵢ = sᵢ + bᵢ.
    pub biased: Vec<f64>,
    /// Gate weights wᵢ = softmax(s) over all n experts.
    pub weights: Vec<f64>,
    /// Active set S, ascending, |S| = k.
    pub selected: Vec<usize>,
    /// Condenser membership aligned with `selected`.
    pub is_condenser: Vec<bool>,
}

/// Forms the decision for one token: S = J ∪ TopK over the complement of J
/// on the biased scores, with gate weights from the unbiased softmax.
pub fn decide(logits: &[f64], bias: &[f64], k: usize, condensers: &[usize]) -> Result<RouterDecision> {
    let n = logits.len();
    if bias.len() != n {
        return Err(Error::State(format!("{} biases for {n} logits", bias.len())));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("activation budget {k} out of range for {n} experts")));
    }
    let r = condensers.len();
    if r > k {
        return Err(Error::Config(format!("condenser count {r} exceeds budget {k}")));
    }
    if condensers.windows(2).any(|w| w[0] >= w[1]) || condensers.iter().any(|&j| j >= n) {
        return Err(Error::State("condenser set must be sorted, unique, in range".into()));
    }
    if logits.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Eval("non-finite logit or bias".into()));
    }
    let biased: Vec<f64> = logits.iter().zip(bias).map(|(s, b)| s + b).collect();
    let mut selected: Vec<usize> = condensers.to_vec();
    selected.extend(top_k_unchecked(&biased, k - r, condensers));
    selected.sort_unstable();
    let is_condenser = selected.iter().map(|i| condensers.contains(i)).collect();
    Ok(RouterDecision {
        logits: logits.to_vec(),
        biased,
        weights: softmax(logits),
        selected,
        is_condenser,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_changes_selection_but_never_weights() {
        let s = [1.0, 1.0, 1.0, 1.0];
        let zero = decide(&s, &[0.0; 4], 2, &[]).unwrap();
        let skew = decide(&s, &[0.0, 0.0, 5.0, 5.0], 2, &[]).unwrap();
        assert_eq!(zero.weights, skew.weights);
        assert_eq!(zero.selected, vec![0, 1]);
        assert_eq!(skew.selected, vec![2, 3]);
    }

    #[test]
    fn forced_condenser_overrides_low_biased_score() {
        // J={0}, k=2, s̃=[−9, 5, 3, 4]: expert 0 is selected despite having
        // the lowest biased logit; the one remaining slot goes to the top
        // non-condenser score (index 1).
        let d = decide(&[-9.0, 5.0, 3.0, 4.0], &[0.0; 4], 2, &[0]).unwrap();
        assert_eq!(d.selected, vec![0, 1]);
        assert_eq!(d.is_condenser, vec![true, false]);
    }

    #[test]
    fn strongly_negative_bias_on_a_condenser_still_selects_it() {
        // J={0}, b=[−100,0,0,0], s=[1,1,1,1], k=2 → S={0,1}, w uniform.
        let d = decide(&[1.0; 4], &[-100.0, 0.0, 0.0, 0.0], 2, &[0]).unwrap();
        assert_eq!(d.selected, vec![0, 1]);
        for w in &d.weights {
            assert!((w - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn budget_and_condenser_validation() {
        assert!(decide(&[1.0, 2.0], &[0.0; 2], 3, &[]).is_err());
        assert!(decide(&[1.0, 2.0], &[0.0; 2], 1, &[0, 1]).is_err());
        assert!(decide(&[1.0, 2.0, 3.0], &[0.0; 3], 2, &[1, 0]).is_err());
    }
}
