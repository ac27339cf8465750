//! Post-hoc diagnostics: routing divergences, activation inequality, and
//! parameter-correlation shifts between checkpoints.

use crate::error::{Error, Result};
use crate::moe::MoeModel;
use crate::parallel::par_collect;
use crate::task::Batch;
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Per-layer, per-expert activation counts over an evaluation corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActivationStats {
    /// counts[layer][expert]
    pub counts: Vec<Vec<u64>>,
    pub tokens: usize,
    pub k: usize,
}

impl ActivationStats {
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|l| l.iter().map(|&c| c as f64 / self.tokens as f64).collect())
            .collect()
    }
}

/// Counts i ∈ S(x_t) per layer per expert over the corpus.
pub fn activation_histogram(model: &MoeModel, corpus: &Batch) -> Result<ActivationStats> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("activation histogram corpus"));
    }
    let per_token: Vec<Result<Vec<Vec<usize>>>> = par_collect(corpus.len(), |t| {
        let f = model.forward(corpus.input_row(t), false)?;
        Ok(f.decisions.iter().map(|d| d.selected.clone()).collect())
    });
    let mut counts = vec![vec![0u64; model.cfg.moe.n]; model.layers.len()];
    for tok in per_token {
        for (l, sel) in tok?.iter().enumerate() {
            for &i in sel {
                counts[l][i] += 1;
            }
        }
    }
    Ok(ActivationStats {
        counts,
        tokens: corpus.len(),
        k: model.cfg.moe.k,
    })
}

/// KL(p ‖ q) for strictly positive distributions.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("kl_divergence", "length mismatch"));
    }
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(q) {
        if *a < 0.0 || *b <= 0.0 {
            return Err(Error::Eval("KL needs p >= 0 and q > 0".into()));
        }
        if *a > 0.0 {
            acc += a * (a / b).ln();
        }
    }
    Ok(acc)
}

/// Per-layer mean over tokens of KL(w_base ‖ w_tuned), each model routing
/// the same input tokens through its own forward pass.
pub fn router_kl(base: &MoeModel, tuned: &MoeModel, tokens: &Batch) -> Result<Vec<f64>> {
    if base.cfg.moe.n != tuned.cfg.moe.n || base.layers.len() != tuned.layers.len() {
        return Err(Error::State("router KL needs matching expert pools and depth".into()));
    }
    if tokens.is_empty() {
        return Err(Error::EmptyInput("router KL token set"));
    }
    let per_token: Vec<Result<Vec<f64>>> = par_collect(tokens.len(), |t| {
        let x = tokens.input_row(t);
        let fb = base.forward(x, false)?;
        let ft = tuned.forward(x, false)?;
        fb.decisions
            .iter()
            .zip(&ft.decisions)
            .map(|(db, dt)| kl_divergence(&db.weights, &dt.weights))
            .collect()
    });
    mean_over_tokens(per_token, base.layers.len(), tokens.len())
}

/// Per-layer mean over tokens of ‖h_base − h_tuned‖ / (‖h_base‖ + 1e−8),
/// each h the layer's MoE block output under its own model's routing.
pub fn weighted_output_divergence(base: &MoeModel, tuned: &MoeModel, tokens: &Batch) -> Result<Vec<f64>> {
    if base.layers.len() != tuned.layers.len() {
        return Err(Error::State("divergence needs matching depth".into()));
    }
    if tokens.is_empty() {
        return Err(Error::EmptyInput("divergence token set"));
    }
    let per_token: Vec<Result<Vec<f64>>> = par_collect(tokens.len(), |t| {
        let x = tokens.input_row(t);
        let fb = base.forward(x, false)?;
        let ft = tuned.forward(x, false)?;
        Ok(fb
            .layer_outputs
            .iter()
            .zip(&ft.layer_outputs)
            .map(|(hb, ht)| {
                let diff: f64 = hb
                    .iter()
                    .zip(ht)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let norm: f64 = hb.iter().map(|a| a * a).sum::<f64>().sqrt();
                diff / (norm + 1e-8)
            })
            .collect())
    });
    mean_over_tokens(per_token, base.layers.len(), tokens.len())
}

fn mean_over_tokens(
    per_token: Vec<Result<Vec<f64>>>,
    layers: usize,
    tokens: usize,
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; layers];
    for tok in per_token {
        for (a, v) in acc.iter_mut().zip(tok?) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= tokens as f64);
    Ok(acc)
}

/// Lorenz curve points (cumulative shares after ascending sort) and the
/// Gini coefficient Σᵢⱼ|xᵢ−xⱼ| / (2n²μ).
pub fn lorenz_gini(values: &[f64]) -> Result<(Vec<(f64, f64)>, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput("lorenz_gini"));
    }
    if values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::Eval("activation values must be finite and >= 0".into()));
    }
    let total: f64 = values.iter().sum();
    if total == 0.0 {
        return Err(Error::Eval("Gini undefined for all-zero values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut points = Vec::with_capacity(sorted.len() + 1);
    points.push((0.0, 0.0));
    let mut cum = 0.0;
    let mut weighted = 0.0;
    for (i, v) in sorted.iter().enumerate() {
        cum += v;
        weighted += (i as f64 + 1.0) * v;
        points.push(((i as f64 + 1.0) / n, cum / total));
    }
    // Sorted prefix form of the pairwise mean absolute difference.
    let gini = (2.0 * weighted - (n + 1.0) * total) / (n * total);
    Ok((points, gini))
}

/// Pearson correlation of mean-centered vectorized matrices; None when a
/// side has zero variance.
pub fn pearson_centered(a: &Matrix, b: &Matrix) -> Result<Option<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::dim("pearson_centered", "shape mismatch"));
    }
    let center = |m: &Matrix| {
        let mean = m.sum() / m.len() as f64;
        m.map(|v| v - mean)
    };
    let ca = center(a);
    let cb = center(b);
    let (na, nb) = (ca.frob_norm(), cb.frob_norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some(ca.dot(&cb)? / (na * nb)))
}

/// Which expert's down-projection a correlation pair refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpertRef {
    Routed(usize),
    Shared(usize),
}

impl std::fmt::Display for ExpertRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExpertRef::Routed(i) => write!(f, "routed{i}"),
            ExpertRef::Shared(i) => write!(f, "shared{i}"),
        }
    }
}

fn down_of<'m>(model: &'m MoeModel, layer: usize, e: ExpertRef) -> Result<&'m Matrix> {
    let l = model
        .layers
        .get(layer)
        .ok_or_else(|| Error::State(format!("layer {layer} out of range")))?;
    match e {
        ExpertRef::Routed(i) => l
            .experts
            .get(i)
            .map(|x| &x.down)
            .ok_or_else(|| Error::State(format!("routed expert {i} out of range"))),
        ExpertRef::Shared(i) => l
            .shared
            .get(i)
            .map(|x| &x.down)
            .ok_or_else(|| Error::State(format!("shared expert {i} out of range"))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairCorrelation {
    pub layer: usize,
    pub anchor: ExpertRef,
    pub routed: usize,
    pub base: Option<f64>,
    pub tuned: Option<f64>,
    /// 100·(tuned − base)/|base|; None when either side is missing or the
    /// base correlation is exactly zero.
    pub pct_gain: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pairs: Vec<PairCorrelation>,
    /// Mean percent gain per layer over defined pairs.
    pub layer_mean_pct: Vec<Option<f64>>,
    /// Mean of the per-layer means.
    pub model_mean_pct: Option<f64>,
    /// Std of the per-layer means.
    pub model_std_pct: Option<f64>,
}

/// Pearson correlations between anchor (shared/condenser) and routed
/// experts' down-projections, in the base vs. the tuned checkpoint, with
/// percent gains aggregated per layer and over the model.
pub fn correlation_report(
    base: &MoeModel,
    tuned: &MoeModel,
    anchors: &[ExpertRef],
    routed: &[usize],
) -> Result<CorrelationReport> {
    if base.layers.len() != tuned.layers.len() {
        return Err(Error::State("correlation needs matching depth".into()));
    }
    if anchors.is_empty() || routed.is_empty() {
        return Err(Error::EmptyInput("correlation expert sets"));
    }
    let mut pairs = Vec::new();
    let mut layer_mean_pct = Vec::with_capacity(base.layers.len());
    for l in 0..base.layers.len() {
        let mut gains = Vec::new();
        for &a in anchors {
            for &j in routed {
                if matches!(a, ExpertRef::Routed(i) if i == j) {
                    continue;
                }
                let cb = pearson_centered(down_of(base, l, a)?, down_of(base, l, ExpertRef::Routed(j))?)?;
                let ct = pearson_centered(down_of(tuned, l, a)?, down_of(tuned, l, ExpertRef::Routed(j))?)?;
                let pct = match (cb, ct) {
                    (Some(b), Some(t)) if b != 0.0 => Some(100.0 * (t - b) / b.abs()),
                    _ => None,
                };
                if let Some(g) = pct {
                    gains.push(g);
                }
                pairs.push(PairCorrelation {
                    layer: l,
                    anchor: a,
                    routed: j,
                    base: cb,
                    tuned: ct,
                    pct_gain: pct,
                });
            }
        }
        layer_mean_pct.push(if gains.is_empty() {
            None
        } else {
            Some(gains.iter().sum::<f64>() / gains.len() as f64)
        });
    }
    let defined: Vec<f64> = layer_mean_pct.iter().flatten().copied().collect();
    let (model_mean_pct, model_std_pct) = if defined.is_empty() {
        (None, None)
    } else {
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / defined.len() as f64;
        (Some(mean), Some(var.sqrt()))
    };
    Ok(CorrelationReport {
        pairs,
        layer_mean_pct,
        model_mean_pct,
        model_std_pct,
    })
}

// ───────────────────────── CSV writers ─────────────────────────

pub fn metric_layer_csv(metric: &str, per_layer: &[f64]) -> String {
    let mut out = String::from("metric,layer,value\n");
    for (l, v) in per_layer.iter().enumerate() {
        let _ = writeln!(out, "{metric},{l},{v}");
    }
    out
}

pub fn lorenz_points_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("cum_expert_frac,cum_activation_frac\n");
    for (x, y) in points {
        let _ = writeln!(out, "{x},{y}");
    }
    out
}

pub fn activation_counts_csv(stats: &ActivationStats) -> String {
    let mut out = String::from("layer,expert,count,probability\n");
    for (l, layer) in stats.counts.iter().enumerate() {
        for (e, &c) in layer.iter().enumerate() {
            let _ = writeln!(out, "{l},{e},{c},{}", c as f64 / stats.tokens as f64);
        }
    }
    out
}

pub fn correlation_csv(report: &CorrelationReport) -> String {
    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "missing".into());
    let mut out = String::from("layer,anchor,routed,base_corr,tuned_corr,pct_gain\n");
    for p in &report.pairs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.layer,
            p.anchor,
            p.routed,
            fmt_opt(p.base),
            fmt_opt(p.tuned),
            fmt_opt(p.pct_gain)
        );
    }
    for (l, m) in report.layer_mean_pct.iter().enumerate() {
        let _ = writeln!(out, "{l},layer_mean,,,,{}", fmt_opt(*m));
    }
    let _ = writeln!(out, "all,model_mean,,,,{}", fmt_opt(report.model_mean_pct));
    let _ = writeln!(out, "all,model_std,,,,{}", fmt_opt(report.model_std_pct));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let v = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.5108).abs() < 1e-4);
        assert!(v >= 0.0);
    }

    #[test]
    fn gini_hand_values() {
        let (_, g) = lorenz_gini(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(g.abs() < 1e-15);
        let (points, g) = lorenz_gini(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((g - 0.75).abs() < 1e-15);
        assert_eq!(points.first().unwrap(), &(0.0, 0.0));
        let last = points.last().unwrap();
        assert!((last.0 - 1.0).abs() < 1e-15 && (last.1 - 1.0).abs() < 1e-15);
        assert!(lorenz_gini(&[0.0, 0.0]).is_err());
        assert!(lorenz_gini(&[]).is_err());
    }

    #[test]
    fn gini_is_scale_invariant() {
        let xs = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let (_, g1) = lorenz_gini(&xs).unwrap();
        let scaled: Vec<f64> = xs.iter().map(|v| v * 37.5).collect();
        let (_, g2) = lorenz_gini(&scaled).unwrap();
        assert!((g1 - g2).abs() < 1e-12);
    }

    #[test]
    fn pearson_identical_negated_and_shift_invariance() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        assert!((pearson_centered(&a, &a).unwrap().unwrap() - 1.0).abs() < 1e-15);
        let neg = a.scale(-1.0);
        assert!((pearson_centered(&a, &neg).unwrap().unwrap() + 1.0).abs() < 1e-15);
        let shifted = a.map(|v| v + 100.0);
        let c = pearson_centered(&a, &shifted).unwrap().unwrap();
        assert!((c - 1.0).abs() < 1e-12, "centering absorbs constant shifts");
        let flat = Matrix::from_vec(2, 2, vec![3.0; 4]).unwrap();
        assert!(pearson_centered(&a, &flat).unwrap().is_none());
    }

    #[test]
    fn percent_gain_hand_value() {
        // base 0.5 → tuned 0.6 is a 20% gain.
        let pct = 100.0 * (0.6 - 0.5) / 0.5f64.abs();
        assert!((pct - 20.0).abs() < 1e-12);
    }
}
