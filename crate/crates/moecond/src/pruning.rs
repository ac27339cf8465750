//! Expert-scaling study: importance scoring (ES-Act / ES-Mag), the three
//! compression strategies, and the brute-force best-subset oracle.

use crate::error::{Error, Result};
use crate::moe::{ExpertParams, MoEConfig, ModelConfig, MoeLayer, MoeModel, RouterParams};
use crate::parallel::par_collect;
use crate::task::Batch;
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    /// Mean gated output magnitude.
    EsMag,
    /// Activation ratio: how often the expert is selected, normalized by K.
    EsAct,
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreKind::EsMag => "es-mag",
            ScoreKind::EsAct => "es-act",
        })
    }
}

impl FromStr for ScoreKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "es-mag" => Ok(ScoreKind::EsMag),
            "es-act" => Ok(ScoreKind::EsAct),
            other => Err(Error::Config(format!("unknown score kind '{other}'"))),
        }
    }
}

/// One token's trace at one layer: which experts ran and the norm of their
/// gated contribution wᵢ·Eᵢ(x).
#[derive(Clone, Debug)]
pub struct TokenTrace {
    /// (expert index, ‖wᵢ·Eᵢ(x)‖) for each selected expert.
    pub gated_norms: Vec<(usize, f64)>,
}

/// A sample is a token sequence; the synthetic task emits length-1 samples.
#[derive(Clone, Debug)]
pub struct SampleTrace {
    /// tokens[t][layer]
    pub tokens: Vec<Vec<TokenTrace>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpertScoreTable {
    pub kind: ScoreKind,
    /// scores[layer][expert]
    pub scores: Vec<Vec<f64>>,
}

impl ExpertScoreTable {
    /// CSV export: `layer,expert,score_kind,score`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,expert,score_kind,score\n");
        for (l, layer) in self.scores.iter().enumerate() {
            for (e, s) in layer.iter().enumerate() {
                let _ = writeln!(out, "{l},{e},{},{s}", self.kind);
            }
        }
        out
    }
}

/// Runs the model over evaluation samples and collects per-token traces.
/// Sharded over samples with order-independent per-sample contents.
pub fn collect_traces(model: &MoeModel, batches: &[Batch]) -> Result<Vec<SampleTrace>> {
    let flat: Vec<(usize, usize)> = batches
        .iter()
        .enumerate()
        .flat_map(|(bi, b)| (0..b.len()).map(move |t| (bi, t)))
        .collect();
    let traces: Vec<Result<SampleTrace>> = par_collect(flat.len(), |idx| {
        let (bi, t) = flat[idx];
        let x = batches[bi].input_row(t);
        let fwd = model.forward(x, false)?;
        let mut xm = Matrix::col(x.to_vec());
        let mut layers = Vec::with_capacity(model.layers.len());
        for (l, d) in fwd.decisions.iter().enumerate() {
            let mut gated_norms = Vec::with_capacity(d.selected.len());
            for &i in &d.selected {
                let v = model.layers[l].experts[i].forward(&xm)?;
                gated_norms.push((i, v.scale(d.weights[i]).frob_norm()));
            }
            layers.push(TokenTrace { gated_norms });
            xm = xm.add(&Matrix::col(fwd.layer_outputs[l].clone()))?;
        }
        Ok(SampleTrace { tokens: vec![layers] })
    });
    traces.into_iter().collect()
}

fn nested_mean(
    traces: &[SampleTrace],
    n_layers: usize,
    n_experts: usize,
    per_token: impl Fn(&TokenTrace, usize) -> f64,
) -> Result<Vec<Vec<f64>>> {
    if traces.is_empty() {
        return Err(Error::EmptyInput("score traces"));
    }
    let mut scores = vec![vec![0.0; n_experts]; n_layers];
    for l in 0..n_layers {
        for i in 0..n_experts {
            let mut acc = 0.0;
            for sample in traces {
                if sample.tokens.is_empty() {
                    return Err(Error::EmptyInput("sample with no tokens"));
                }
                let mut tok_acc = 0.0;
                for token in &sample.tokens {
                    tok_acc += per_token(&token[l], i);
                }
                acc += tok_acc / sample.tokens.len() as f64;
            }
            scores[l][i] = acc / traces.len() as f64;
        }
    }
    Ok(scores)
}

/// ES-Mag: mean over samples of mean over tokens of ‖vᵢ‖.
pub fn es_mag(traces: &[SampleTrace], n_layers: usize, n_experts: usize) -> Result<ExpertScoreTable> {
    let scores = nested_mean(traces, n_layers, n_experts, |tok, i| {
        tok.gated_norms
            .iter()
            .find(|(e, _)| *e == i)
            .map(|(_, norm)| *norm)
            .unwrap_or(0.0)
    })?;
    Ok(ExpertScoreTable {
        kind: ScoreKind::EsMag,
        scores,
    })
}

/// ES-Act: mean over samples of mean over tokens of 1[selected]/K.
pub fn es_act(
    traces: &[SampleTrace],
    n_layers: usize,
    n_experts: usize,
    k: usize,
) -> Result<ExpertScoreTable> {
    if k == 0 {
        return Err(Error::Config("ES-Act needs K >= 1".into()));
    }
    let scores = nested_mean(traces, n_layers, n_experts, |tok, i| {
        if tok.gated_norms.iter().any(|(e, _)| *e == i) {
            1.0 / k as f64
        } else {
            0.0
        }
    })?;
    Ok(ExpertScoreTable {
        kind: ScoreKind::EsAct,
        scores,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PruneStrategy {
    /// n → n′ with every survivor always active (k′ = n′).
    SmallDense,
    /// n → n′ keeping sparse routing (k′ < n′).
    SmallMoe,
    /// Expert pool unchanged, smaller activation budget (k′ < k).
    InferenceReduce,
}

impl std::fmt::Display for PruneStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PruneStrategy::SmallDense => "small-dense",
            PruneStrategy::SmallMoe => "small-moe",
            PruneStrategy::InferenceReduce => "inference-reduce",
        })
    }
}

impl FromStr for PruneStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small-dense" => Ok(PruneStrategy::SmallDense),
            "small-moe" => Ok(PruneStrategy::SmallMoe),
            "inference-reduce" => Ok(PruneStrategy::InferenceReduce),
            other => Err(Error::Config(format!("unknown prune strategy '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PruneSpec {
    pub strategy: PruneStrategy,
    /// Retained experts n′.
    pub n_retain: usize,
    /// New activation budget k′.
    pub k_active: usize,
}

impl PruneSpec {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (n, k) = (cfg.moe.n, cfg.moe.k);
        if self.n_retain == 0 || self.n_retain > n {
            return Err(Error::Config(format!(
                "n_retain {} out of range for n={n}",
                self.n_retain
            )));
        }
        if self.k_active == 0 || self.k_active > self.n_retain {
            return Err(Error::Config(format!(
                "k_active {} out of range for n_retain {}",
                self.k_active, self.n_retain
            )));
        }
        match self.strategy {
            PruneStrategy::SmallDense => {
                if self.k_active != self.n_retain {
                    return Err(Error::Config("small-dense requires k_active == n_retain".into()));
                }
            }
            PruneStrategy::SmallMoe => {
                // k′ < n′ < n in earnest; equalities allowed as degenerate
                // identities (n′ = n with k′ = k is a no-op prune).
                if self.k_active > self.n_retain {
                    return Err(Error::Config(
                        "small-moe requires k_active <= n_retain <= n".into(),
                    ));
                }
            }
            PruneStrategy::InferenceReduce => {
                if self.n_retain != n || self.k_active > k {
                    return Err(Error::Config(
                        "inference-reduce requires n_retain == n and k_active <= k".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Prunes per layer to the top-n′ experts by score and rebuilds the router
/// over the survivors (softmax runs over surviving logits only; no
/// retraining follows). The condenser set is remapped onto survivors.
pub fn apply_prune(model: &MoeModel, spec: &PruneSpec, scores: &ExpertScoreTable) -> Result<MoeModel> {
    spec.validate(&model.cfg)?;
    if scores.scores.len() != model.layers.len()
        || scores.scores.iter().any(|s| s.len() != model.cfg.moe.n)
    {
        return Err(Error::State("score table shape does not match model".into()));
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for (layer, layer_scores) in model.layers.iter().zip(&scores.scores) {
        let keep = crate::routing::top_k_unchecked(layer_scores, spec.n_retain, &[]);
        let experts: Vec<ExpertParams> = keep.iter().map(|&i| layer.experts[i].clone()).collect();
        let d_model = layer.router.gate.rows();
        let mut gate = Matrix::zeros(d_model, keep.len());
        for (new_c, &old_c) in keep.iter().enumerate() {
            for r in 0..d_model {
                gate.set(r, new_c, layer.router.gate.get(r, old_c));
            }
        }
        let bias: Vec<f64> = keep.iter().map(|&i| layer.router.bias[i]).collect();
        let mut condensers: Vec<usize> = layer
            .condensers
            .iter()
            .filter_map(|j| keep.iter().position(|&kk| kk == *j))
            .collect();
        condensers.sort_unstable();
        condensers.truncate(spec.k_active);
        layers.push(MoeLayer {
            experts,
            shared: layer.shared.clone(),
            router: RouterParams { gate, bias },
            condensers,
        });
    }
    let max_r = layers.iter().map(|l| l.condensers.len()).max().unwrap_or(0);
    // Per-layer sets may shrink unevenly; keep r as the common size by
    // truncating to the smallest (forward checks |J| == r per layer).
    let min_r = layers.iter().map(|l| l.condensers.len()).min().unwrap_or(0);
    let _ = max_r;
    for l in &mut layers {
        l.condensers.truncate(min_r);
    }
    let cfg = ModelConfig {
        moe: MoEConfig {
            n: spec.n_retain,
            k: spec.k_active,
            r: min_r,
            n_shared: model.cfg.moe.n_shared,
            d_model: model.cfg.moe.d_model,
            d_hidden: model.cfg.moe.d_hidden,
        },
        layers: model.cfg.layers,
        d_out: model.cfg.d_out,
    };
    cfg.validate()?;
    Ok(MoeModel {
        cfg,
        layers,
        readout: model.readout.clone(),
    })
}

const ORACLE_MAX_N: usize = 12;

/// Exhaustive argmin over all C(n,k) subsets of ‖Σv − Σ_{i∈S}v‖².
/// Test-only oracle; refuses n > 12.
pub fn best_subset_oracle(outputs: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let n = outputs.len();
    if n > ORACLE_MAX_N {
        return Err(Error::OracleTooLarge { n, max: ORACLE_MAX_N });
    }
    if n == 0 || k == 0 || k > n {
        return Err(Error::Config(format!("oracle needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let dim = outputs[0].len();
    if outputs.iter().any(|v| v.len() != dim) {
        return Err(Error::dim("best_subset_oracle", "ragged output vectors"));
    }
    let mut best: Option<(f64, u32)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        // Residual of the omitted experts.
        let mut err = 0.0;
        for d in 0..dim {
            let mut acc = 0.0;
            for (i, v) in outputs.iter().enumerate() {
                if mask & (1 << i) == 0 {
                    acc += v[d];
                }
            }
            err += acc * acc;
        }
        match best {
            Some((b, _)) if b <= err => {}
            _ => best = Some((err, mask)),
        }
    }
    let (_, mask) = best.expect("at least one subset of size k exists");
    Ok((0..n).filter(|i| mask & (1 << i) != 0).collect())
}

/// Top-k experts by output norm (the selection rule the oracle judges).
pub fn top_k_by_norm(outputs: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    let norms: Vec<f64> = outputs
        .iter()
        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    crate::routing::top_k_select(&norms, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(gated: Vec<(usize, f64)>) -> TokenTrace {
        TokenTrace { gated_norms: gated }
    }

    #[test]
    fn es_mag_single_token() {
        let traces = vec![SampleTrace {
            tokens: vec![vec![trace(vec![(0, 2.0)])]],
        }];
        let t = es_mag(&traces, 1, 2).unwrap();
        assert_eq!(t.scores[0], vec![2.0, 0.0]);
    }

    #[test]
    fn es_mag_nested_mean_over_uneven_samples() {
        // Two samples, lengths 1 and 2, norms {4} and {1,1} → (4 + 1)/2 = 2.5.
        let traces = vec![
            SampleTrace {
                tokens: vec![vec![trace(vec![(0, 4.0)])]],
            },
            SampleTrace {
                tokens: vec![vec![trace(vec![(0, 1.0)])], vec![trace(vec![(0, 1.0)])]],
            },
        ];
        let t = es_mag(&traces, 1, 1).unwrap();
        assert!((t.scores[0][0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn es_mag_zero_outputs() {
        let traces = vec![SampleTrace {
            tokens: vec![vec![trace(vec![(0, 0.0)])]],
        }];
        let t = es_mag(&traces, 1, 1).unwrap();
        assert_eq!(t.scores[0][0], 0.0);
        assert!(es_mag(&[], 1, 1).is_err());
    }

    #[test]
    fn es_act_values() {
        // Selected every token with K=2 → 0.5.
        let always = vec![SampleTrace {
            tokens: vec![vec![trace(vec![(0, 1.0)])], vec![trace(vec![(0, 1.0)])]],
        }];
        let t = es_act(&always, 1, 2, 2).unwrap();
        assert_eq!(t.scores[0], vec![0.5, 0.0]);
        // Selected on 1 of 2 tokens in one sample, K=1 → 0.5.
        let half = vec![SampleTrace {
            tokens: vec![vec![trace(vec![(0, 1.0)])], vec![trace(vec![])]],
        }];
        let t = es_act(&half, 1, 1, 1).unwrap();
        assert_eq!(t.scores[0][0], 0.5);
    }

    #[test]
    fn oracle_orthogonal_case_matches_top_k() {
        // 4 mutually orthogonal vectors with norms [4,3,2,1], k=2 → {0,1}.
        let outputs = vec![
            vec![4.0, 0.0, 0.0, 0.0],
            vec![0.0, 3.0, 0.0, 0.0],
            vec![0.0, 0.0, 2.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ];
        assert_eq!(best_subset_oracle(&outputs, 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k_by_norm(&outputs, 2).unwrap(), vec![0, 1]);
        // k = n: the full set, zero error.
        assert_eq!(best_subset_oracle(&outputs, 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn oracle_disagrees_with_top_k_under_correlation() {
        // v, −v (large) plus a small third vector, k=1: omitting {v, −v}
        // costs nothing, so the oracle picks the small vector while
        // top-by-norm picks v.
        let outputs = vec![
            vec![10.0, 0.0],
            vec![-10.0, 0.0],
            vec![0.0, 0.1],
        ];
        let oracle = best_subset_oracle(&outputs, 1).unwrap();
        let topk = top_k_by_norm(&outputs, 1).unwrap();
        assert_eq!(oracle, vec![2]);
        assert_eq!(topk, vec![0]);
        assert_ne!(oracle, topk);
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let outputs = vec![vec![1.0]; 13];
        assert!(matches!(
            best_subset_oracle(&outputs, 2),
            Err(Error::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn score_csv_format() {
        let t = ExpertScoreTable {
            kind: ScoreKind::EsAct,
            scores: vec![vec![0.5, 0.25]],
        };
        let csv = t.to_csv();
        assert!(csv.starts_with("layer,expert,score_kind,score\n"));
        assert!(csv.contains("0,1,es-act,0.25"));
    }
}
