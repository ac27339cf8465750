//! The optimization loop binding layers, routing policies, and tasks.

mod optimizer;
mod record;
pub mod study;

pub use optimizer::{sgd_update, Optimizer, OptimizerKind};
pub use record::{parse_ndjson, NdjsonSink, RecordSink, RunRecord, TeeSink, VecSink};

use crate::error::{Error, Result};
use crate::moe::{ModelGrads, MoeModel, RouterDecision};
use crate::parallel::par_collect;
use crate::routing::{aux_balance_loss, BackwardRegime, BiasControllerState, CondenserStrategy};
use crate::seed;
use crate::task::{Batch, DomainMixture};
use crate::tensor::{Matrix, Tape};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub regime: BackwardRegime,
    /// Bias update speed; 0 disables the controller.
    pub gamma: f64,
    /// Auxiliary balance loss strength; 0 disables it.
    pub alpha: f64,
    pub seed: u64,
    pub record_every: usize,
    /// Fraction of steps before the condenser set is selected.
    pub warmup_frac: f64,
    /// Use the sparsifying controller instead of the balancing one.
    pub sparsify: bool,
    pub condenser_strategy: CondenserStrategy,
    /// Re-select the condenser set at every warm-up-sized interval.
    pub refresh_condensers: bool,
    pub eval_tokens_per_domain: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.record_every == 0 {
            return Err(Error::Config("batch size and record cadence must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac must be in [0,1], got {}", self.warmup_frac)));
        }
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.steps as f64 * self.warmup_frac).round() as usize
    }
}

/// One batch's forward/backward: mean gradients, routing decisions (token
/// major), and the loss split.
pub struct BatchBackward {
    pub grads: ModelGrads,
    /// decisions[token][layer]
    pub decisions: Vec<Vec<RouterDecision>>,
    pub mse: f64,
    pub aux: f64,
}

struct TokenTape {
    tape: Tape,
    loss: crate::tensor::NodeId,
    weight_nodes: Vec<crate::tensor::NodeId>,
    decisions: Vec<RouterDecision>,
    grads_binding: crate::moe::ModelBinding,
    loss_value: f64,
}

/// Builds one token's tape through the model plus the squared-error loss.
fn token_tape(model: &MoeModel, x: &[f64], y: &[f64], regime: BackwardRegime) -> Result<TokenTape> {
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let fwd = model.forward_taped(&mut tape, &binding, x, regime, false)?;
    let target = tape.leaf(Matrix::col(y.to_vec()));
    let err = tape.sub(fwd.output, target)?;
    let sq = tape.hadamard(err, err)?;
    let total = tape.sum(sq);
    let loss = tape.scale(total, 1.0 / y.len() as f64);
    let loss_value = tape.scalar(loss);
    Ok(TokenTape {
        tape,
        loss,
        weight_nodes: fwd.weight_nodes,
        decisions: fwd.decisions,
        grads_binding: binding,
        loss_value,
    })
}

/// Forward/backward over a batch under the given regime.
///
/// Tokens run on independent tapes (parallel when available) and gradients
/// are reduced in token order. The auxiliary loss is differentiated through
/// the mean gate probabilities only: each layer's gate-weight node is
/// seeded with α·fᵢ/T directly, with the routing frequencies fᵢ treated as
/// constants.
pub fn batch_grads(
    model: &MoeModel,
    batch: &Batch,
    regime: BackwardRegime,
    alpha: f64,
) -> Result<BatchBackward> {
    let t = batch.len();
    if t == 0 {
        return Err(Error::EmptyInput("batch_grads needs at least one token"));
    }
    let built: Vec<Result<TokenTape>> = par_collect(t, |i| {
        token_tape(model, batch.input_row(i), batch.target_row(i), regime)
    });
    let mut tapes = Vec::with_capacity(t);
    for b in built {
        tapes.push(b?);
    }
    let n_layers = model.layers.len();
    let mut aux = 0.0;
    let mut layer_seed_vecs: Vec<Option<Vec<f64>>> = vec![None; n_layers];
    if alpha != 0.0 {
        for l in 0..n_layers {
            let decisions: Vec<RouterDecision> =
                tapes.iter().map(|tt| tt.decisions[l].clone()).collect();
            let a = aux_balance_loss(&decisions, alpha)?;
            aux += a.loss;
            layer_seed_vecs[l] = Some(a.freq.iter().map(|f| alpha * f / t as f64).collect());
        }
    }
    let inv_b = 1.0 / t as f64;
    let per_token: Vec<Result<ModelGrads>> = {
        let seeds_ref = &layer_seed_vecs;
        par_collect(t, |i| {
            let tt = &tapes[i];
            let mut seeds = vec![(tt.loss, Matrix::col(vec![inv_b]))];
            for (l, sv) in seeds_ref.iter().enumerate() {
                if let Some(v) = sv {
                    seeds.push((tt.weight_nodes[l], Matrix::col(v.clone())));
                }
            }
            let tg = tt.tape.backward(&seeds)?;
            Ok(model.grads_from(&tg, &tt.grads_binding))
        })
    };
    let mut grads = model.zero_grads();
    for g in per_token {
        grads.add_in_place(&g?)?;
    }
    let mse = tapes.iter().map(|tt| tt.loss_value).sum::<f64>() * inv_b;
    Ok(BatchBackward {
        grads,
        decisions: tapes.into_iter().map(|tt| tt.decisions).collect(),
        mse,
        aux,
    })
}

/// Mean squared error of the model over a batch (no recording).
pub fn batch_mse(model: &MoeModel, batch: &Batch, demote_condensers: bool) -> Result<f64> {
    let t = batch.len();
    if t == 0 {
        return Err(Error::EmptyInput("batch_mse needs at least one token"));
    }
    let losses: Vec<Result<f64>> = par_collect(t, |i| {
        let f = model.forward(batch.input_row(i), demote_condensers)?;
        let y = batch.target_row(i);
        let sq: f64 = f
            .output
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sq / y.len() as f64)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / t as f64)
}

pub struct TrainSummary {
    pub final_loss: f64,
    pub steps_run: usize,
    /// Cumulative activation counts at the end, [layer][expert].
    pub activation_counts: Vec<Vec<u64>>,
    pub records_emitted: usize,
}

/// Runs the training loop: forward per regime, MSE + optional auxiliary
/// loss, backward per regime, optimizer step, then the bias controller,
/// recording telemetry on the configured cadence.
///
/// Under the condenser regime the first `warmup_frac` of steps route
/// normally while the controller shapes the biases; the condenser set is
/// then selected (lowest-bias by default) and pinned.
pub fn train(
    model: &mut MoeModel,
    task: &DomainMixture,
    cfg: &TrainConfig,
    sink: &mut dyn RecordSink,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let n_layers = model.layers.len();
    let n = model.cfg.moe.n;
    let r = model.cfg.moe.r;
    let warmup = cfg.warmup_steps();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut controllers: Vec<BiasControllerState> = (0..n_layers)
        .map(|_| BiasControllerState::new(n, model.cfg.moe.k, cfg.gamma))
        .collect::<Result<_>>()?;
    let mut cum_counts: Vec<Vec<u64>> = vec![vec![0; n]; n_layers];
    let mut tokens_seen: u64 = 0;
    let eval_sets: Vec<Batch> = (0..task.n_domains())
        .map(|d| {
            task.sample_domain_batch(d, cfg.eval_tokens_per_domain, seed::derive(cfg.seed, "eval", d as u64))
        })
        .collect::<Result<_>>()?;
    let mut records_emitted = 0usize;
    let mut final_loss = f64::NAN;

    for step in 0..cfg.steps {
        let condensers_due = cfg.regime == BackwardRegime::Condenser
            && r > 0
            && step >= warmup
            && (step == warmup
                || (cfg.refresh_condensers && warmup > 0 && (step - warmup) % warmup == 0));
        if condensers_due {
            for (l, layer) in model.layers.iter_mut().enumerate() {
                let total = tokens_seen.max(1) as f64;
                let activation: Vec<f64> = cum_counts[l].iter().map(|&c| c as f64 / total).collect();
                layer.condensers = crate::routing::select_condensers(
                    &layer.router.bias,
                    &activation,
                    r,
                    cfg.condenser_strategy,
                    seed::derive(cfg.seed, "condenser", l as u64),
                )?;
            }
        }
        // Before the set exists, condenser training routes like masked SFT.
        let effective_regime = if cfg.regime == BackwardRegime::Condenser
            && model.layers.iter().all(|l| l.condensers.is_empty())
        {
            BackwardRegime::Masked
        } else {
            cfg.regime
        };
        let batch = task.sample_batch(cfg.batch_size, seed::derive(cfg.seed, "step-batch", step as u64))?;
        let bb = batch_grads(model, &batch, effective_regime, cfg.alpha)?;
        let loss = bb.mse + bb.aux;
        for token_d in &bb.decisions {
            for (l, d) in token_d.iter().enumerate() {
                for &i in &d.selected {
                    cum_counts[l][i] += 1;
                }
            }
        }
        tokens_seen += batch.len() as u64;
        if !loss.is_finite() {
            let diagnostic = RunRecord {
                step,
                loss: None,
                mse: None,
                aux: bb.aux,
                diverged: true,
                expert_grad_norms: bb.grads.expert_grad_norms(),
                expert_grad_norms_model: aggregate_norms(&bb.grads.expert_grad_norms()),
                activation_counts: cum_counts.clone(),
                bias: model.layers.iter().map(|l| l.router.bias.clone()).collect(),
                condensers: model.layers.iter().map(|l| l.condensers.clone()).collect(),
                eval_per_domain: Vec::new(),
            };
            sink.emit(&diagnostic)?;
            return Err(Error::Diverged { step });
        }
        optimizer.step(model, &bb.grads)?;
        if cfg.gamma > 0.0 {
            for (l, layer) in model.layers.iter_mut().enumerate() {
                for token_d in &bb.decisions {
                    controllers[l].observe(&token_d[l]);
                }
                if cfg.sparsify {
                    controllers[l].sparsify_step(&mut layer.router.bias)?;
                } else {
                    controllers[l].bias_step(&mut layer.router.bias)?;
                }
            }
        }
        final_loss = loss;
        let last = step + 1 == cfg.steps;
        if (step + 1) % cfg.record_every == 0 || last {
            let eval_per_domain: Vec<f64> = eval_sets
                .iter()
                .map(|b| batch_mse(model, b, false))
                .collect::<Result<_>>()?;
            let norms = bb.grads.expert_grad_norms();
            sink.emit(&RunRecord {
                step,
                loss: Some(loss),
                mse: Some(bb.mse),
                aux: bb.aux,
                diverged: false,
                expert_grad_norms_model: aggregate_norms(&norms),
                expert_grad_norms: norms,
                activation_counts: cum_counts.clone(),
                bias: model.layers.iter().map(|l| l.router.bias.clone()).collect(),
                condensers: model.layers.iter().map(|l| l.condensers.clone()).collect(),
                eval_per_domain,
            })?;
            records_emitted += 1;
        }
    }
    Ok(TrainSummary {
        final_loss,
        steps_run: cfg.steps,
        activation_counts: cum_counts,
        records_emitted,
    })
}

fn aggregate_norms(per_layer: &[Vec<f64>]) -> Vec<f64> {
    if per_layer.is_empty() {
        return Vec::new();
    }
    let n = per_layer[0].len();
    (0..n)
        .map(|i| per_layer.iter().map(|l| l[i] * l[i]).sum::<f64>().sqrt())
        .collect()
}

/// Persistent-path ablation: evaluation loss with condensers honored
/// (J ∪ TopK) versus demoted to ordinary routed experts under the same
/// parameters and budget.
pub fn ablate_persistent_path(
    model: &MoeModel,
    task: &DomainMixture,
    eval_tokens: usize,
    seed_value: u64,
) -> Result<(f64, f64)> {
    if model.layers.iter().all(|l| l.condensers.is_empty()) {
        return Err(Error::State("nothing to ablate: no layer has condensers".into()));
    }
    let batch = task.sample_batch(eval_tokens, seed_value)?;
    let with = batch_mse(model, &batch, false)?;
    let without = batch_mse(model, &batch, true)?;
    Ok((with, without))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{MoEConfig, ModelConfig};

    fn tiny_setup(seed_val: u64) -> (MoeModel, DomainMixture, TrainConfig) {
        let cfg = ModelConfig {
            moe: MoEConfig {
                n: 4,
                k: 2,
                r: 1,
                n_shared: 1,
                d_model: 8,
                d_hidden: 4,
            },
            layers: 2,
            d_out: 4,
        };
        let model = MoeModel::init(cfg, &mut seed::rng(seed_val, "init", 0)).unwrap();
        let task = DomainMixture::long_tail(3, 0.3, 8, 4, 501).unwrap();
        let tc = TrainConfig {
            steps: 20,
            batch_size: 8,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            regime: BackwardRegime::Condenser,
            gamma: 1e-4,
            alpha: 0.0,
            seed: seed_val,
            record_every: 5,
            warmup_frac: 0.25,
            sparsify: false,
            condenser_strategy: CondenserStrategy::LowBias,
            refresh_condensers: false,
            eval_tokens_per_domain: 8,
        };
        (model, task, tc)
    }

    #[test]
    fn lr_zero_leaves_parameters_unchanged() {
        let (mut model, task, mut tc) = tiny_setup(2);
        tc.optimizer = OptimizerKind::Sgd;
        tc.regime = BackwardRegime::Masked;
        tc.lr = 0.0;
        tc.gamma = 0.0;
        tc.steps = 5;
        let before = model.clone();
        let mut sink = VecSink::default();
        train(&mut model, &task, &tc, &mut sink).unwrap();
        assert_eq!(before, model);
    }

    #[test]
    fn condensers_selected_after_warmup() {
        let (mut model, task, tc) = tiny_setup(3);
        let mut sink = VecSink::default();
        train(&mut model, &task, &tc, &mut sink).unwrap();
        for layer in &model.layers {
            assert_eq!(layer.condensers.len(), 1);
        }
        let recs = sink.records;
        assert!(!recs.is_empty());
        assert!(recs.iter().all(|r| !r.diverged));
        // Early records (pre-warmup) carry no condenser set; late ones do.
        assert!(recs.last().unwrap().condensers.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn records_expose_budget_conserving_counts() {
        let (mut model, task, tc) = tiny_setup(4);
        let mut sink = VecSink::default();
        train(&mut model, &task, &tc, &mut sink).unwrap();
        let last = sink.records.last().unwrap();
        let tokens = (tc.steps * tc.batch_size) as u64;
        for layer_counts in &last.activation_counts {
            let total: u64 = layer_counts.iter().sum();
            assert_eq!(total, tokens * model.cfg.moe.k as u64);
        }
    }

    #[test]
    fn ablation_requires_condensers() {
        let (model, task, _) = tiny_setup(5);
        assert!(ablate_persistent_path(&model, &task, 16, 7).is_err());
    }
}
