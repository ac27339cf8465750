//! Flat dotted-key run configuration.
//!
//! Text format: one `key = value` per line, `#` comments. Unknown keys are
//! rejected. The snapshot written into a run directory resolves every key,
//! so a manifest plus snapshot re-executes the run identically.

use crate::error::{Error, Result};
use crate::moe::{MoEConfig, ModelConfig, MoeModel};
use crate::routing::{BackwardRegime, CondenserStrategy};
use crate::seed;
use crate::task::DomainMixture;
use crate::train::{OptimizerKind, TrainConfig};
use std::collections::BTreeMap;
use std::str::FromStr;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub model_layers: usize,
    pub n: usize,
    pub k: usize,
    pub n_shared: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub task_m: usize,
    /// Explicit mixture weights; when None, a long-tail mixture is built
    /// from `task_tail_mass`.
    pub task_pi: Option<Vec<f64>>,
    pub task_tail_mass: f64,
    pub task_seed: u64,
    /// Pretraining phase length producing the base checkpoint (0 skips it).
    pub pretrain_steps: usize,
    /// Auxiliary balance strength during pretraining.
    pub pretrain_alpha: f64,
    /// Domains the fine-tuning phase targets uniformly; None fine-tunes on
    /// the full mixture.
    pub finetune_focus: Option<Vec<usize>>,
    /// Fine-tuning phase length (0 skips it; the base model is then final).
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub record_every: usize,
    pub eval_tokens: usize,
    pub regime: BackwardRegime,
    pub gamma: f64,
    pub alpha: f64,
    pub r: usize,
    pub condenser_strategy: CondenserStrategy,
    pub sparsify: bool,
    pub warmup_frac: f64,
    pub refresh_condensers: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            model_layers: 2,
            n: 8,
            k: 3,
            n_shared: 1,
            d_model: 16,
            d_hidden: 8,
            d_out: 8,
            task_m: 5,
            task_pi: None,
            task_tail_mass: 0.2,
            task_seed: 7777,
            pretrain_steps: 800,
            pretrain_alpha: 0.01,
            finetune_focus: Some(vec![1, 2]),
            steps: 2000,
            batch_size: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            record_every: 10,
            eval_tokens: 64,
            regime: BackwardRegime::Condenser,
            gamma: 1e-4,
            alpha: 0.0,
            r: 2,
            condenser_strategy: CondenserStrategy::LowBias,
            sparsify: false,
            warmup_frac: 0.1,
            refresh_condensers: false,
        }
    }
}

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "model.layers",
    "model.n",
    "model.k",
    "model.n_shared",
    "model.d_model",
    "model.d_hidden",
    "model.d_out",
    "task.m",
    "task.pi",
    "task.tail_mass",
    "task.seed",
    "pretrain.steps",
    "pretrain.alpha",
    "finetune.focus",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.optimizer",
    "train.record_every",
    "train.eval_tokens",
    "routing.regime",
    "routing.gamma",
    "routing.alpha",
    "routing.r",
    "routing.condenser_strategy",
    "routing.sparsify",
    "routing.warmup_frac",
    "routing.refresh_condensers",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| Error::Config(format!("bad value '{value}' for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("bad value '{other}' for {key}: expected true/false"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, value)?,
            "model.layers" => self.model_layers = parse_num(key, value)?,
            "model.n" => self.n = parse_num(key, value)?,
            "model.k" => self.k = parse_num(key, value)?,
            "model.n_shared" => self.n_shared = parse_num(key, value)?,
            "model.d_model" => self.d_model = parse_num(key, value)?,
            "model.d_hidden" => self.d_hidden = parse_num(key, value)?,
            "model.d_out" => self.d_out = parse_num(key, value)?,
            "task.m" => self.task_m = parse_num(key, value)?,
            "task.pi" => {
                if value.trim() == "auto" {
                    self.task_pi = None;
                } else {
                    let pi: Vec<f64> = value
                        .split(',')
                        .map(|t| parse_num::<f64>(key, t))
                        .collect::<Result<_>>()?;
                    self.task_pi = Some(pi);
                }
            }
            "task.tail_mass" => self.task_tail_mass = parse_num(key, value)?,
            "task.seed" => self.task_seed = parse_num(key, value)?,
            "pretrain.steps" => self.pretrain_steps = parse_num(key, value)?,
            "pretrain.alpha" => self.pretrain_alpha = parse_num(key, value)?,
            "finetune.focus" => {
                if value.trim() == "all" {
                    self.finetune_focus = None;
                } else {
                    let focus: Vec<usize> = value
                        .split(',')
                        .map(|t| parse_num::<usize>(key, t))
                        .collect::<Result<_>>()?;
                    self.finetune_focus = Some(focus);
                }
            }
            "train.steps" => self.steps = parse_num(key, value)?,
            "train.batch_size" => self.batch_size = parse_num(key, value)?,
            "train.lr" => self.lr = parse_num(key, value)?,
            "train.optimizer" => self.optimizer = value.trim().parse()?,
            "train.record_every" => self.record_every = parse_num(key, value)?,
            "train.eval_tokens" => self.eval_tokens = parse_num(key, value)?,
            "routing.regime" => self.regime = value.trim().parse()?,
            "routing.gamma" => self.gamma = parse_num(key, value)?,
            "routing.alpha" => self.alpha = parse_num(key, value)?,
            "routing.r" => self.r = parse_num(key, value)?,
            "routing.condenser_strategy" => self.condenser_strategy = value.trim().parse()?,
            "routing.sparsify" => self.sparsify = parse_bool(key, value)?,
            "routing.warmup_frac" => self.warmup_frac = parse_num(key, value)?,
            "routing.refresh_condensers" => self.refresh_condensers = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("model.layers", self.model_layers.to_string());
        put("model.n", self.n.to_string());
        put("model.k", self.k.to_string());
        put("model.n_shared", self.n_shared.to_string());
        put("model.d_model", self.d_model.to_string());
        put("model.d_hidden", self.d_hidden.to_string());
        put("model.d_out", self.d_out.to_string());
        put("task.m", self.task_m.to_string());
        put(
            "task.pi",
            match &self.task_pi {
                None => "auto".to_string(),
                Some(pi) => pi.iter().map(|p| format!("{p:.17e}")).collect::<Vec<_>>().join(","),
            },
        );
        put("task.tail_mass", format!("{:.17e}", self.task_tail_mass));
        put("task.seed", self.task_seed.to_string());
        put("pretrain.steps", self.pretrain_steps.to_string());
        put("pretrain.alpha", format!("{:.17e}", self.pretrain_alpha));
        put(
            "finetune.focus",
            match &self.finetune_focus {
                None => "all".to_string(),
                Some(f) => f.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","),
            },
        );
        put("train.steps", self.steps.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.lr", format!("{:.17e}", self.lr));
        put("train.optimizer", self.optimizer.to_string());
        put("train.record_every", self.record_every.to_string());
        put("train.eval_tokens", self.eval_tokens.to_string());
        put("routing.regime", self.regime.to_string());
        put("routing.gamma", format!("{:.17e}", self.gamma));
        put("routing.alpha", format!("{:.17e}", self.alpha));
        put("routing.r", self.r.to_string());
        put("routing.condenser_strategy", self.condenser_strategy.to_string());
        put("routing.sparsify", self.sparsify.to_string());
        put("routing.warmup_frac", format!("{:.17e}", self.warmup_frac));
        put("routing.refresh_condensers", self.refresh_condensers.to_string());
        m
    }

    /// Fully-resolved snapshot in config-file syntax.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_map() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Parses config-file text (defaults + provided keys).
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.task_pi.is_none() && self.task_m < 2 {
            return Err(Error::Config("long-tail task needs task.m >= 2 (or explicit task.pi)".into()));
        }
        if let Some(pi) = &self.task_pi {
            if pi.len() != self.task_m {
                return Err(Error::Config(format!(
                    "task.pi has {} weights but task.m = {}",
                    pi.len(),
                    self.task_m
                )));
            }
        }
        if let Some(focus) = &self.finetune_focus {
            if focus.is_empty() || focus.iter().any(|&d| d >= self.task_m) {
                return Err(Error::Config(format!(
                    "finetune.focus must name domains below task.m = {}",
                    self.task_m
                )));
            }
        }
        if self.steps > 0 {
            self.train_config().validate()?;
        } else {
            let mut probe = self.train_config();
            probe.steps = 1;
            probe.validate()?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            moe: MoEConfig {
                n: self.n,
                k: self.k,
                r: self.r,
                n_shared: self.n_shared,
                d_model: self.d_model,
                d_hidden: self.d_hidden,
            },
            layers: self.model_layers,
            d_out: self.d_out,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: self.optimizer,
            regime: self.regime,
            gamma: self.gamma,
            alpha: self.alpha,
            seed: self.seed,
            record_every: self.record_every,
            warmup_frac: self.warmup_frac,
            sparsify: self.sparsify,
            condenser_strategy: self.condenser_strategy,
            refresh_condensers: self.refresh_condensers,
            eval_tokens_per_domain: self.eval_tokens,
        }
    }

    /// The fixed pretraining recipe: masked routing with the auxiliary
    /// balance loss on the full mixture.
    pub fn pretrain_config(&self) -> TrainConfig {
        let mut tc = self.train_config();
        tc.steps = self.pretrain_steps;
        tc.regime = BackwardRegime::Masked;
        tc.alpha = self.pretrain_alpha;
        tc.gamma = 0.0;
        tc.seed = seed::derive(self.seed, "pretrain", 0);
        tc
    }

    /// The fine-tuning distribution (focused sub-mixture when configured).
    pub fn finetune_task(&self, full: &DomainMixture) -> Result<DomainMixture> {
        match &self.finetune_focus {
            Some(focus) => full.refocus(focus),
            None => Ok(full.clone()),
        }
    }

    pub fn build_task(&self) -> Result<DomainMixture> {
        match &self.task_pi {
            Some(pi) => DomainMixture::new(pi.clone(), self.d_model, self.d_out, self.task_seed),
            None => DomainMixture::long_tail(
                self.task_m,
                self.task_tail_mass,
                self.d_model,
                self.d_out,
                self.task_seed,
            ),
        }
    }

    pub fn init_model(&self) -> Result<MoeModel> {
        MoeModel::init(self.model_config(), &mut seed::rng(self.seed, "init", 0))
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Parses a single `key=value` override token.
pub fn parse_override(token: &str) -> Result<(String, String)> {
    let (k, v) = token
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{token}' must be key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_snapshot() {
        let cfg = RunConfig::default();
        let snap = cfg.snapshot();
        let back = RunConfig::from_text(&snap).unwrap();
        assert_eq!(cfg.to_map(), back.to_map());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("routing.bogus", "1"), Err(Error::Config(_))));
        assert!(RunConfig::from_text("no_such_key = 3\n").is_err());
    }

    #[test]
    fn comments_and_overrides_parse() {
        let cfg = RunConfig::from_text(
            "# comment\nrouting.regime = masked # trailing\nroutng_typo_absent =\n"
                .replace("routng_typo_absent =\n", "")
                .as_str(),
        )
        .unwrap();
        assert_eq!(cfg.regime, BackwardRegime::Masked);
        let (k, v) = parse_override("train.steps=50").unwrap();
        assert_eq!((k.as_str(), v.as_str()), ("train.steps", "50"));
        assert!(parse_override("nonsense").is_err());
    }

    #[test]
    fn every_known_key_is_settable() {
        let mut cfg = RunConfig::default();
        let map = cfg.to_map();
        assert_eq!(map.len(), KNOWN_KEYS.len());
        for key in KNOWN_KEYS {
            let v = map.get(*key).unwrap().clone();
            cfg.set(key, &v).unwrap();
        }
    }

    #[test]
    fn explicit_pi_must_match_m() {
        let mut cfg = RunConfig::default();
        cfg.set("finetune.focus", "1").unwrap();
        cfg.set("task.pi", "0.5,0.5").unwrap();
        assert!(cfg.validate().is_err());
        cfg.set("task.m", "2").unwrap();
        cfg.validate().unwrap();
        let task = cfg.build_task().unwrap();
        assert_eq!(task.n_domains(), 2);
    }
}
