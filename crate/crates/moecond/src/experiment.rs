//! Experiment presets: each paper-style study as a single reproducible run
//! writing a config snapshot, streamed records, analysis CSVs, and a
//! manifest sufficient to re-execute it.

use crate::analysis::{
    self, activation_counts_csv, correlation_csv, lorenz_points_csv, metric_layer_csv, ExpertRef,
};
use crate::config::{parse_override, RunConfig};
use crate::error::{Error, Result};
use crate::moe::{checkpoint, MoeModel};
use crate::pruning::{self, PruneSpec, PruneStrategy, ScoreKind};
use crate::routing::{BackwardRegime, CondenserStrategy};
use crate::seed;
use crate::train::{
    ablate_persistent_path, batch_mse, parse_ndjson, train, NdjsonSink, RunRecord, TeeSink, VecSink,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    ScalingLaw,
    MathStyleTrain,
    AblationR,
    AblationSelection,
    PersistentPath,
    GradientNorms,
    Correlation,
    Stability,
}

pub const PRESET_NAMES: &[&str] = &[
    "scaling-law",
    "math-style-train",
    "ablation-r",
    "ablation-selection",
    "persistent-path",
    "gradient-norms",
    "correlation",
    "stability",
];

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::ScalingLaw => "scaling-law",
            Preset::MathStyleTrain => "math-style-train",
            Preset::AblationR => "ablation-r",
            Preset::AblationSelection => "ablation-selection",
            Preset::PersistentPath => "persistent-path",
            Preset::GradientNorms => "gradient-norms",
            Preset::Correlation => "correlation",
            Preset::Stability => "stability",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaling-law" => Ok(Preset::ScalingLaw),
            "math-style-train" => Ok(Preset::MathStyleTrain),
            "ablation-r" => Ok(Preset::AblationR),
            "ablation-selection" => Ok(Preset::AblationSelection),
            "persistent-path" => Ok(Preset::PersistentPath),
            "gradient-norms" => Ok(Preset::GradientNorms),
            "correlation" => Ok(Preset::Correlation),
            "stability" => Ok(Preset::Stability),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (known: {})",
                PRESET_NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub preset: Preset,
    pub overrides: Vec<(String, String)>,
    pub out_dir: PathBuf,
}

impl ExperimentPlan {
    pub fn new(preset: &str, overrides: &[String], out_dir: impl Into<PathBuf>) -> Result<Self> {
        let parsed = overrides
            .iter()
            .map(|t| parse_override(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            preset: preset.parse()?,
            overrides: parsed,
            out_dir: out_dir.into(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub preset: String,
    pub seed: u64,
    pub version: String,
    pub status: String,
    pub config: BTreeMap<String, String>,
    pub outcome: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad manifest: {e}")))
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        fs::write(dir.join("manifest.json"), text)?;
        Ok(())
    }
}

/// Resolves a preset to its base configuration (before user overrides).
pub fn preset_config(preset: Preset) -> RunConfig {
    let mut cfg = RunConfig::default();
    match preset {
        Preset::MathStyleTrain | Preset::PersistentPath => {}
        Preset::GradientNorms => {
            cfg.record_every = 5;
        }
        Preset::ScalingLaw => {
            // Base-model study: pretraining only.
            cfg.regime = BackwardRegime::Masked;
            cfg.alpha = 0.01;
            cfg.gamma = 0.0;
            cfg.r = 0;
            cfg.pretrain_steps = 1200;
            cfg.steps = 0;
        }
        Preset::AblationR | Preset::AblationSelection => {
            cfg.steps = 1200;
        }
        Preset::Correlation | Preset::Stability => {
            cfg.steps = 1200;
        }
    }
    cfg
}

struct SingleRun {
    model: MoeModel,
    records: Vec<RunRecord>,
    metrics: BTreeMap<String, f64>,
}

/// The pretrained base model every fine-tuning variant starts from.
pub struct PretrainOut {
    pub model: MoeModel,
    pub records: Vec<RunRecord>,
}

/// Random init plus the fixed pretraining recipe (masked + auxiliary
/// balance loss on the full mixture).
pub fn run_pretrain(cfg: &RunConfig) -> Result<PretrainOut> {
    cfg.validate()?;
    let mut model = cfg.init_model()?;
    let mut sink = VecSink::default();
    if cfg.pretrain_steps > 0 {
        let task = cfg.build_task()?;
        train(&mut model, &task, &cfg.pretrain_config(), &mut sink)?;
    }
    Ok(PretrainOut {
        model,
        records: sink.records,
    })
}

fn write_pretrain_records(dir: &Path, pre: &PretrainOut) -> Result<()> {
    fs::create_dir_all(dir)?;
    let file = fs::File::create(dir.join("records.pretrain.ndjson"))?;
    let mut sink = NdjsonSink::new(BufWriter::new(file));
    for rec in &pre.records {
        use crate::train::RecordSink as _;
        sink.emit(rec)?;
    }
    Ok(())
}

/// Fine-tunes `cfg` from the pretrained base into `dir`: config snapshot,
/// base/final checkpoints, NDJSON records, metrics.csv. On divergence the
/// partial records and a failure manifest remain behind.
fn execute_finetune(cfg: &RunConfig, pre: &PretrainOut, dir: &Path) -> Result<SingleRun> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.snapshot.conf"), cfg.snapshot())?;
    let mut model = pre.model.clone();
    let target_cfg = cfg.model_config();
    {
        let (a, b) = (&model.cfg, &target_cfg);
        let same_shape = a.moe.n == b.moe.n
            && a.moe.k == b.moe.k
            && a.moe.n_shared == b.moe.n_shared
            && a.moe.d_model == b.moe.d_model
            && a.moe.d_hidden == b.moe.d_hidden
            && a.layers == b.layers
            && a.d_out == b.d_out;
        if !same_shape {
            return Err(Error::State("pretrained base shape does not match variant config".into()));
        }
    }
    model.cfg = target_cfg;
    checkpoint::save(&model, &dir.join("checkpoint.base.ckpt"))?;
    let full_task = cfg.build_task()?;
    let task = cfg.finetune_task(&full_task)?;
    let file = fs::File::create(dir.join("records.ndjson"))?;
    let mut ndjson = NdjsonSink::new(BufWriter::new(file));
    let mut vec_sink = VecSink::default();
    let mut final_loss = f64::NAN;
    if cfg.steps > 0 {
        let summary = {
            let mut tee = TeeSink {
                first: &mut ndjson,
                second: &mut vec_sink,
            };
            train(&mut model, &task, &cfg.train_config(), &mut tee)
        }?;
        final_loss = summary.final_loss;
    }
    checkpoint::save(&model, &dir.join("checkpoint.final.ckpt"))?;
    let records = vec_sink.records;
    let mut metrics = BTreeMap::new();
    if final_loss.is_finite() {
        metrics.insert("final_loss".to_string(), final_loss);
    } else if let Some(last) = pre.records.last() {
        if let Some(l) = last.loss {
            metrics.insert("final_loss".to_string(), l);
        }
    }
    let last_record = records.last().or_else(|| pre.records.last());
    if let Some(last) = last_record {
        if let Some(mse) = last.mse {
            metrics.insert("final_mse".to_string(), mse);
        }
        metrics.insert("final_aux".to_string(), last.aux);
        let mut mean = 0.0;
        for (d, v) in last.eval_per_domain.iter().enumerate() {
            metrics.insert(format!("eval_domain{d}"), *v);
            mean += v / last.eval_per_domain.len() as f64;
        }
        metrics.insert("eval_mean".to_string(), mean);
        let mut gini_mean = 0.0;
        for (l, counts) in last.activation_counts.iter().enumerate() {
            let vals: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            let (_, g) = analysis::lorenz_gini(&vals)?;
            metrics.insert(format!("gini_layer{l}"), g);
            gini_mean += g / last.activation_counts.len() as f64;
        }
        metrics.insert("gini_mean".to_string(), gini_mean);
    }
    if let Some(frac) = dominance_fraction(&records, cfg.train_config().warmup_steps()) {
        metrics.insert("dominance_frac".to_string(), frac);
    }
    write_metrics(dir, &metrics)?;
    Ok(SingleRun {
        model,
        records,
        metrics,
    })
}

/// Pretrain + fine-tune one configuration into `dir`.
fn execute_single(cfg: &RunConfig, dir: &Path) -> Result<SingleRun> {
    let pre = run_pretrain(cfg)?;
    write_pretrain_records(dir, &pre)?;
    execute_finetune(cfg, &pre, dir)
}

/// Fraction of post-warm-up records where the mean condenser gradient norm
/// exceeds the mean routed gradient norm. None when no record has a
/// condenser set.
pub fn dominance_fraction(records: &[RunRecord], warmup_step: usize) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for rec in records {
        if rec.step < warmup_step || rec.condensers.iter().all(|c| c.is_empty()) {
            continue;
        }
        let mut cond = Vec::new();
        let mut routed = Vec::new();
        for (l, norms) in rec.expert_grad_norms.iter().enumerate() {
            for (i, v) in norms.iter().enumerate() {
                if rec.condensers[l].contains(&i) {
                    cond.push(*v);
                } else {
                    routed.push(*v);
                }
            }
        }
        if cond.is_empty() || routed.is_empty() {
            continue;
        }
        let cm = cond.iter().sum::<f64>() / cond.len() as f64;
        let rm = routed.iter().sum::<f64>() / routed.len() as f64;
        total += 1;
        if cm > rm {
            hits += 1;
        }
    }
    if total == 0 {
        None
    } else {
        Some(hits as f64 / total as f64)
    }
}

fn write_metrics(dir: &Path, metrics: &BTreeMap<String, f64>) -> Result<()> {
    let mut out = String::from("metric,value\n");
    for (k, v) in metrics {
        let _ = writeln!(out, "{k},{v}");
    }
    fs::write(dir.join("metrics.csv"), out)?;
    Ok(())
}

fn read_metrics(dir: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(dir.join("metrics.csv"))?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::Format(format!("bad metrics line '{line}'")))?;
        out.insert(
            k.to_string(),
            v.parse::<f64>()
                .map_err(|e| Error::Format(format!("bad metric value '{v}': {e}")))?,
        );
    }
    Ok(out)
}

/// Loads the records streamed by a run (or one of its variants).
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    parse_ndjson(&fs::read_to_string(dir.join("records.ndjson"))?)
}

fn merge_variant_metrics(
    top: &mut BTreeMap<String, f64>,
    variant: &str,
    metrics: &BTreeMap<String, f64>,
) {
    for (k, v) in metrics {
        top.insert(format!("{variant}.{k}"), *v);
    }
}

/// Executes a preset end-to-end. Writes everything under `plan.out_dir`
/// and returns the manifest. On mid-run divergence the partial artifacts
/// stay in place next to a failure manifest, and the error propagates.
pub fn run_preset(plan: &ExperimentPlan) -> Result<Manifest> {
    let mut cfg = preset_config(plan.preset);
    for (k, v) in &plan.overrides {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    fs::create_dir_all(&plan.out_dir)?;
    fs::write(plan.out_dir.join("config.snapshot.conf"), cfg.snapshot())?;
    let outcome = match run_preset_inner(plan, &cfg) {
        Ok(outcome) => outcome,
        Err(e) => {
            let manifest = Manifest {
                preset: plan.preset.to_string(),
                seed: cfg.seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                status: format!("failed: {e}"),
                config: cfg.to_map(),
                outcome: BTreeMap::new(),
            };
            manifest.write(&plan.out_dir)?;
            return Err(e);
        }
    };
    let manifest = Manifest {
        preset: plan.preset.to_string(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        status: "ok".to_string(),
        config: cfg.to_map(),
        outcome,
    };
    manifest.write(&plan.out_dir)?;
    Ok(manifest)
}

fn run_preset_inner(plan: &ExperimentPlan, cfg: &RunConfig) -> Result<BTreeMap<String, f64>> {
    let dir = plan.out_dir.as_path();
    match plan.preset {
        Preset::MathStyleTrain | Preset::GradientNorms => {
            let run = execute_single(cfg, dir)?;
            Ok(run.metrics)
        }
        Preset::PersistentPath => {
            let run = execute_single(cfg, dir)?;
            let task = cfg.finetune_task(&cfg.build_task()?)?;
            let (with, without) = ablate_persistent_path(
                &run.model,
                &task,
                512,
                seed::derive(cfg.seed, "ablation-eval", 0),
            )?;
            let mut out = run.metrics;
            out.insert("loss_with".to_string(), with);
            out.insert("loss_without".to_string(), without);
            out.insert("without_minus_with".to_string(), without - with);
            out.insert("persistent_path_helps".to_string(), f64::from(without >= with));
            let csv = format!("metric,value\nloss_with,{with}\nloss_without,{without}\n");
            fs::write(dir.join("ablation.csv"), csv)?;
            write_metrics(dir, &out)?;
            Ok(out)
        }
        Preset::AblationR => {
            let grid: Vec<usize> = {
                let mut g: Vec<usize> = [0usize, 1, 2, 4].into_iter().filter(|&r| r <= cfg.k).collect();
                g.dedup();
                g
            };
            let pre = run_pretrain(cfg)?;
            write_pretrain_records(dir, &pre)?;
            let mut top = BTreeMap::new();
            for r in grid {
                let mut vcfg = cfg.clone();
                vcfg.r = r;
                let name = format!("r{r}");
                let run = execute_finetune(&vcfg, &pre, &dir.join(format!("variant_{name}")))?;
                merge_variant_metrics(&mut top, &name, &run.metrics);
            }
            write_metrics(dir, &top)?;
            Ok(top)
        }
        Preset::AblationSelection => {
            let strategies = [
                CondenserStrategy::LowBias,
                CondenserStrategy::HighBias,
                CondenserStrategy::LowActivation,
                CondenserStrategy::HighActivation,
                CondenserStrategy::Random,
            ];
            let pre = run_pretrain(cfg)?;
            write_pretrain_records(dir, &pre)?;
            let mut top = BTreeMap::new();
            for strat in strategies {
                let mut vcfg = cfg.clone();
                vcfg.condenser_strategy = strat;
                let name = strat.to_string();
                let run = execute_finetune(&vcfg, &pre, &dir.join(format!("variant_{name}")))?;
                merge_variant_metrics(&mut top, &name, &run.metrics);
            }
            write_metrics(dir, &top)?;
            Ok(top)
        }
        Preset::Correlation => {
            let variants = regime_variants(cfg, false);
            let pre = run_pretrain(cfg)?;
            write_pretrain_records(dir, &pre)?;
            let mut top = BTreeMap::new();
            for (name, vcfg) in variants {
                let vdir = dir.join(format!("variant_{name}"));
                let run = execute_finetune(&vcfg, &pre, &vdir)?;
                merge_variant_metrics(&mut top, &name, &run.metrics);
                let base = checkpoint::load(&vdir.join("checkpoint.base.ckpt"))?;
                let mut anchors: Vec<ExpertRef> =
                    (0..vcfg.n_shared).map(ExpertRef::Shared).collect();
                let mut condensed: Vec<usize> = run
                    .model
                    .layers
                    .iter()
                    .flat_map(|l| l.condensers.iter().copied())
                    .collect();
                condensed.sort_unstable();
                condensed.dedup();
                anchors.extend(condensed.iter().map(|&i| ExpertRef::Routed(i)));
                let routed: Vec<usize> =
                    (0..vcfg.n).filter(|i| !condensed.contains(i)).collect();
                let report = analysis::correlation_report(&base, &run.model, &anchors, &routed)?;
                fs::write(vdir.join("correlation.csv"), correlation_csv(&report))?;
                if let Some(m) = report.model_mean_pct {
                    top.insert(format!("{name}.corr_mean_pct"), m);
                }
                if let Some(s) = report.model_std_pct {
                    top.insert(format!("{name}.corr_std_pct"), s);
                }
            }
            write_metrics(dir, &top)?;
            Ok(top)
        }
        Preset::Stability => {
            let variants = regime_variants(cfg, true);
            let pre = run_pretrain(cfg)?;
            write_pretrain_records(dir, &pre)?;
            let mut top = BTreeMap::new();
            for (name, vcfg) in variants {
                let vdir = dir.join(format!("variant_{name}"));
                let run = execute_finetune(&vcfg, &pre, &vdir)?;
                merge_variant_metrics(&mut top, &name, &run.metrics);
                // Loss / gradient-norm trajectory.
                let mut curve = String::from("step,loss,mean_grad_norm\n");
                for rec in &run.records {
                    let mean_norm = {
                        let all: Vec<f64> = rec
                            .expert_grad_norms
                            .iter()
                            .flat_map(|l| l.iter().copied())
                            .collect();
                        all.iter().sum::<f64>() / all.len().max(1) as f64
                    };
                    let _ = writeln!(
                        curve,
                        "{},{},{mean_norm}",
                        rec.step,
                        rec.loss.unwrap_or(f64::NAN)
                    );
                }
                fs::write(vdir.join("curve.csv"), curve)?;
                // Router drift relative to the shared base model.
                let base = checkpoint::load(&vdir.join("checkpoint.base.ckpt"))?;
                let task = vcfg.finetune_task(&vcfg.build_task()?)?;
                let tokens =
                    task.sample_batch(256, seed::derive(vcfg.seed, "kl-eval", 0))?;
                let kl = analysis::router_kl(&base, &run.model, &tokens)?;
                fs::write(vdir.join("router_kl.csv"), metric_layer_csv("router_kl", &kl))?;
                let mean_kl = kl.iter().sum::<f64>() / kl.len() as f64;
                top.insert(format!("{name}.router_kl_mean"), mean_kl);
            }
            write_metrics(dir, &top)?;
            Ok(top)
        }
        Preset::ScalingLaw => {
            let run = execute_single(cfg, dir)?;
            let task = cfg.build_task()?;
            // Importance traces on the training split.
            let trace_batches: Vec<_> = (0..8)
                .map(|i| task.sample_batch(64, seed::derive(cfg.seed, "score-traces", i)))
                .collect::<Result<_>>()?;
            let traces = pruning::collect_traces(&run.model, &trace_batches)?;
            let n_layers = run.model.layers.len();
            let act = pruning::es_act(&traces, n_layers, cfg.n, cfg.k)?;
            let mag = pruning::es_mag(&traces, n_layers, cfg.n)?;
            fs::write(dir.join("scores_es_act.csv"), act.to_csv())?;
            fs::write(dir.join("scores_es_mag.csv"), mag.to_csv())?;
            let eval = task.sample_batch(512, seed::derive(cfg.seed, "scaling-eval", 0))?;
            let base_loss = batch_mse(&run.model, &eval, false)?;
            let mut top = run.metrics;
            top.insert("eval.base".to_string(), base_loss);
            let mut rows = String::from("strategy,n_retain,k_active,eval_loss\n");
            let grid = scaling_grid(cfg.n, cfg.k);
            for spec in grid {
                let pruned = pruning::apply_prune(&run.model, &spec, &act)?;
                let loss = batch_mse(&pruned, &eval, false)?;
                let _ = writeln!(rows, "{},{},{},{loss}", spec.strategy, spec.n_retain, spec.k_active);
                top.insert(
                    format!("eval.{}.n{}.k{}", spec.strategy, spec.n_retain, spec.k_active),
                    loss,
                );
            }
            fs::write(dir.join("scaling.csv"), rows)?;
            write_metrics(dir, &top)?;
            Ok(top)
        }
    }
}

fn scaling_grid(n: usize, k: usize) -> Vec<PruneSpec> {
    let mut grid = Vec::new();
    for frac in [0.25, 0.5, 0.75] {
        let n_retain = ((n as f64 * frac).round() as usize).max(1);
        grid.push(PruneSpec {
            strategy: PruneStrategy::SmallDense,
            n_retain,
            k_active: n_retain,
        });
        if n_retain > k {
            grid.push(PruneSpec {
                strategy: PruneStrategy::SmallMoe,
                n_retain,
                k_active: k,
            });
        }
    }
    for k_active in 1..k {
        grid.push(PruneSpec {
            strategy: PruneStrategy::InferenceReduce,
            n_retain: n,
            k_active,
        });
    }
    grid
}

/// The regime comparison set: masked SFT and straight-through baselines
/// carry the auxiliary balance loss; the condenser run is auxiliary-free
/// with the bias controller.
fn regime_variants(cfg: &RunConfig, include_ste: bool) -> Vec<(String, RunConfig)> {
    let mut masked = cfg.clone();
    masked.regime = BackwardRegime::Masked;
    masked.alpha = 0.01;
    masked.gamma = 0.0;
    masked.r = 0;
    let mut condenser = cfg.clone();
    condenser.regime = BackwardRegime::Condenser;
    let mut out = vec![("sft".to_string(), masked)];
    if include_ste {
        let mut ste = cfg.clone();
        ste.regime = BackwardRegime::Ste;
        ste.alpha = 0.01;
        ste.gamma = 0.0;
        ste.r = 0;
        out.push(("densemixer".to_string(), ste));
    }
    out.push(("condenser".to_string(), condenser));
    out
}

/// Side-by-side final metrics for runs of the same preset. The delta
/// columns subtract the first run's value.
pub fn compare(dirs: &[PathBuf]) -> Result<String> {
    if dirs.len() < 2 {
        return Err(Error::Config("compare needs at least two run directories".into()));
    }
    let mut manifests = Vec::new();
    for d in dirs {
        if !d.is_dir() {
            return Err(Error::Config(format!("run directory {} does not exist", d.display())));
        }
        manifests.push(Manifest::load(d)?);
    }
    let preset = &manifests[0].preset;
    if manifests.iter().any(|m| &m.preset != preset) {
        return Err(Error::Config("compare requires runs of the same preset".into()));
    }
    let metric_sets: Vec<BTreeMap<String, f64>> =
        dirs.iter().map(|d| read_metrics(d)).collect::<Result<_>>()?;
    let names: Vec<String> = dirs
        .iter()
        .map(|d| {
            d.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| d.display().to_string())
        })
        .collect();
    let mut keys: Vec<String> = metric_sets
        .iter()
        .flat_map(|m| m.keys().cloned())
        .collect();
    keys.sort();
    keys.dedup();
    let mut out = String::from("metric");
    for n in &names {
        let _ = write!(out, ",{n}");
    }
    for n in &names[1..] {
        let _ = write!(out, ",delta_{n}");
    }
    out.push('\n');
    for key in keys {
        let _ = write!(out, "{key}");
        let first = metric_sets[0].get(&key).copied();
        for ms in &metric_sets {
            match ms.get(&key) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        for ms in &metric_sets[1..] {
            match (ms.get(&key), first) {
                (Some(v), Some(f)) => {
                    let _ = write!(out, ",{}", v - f);
                }
                _ => out.push(','),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// `analyze` subcommand implementations over a finished run directory.
pub mod analyze {
    use super::*;

    fn load_run(dir: &Path) -> Result<(RunConfig, MoeModel, MoeModel)> {
        let cfg = RunConfig::from_text(&fs::read_to_string(dir.join("config.snapshot.conf"))?)?;
        let base = checkpoint::load(&dir.join("checkpoint.base.ckpt"))?;
        let tuned = checkpoint::load(&dir.join("checkpoint.final.ckpt"))?;
        Ok((cfg, base, tuned))
    }

    fn eval_tokens(cfg: &RunConfig) -> Result<crate::task::Batch> {
        let task = cfg.build_task()?;
        task.sample_batch(256, seed::derive(cfg.seed, "analyze-tokens", 0))
    }

    /// Router KL divergence (base vs tuned) per layer → CSV.
    pub fn kl(dir: &Path, out: &Path) -> Result<f64> {
        let (cfg, base, tuned) = load_run(dir)?;
        let kl = analysis::router_kl(&base, &tuned, &eval_tokens(&cfg)?)?;
        fs::create_dir_all(out.parent().unwrap_or(Path::new(".")))?;
        fs::write(out, metric_layer_csv("router_kl", &kl))?;
        Ok(kl.iter().sum::<f64>() / kl.len() as f64)
    }

    /// Weighted MoE output divergence per layer → CSV.
    pub fn divergence(dir: &Path, out: &Path) -> Result<f64> {
        let (cfg, base, tuned) = load_run(dir)?;
        let div = analysis::weighted_output_divergence(&base, &tuned, &eval_tokens(&cfg)?)?;
        fs::create_dir_all(out.parent().unwrap_or(Path::new(".")))?;
        fs::write(out, metric_layer_csv("weighted_output_divergence", &div))?;
        Ok(div.iter().sum::<f64>() / div.len() as f64)
    }

    /// Activation histogram of the tuned model → counts CSV.
    pub fn activations(dir: &Path, out: &Path) -> Result<analysis::ActivationStats> {
        let (cfg, _, tuned) = load_run(dir)?;
        let stats = analysis::activation_histogram(&tuned, &eval_tokens(&cfg)?)?;
        fs::create_dir_all(out.parent().unwrap_or(Path::new(".")))?;
        fs::write(out, activation_counts_csv(&stats))?;
        Ok(stats)
    }

    /// Per-layer Gini + Lorenz point files next to `out`.
    pub fn gini(dir: &Path, out: &Path) -> Result<Vec<f64>> {
        let (cfg, _, tuned) = load_run(dir)?;
        let stats = analysis::activation_histogram(&tuned, &eval_tokens(&cfg)?)?;
        let mut ginis = Vec::new();
        let parent = out.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        for (l, counts) in stats.counts.iter().enumerate() {
            let vals: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            let (points, g) = analysis::lorenz_gini(&vals)?;
            let stem = out
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "gini".into());
            fs::write(
                parent.join(format!("{stem}_lorenz_layer{l}.csv")),
                lorenz_points_csv(&points),
            )?;
            ginis.push(g);
        }
        fs::write(out, metric_layer_csv("gini", &ginis))?;
        Ok(ginis)
    }

    /// Appendix-style correlation shift between base and tuned → CSV.
    pub fn corr(dir: &Path, out: &Path) -> Result<analysis::CorrelationReport> {
        let (cfg, base, tuned) = load_run(dir)?;
        let mut anchors: Vec<ExpertRef> = (0..cfg.n_shared).map(ExpertRef::Shared).collect();
        let mut condensed: Vec<usize> = tuned
            .layers
            .iter()
            .flat_map(|l| l.condensers.iter().copied())
            .collect();
        condensed.sort_unstable();
        condensed.dedup();
        anchors.extend(condensed.iter().map(|&i| ExpertRef::Routed(i)));
        if anchors.is_empty() {
            return Err(Error::State(
                "no shared or condenser experts to anchor the correlation report".into(),
            ));
        }
        let routed: Vec<usize> = (0..cfg.n).filter(|i| !condensed.contains(i)).collect();
        let report = analysis::correlation_report(&base, &tuned, &anchors, &routed)?;
        fs::create_dir_all(out.parent().unwrap_or(Path::new(".")))?;
        fs::write(out, correlation_csv(&report))?;
        Ok(report)
    }
}

/// `prune` subcommand implementation over a finished run directory.
pub fn prune_run(
    dir: &Path,
    spec: &PruneSpec,
    kind: ScoreKind,
    out_dir: &Path,
) -> Result<BTreeMap<String, f64>> {
    let cfg = RunConfig::from_text(&fs::read_to_string(dir.join("config.snapshot.conf"))?)?;
    let model = checkpoint::load(&dir.join("checkpoint.final.ckpt"))?;
    let task = cfg.build_task()?;
    let trace_batches: Vec<_> = (0..8)
        .map(|i| task.sample_batch(64, seed::derive(cfg.seed, "score-traces", i)))
        .collect::<Result<_>>()?;
    let traces = pruning::collect_traces(&model, &trace_batches)?;
    let table = match kind {
        ScoreKind::EsAct => pruning::es_act(&traces, model.layers.len(), cfg.n, cfg.k)?,
        ScoreKind::EsMag => pruning::es_mag(&traces, model.layers.len(), cfg.n)?,
    };
    let pruned = pruning::apply_prune(&model, spec, &table)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("scores.csv"), table.to_csv())?;
    checkpoint::save(&pruned, &out_dir.join("checkpoint.pruned.ckpt"))?;
    let mut metrics = BTreeMap::new();
    for d in 0..task.n_domains() {
        let eval = task.sample_domain_batch(d, cfg.eval_tokens, seed::derive(cfg.seed, "eval", d as u64))?;
        metrics.insert(format!("eval_domain{d}_before"), batch_mse(&model, &eval, false)?);
        metrics.insert(format!("eval_domain{d}_after"), batch_mse(&pruned, &eval, false)?);
    }
    write_metrics(out_dir, &metrics)?;
    Ok(metrics)
}
