//! moecond command line: reproducible MoE routing experiments.
//!
//! Subcommands: `run` (preset experiments), `train` (single config),
//! `prune`, `analyze <kl|divergence|gini|corr|activations>`, `ablate`,
//! `compare`. Exit codes: 0 success, 1 runtime failure, 2 usage error.

use clap::{Args, Parser, Subcommand};
use moecond::config::RunConfig;
use moecond::error::Error;
use moecond::experiment::{self, ExperimentPlan};
use moecond::pruning::{PruneSpec, PruneStrategy, ScoreKind};
use moecond::train::ablate_persistent_path;
use moecond::{moe::checkpoint, seed};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "moecond", version, about = "Desk-scale mixture-of-experts routing laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named experiment preset end-to-end.
    Run(RunArgs),
    /// Train a single configuration.
    Train(TrainArgs),
    /// Score experts and prune a trained run.
    Prune(PruneArgs),
    /// Post-hoc diagnostics over a finished run directory.
    Analyze(AnalyzeArgs),
    /// Persistent-path ablation on a condenser-trained run.
    Ablate(AblateArgs),
    /// Side-by-side final metrics of two or more runs.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Preset name (scaling-law, math-style-train, ablation-r,
    /// ablation-selection, persistent-path, gradient-norms, correlation,
    /// stability).
    #[arg(long)]
    preset: String,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Config overrides as key=value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "runs/out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file with `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    /// Finished run directory.
    run_dir: PathBuf,
    #[arg(long)]
    strategy: String,
    #[arg(long = "n-retain")]
    n_retain: usize,
    #[arg(long = "k-active")]
    k_active: usize,
    /// Importance score: es-act (default) or es-mag.
    #[arg(long, default_value = "es-act")]
    score: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// One of: kl, divergence, gini, corr, activations.
    what: String,
    /// Finished run directory.
    run_dir: PathBuf,
    /// Output CSV path (defaults into the run directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Finished condenser run directory.
    run_dir: PathBuf,
    #[arg(long, default_value_t = 512)]
    eval_tokens: usize,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more run directories of the same preset.
    run_dirs: Vec<PathBuf>,
    /// Output CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    moecond::parallel::configure_threads_from_env();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version on stdout with success.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Format(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> moecond::Result<()> {
    match cli.command {
        Command::Run(args) => {
            let mut overrides = args.sets.clone();
            if let Some(s) = args.seed {
                overrides.push(format!("seed={s}"));
            }
            let plan = ExperimentPlan::new(&args.preset, &overrides, &args.out)?;
            let manifest = experiment::run_preset(&plan)?;
            println!(
                "preset {} finished (seed {}) -> {}",
                manifest.preset,
                manifest.seed,
                args.out.display()
            );
            for (k, v) in &manifest.outcome {
                println!("  {k} = {v}");
            }
            Ok(())
        }
        Command::Train(args) => {
            let mut cfg = match &args.config {
                Some(path) => RunConfig::from_text(&std::fs::read_to_string(path)?)?,
                None => RunConfig::default(),
            };
            for t in &args.sets {
                let (k, v) = moecond::config::parse_override(t)?;
                cfg.set(&k, &v)?;
            }
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            // A plain training run is the math-style-train preset with the
            // resolved config applied verbatim.
            let plan = ExperimentPlan {
                preset: "math-style-train".parse()?,
                overrides: cfg.to_map().into_iter().collect(),
                out_dir: args.out.clone(),
            };
            let manifest = experiment::run_preset(&plan)?;
            println!("trained -> {} (final_loss {:?})", args.out.display(), manifest.outcome.get("final_loss"));
            Ok(())
        }
        Command::Prune(args) => {
            let spec = PruneSpec {
                strategy: args.strategy.parse::<PruneStrategy>()?,
                n_retain: args.n_retain,
                k_active: args.k_active,
            };
            let kind = args.score.parse::<ScoreKind>()?;
            let metrics = experiment::prune_run(&args.run_dir, &spec, kind, &args.out)?;
            for (k, v) in metrics {
                println!("{k} = {v}");
            }
            Ok(())
        }
        Command::Analyze(args) => {
            let out = |name: &str| {
                args.out
                    .clone()
                    .unwrap_or_else(|| args.run_dir.join("analysis").join(name))
            };
            match args.what.as_str() {
                "kl" => {
                    let mean = experiment::analyze::kl(&args.run_dir, &out("router_kl.csv"))?;
                    println!("router_kl_mean = {mean}");
                }
                "divergence" => {
                    let mean = experiment::analyze::divergence(&args.run_dir, &out("divergence.csv"))?;
                    println!("weighted_output_divergence_mean = {mean}");
                }
                "gini" => {
                    let ginis = experiment::analyze::gini(&args.run_dir, &out("gini.csv"))?;
                    for (l, g) in ginis.iter().enumerate() {
                        println!("gini_layer{l} = {g}");
                    }
                }
                "corr" => {
                    let report = experiment::analyze::corr(&args.run_dir, &out("correlation.csv"))?;
                    println!(
                        "corr_mean_pct = {}",
                        report
                            .model_mean_pct
                            .map(|v| v.to_string())
                            .unwrap_or_else(|| "missing".into())
                    );
                }
                "activations" => {
                    let stats =
                        experiment::analyze::activations(&args.run_dir, &out("activations.csv"))?;
                    println!("tokens = {}, layers = {}", stats.tokens, stats.counts.len());
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown analyze target '{other}' (kl, divergence, gini, corr, activations)"
                    )))
                }
            }
            Ok(())
        }
        Command::Ablate(args) => {
            let cfg = RunConfig::from_text(&std::fs::read_to_string(
                args.run_dir.join("config.snapshot.conf"),
            )?)?;
            let model = checkpoint::load(&args.run_dir.join("checkpoint.final.ckpt"))?;
            let task = cfg.build_task()?;
            let (with, without) = ablate_persistent_path(
                &model,
                &task,
                args.eval_tokens,
                seed::derive(cfg.seed, "ablation-eval", 0),
            )?;
            println!("loss_with = {with}");
            println!("loss_without = {without}");
            std::fs::write(
                args.run_dir.join("ablation.csv"),
                format!("metric,value\nloss_with,{with}\nloss_without,{without}\n"),
            )?;
            Ok(())
        }
        Command::Compare(args) => {
            let csv = experiment::compare(&args.run_dirs)?;
            match &args.out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}
