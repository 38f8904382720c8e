//! Experiment runner CLI.
//!
//! Exit codes: 0 ok, 1 check failure or runtime error, 2 configuration
//! error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use nas_core::check;
use nas_core::config::ExperimentConfig;
use nas_core::error::Error;
use nas_core::metrics::eq12_bytes;
use nas_core::runner;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Parser)]
#[command(name = "nas", version, about = "Architecture search over TDNN super-networks")]
struct Cli {
    /// TOML experiment configuration; overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in configuration: planted, ctc-k4 or ctc-k6.
    #[arg(long, global = true, default_value = "planted")]
    preset: String,
    /// Run seed (also seeds the synthetic task when using a preset).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Element type for training runs; oracles always use 64-bit.
    #[arg(long, global = true, value_enum, default_value = "32")]
    precision: Precision,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full pipeline: warm-up, search, derive, retrain.
    Run,
    /// Stage 1 only: warm-up the super-network, write its checkpoint.
    Warmup,
    /// Stage 2: alternating bi-level search from the warm-up checkpoint.
    Search,
    /// Top-1 pruning of the searched super-network.
    Derive,
    /// Stage 3: retrain the derived model from scratch and evaluate it.
    Retrain,
    /// Run the oracle suites (finite differences, CTC enumeration,
    /// straight-through Jacobians, sampling statistics).
    Gradcheck,
    /// Instrumented activation-memory accounting per estimator mode.
    BenchMemory,
    /// Compare search started with and without warm-up over several seeds.
    AblateWarmup {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Summarize the artifacts in the output directory.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
            toml::from_str::<ExperimentConfig>(&text)
                .map_err(|e| Error::Config(format!("cannot parse {}: {}", path.display(), e)))?
        }
        None => ExperimentConfig::preset(&cli.preset, cli.seed).ok_or_else(|| {
            Error::Config(format!(
                "unknown preset {:?}; available: {:?}",
                cli.preset,
                ExperimentConfig::preset_names()
            ))
        })?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

fn run_cmd<T: nas_core::Scalar>(cmd: &Cmd, cfg: &ExperimentConfig, out: &Path) -> Result<(), Error> {
    match cmd {
        Cmd::Run => {
            let artifacts = runner::run::<T>(cfg, out)?;
            println!("derived architecture:");
            for (i, label) in artifacts.derived_labels.iter().enumerate() {
                println!("  block {}: {}", i, label);
            }
            println!(
                "warmup {} epochs, search {} epochs, retrain {} epochs",
                artifacts.warmup.epochs_run, artifacts.search.epochs_run, artifacts.retrain.epochs_run
            );
            println!(
                "final: val loss {:.6}, test loss {:.6}, {} = {:.4}",
                artifacts.retrain.final_val, artifacts.eval.loss, artifacts.eval.metric_name, artifacts.eval.metric
            );
            println!("artifacts in {}", out.display());
        }
        Cmd::Warmup => {
            let outcome = runner::run_warmup::<T>(cfg, out)?;
            println!(
                "warmup: {} epochs, best val {:.6}",
                outcome.epochs_run, outcome.best_val
            );
        }
        Cmd::Search => {
            let outcome = runner::run_search::<T>(cfg, out)?;
            println!(
                "search: {} epochs, best val {:.6}",
                outcome.epochs_run, outcome.best_val
            );
        }
        Cmd::Derive => {
            let (_, labels) = runner::run_derive::<T>(cfg, out)?;
            for (i, label) in labels.iter().enumerate() {
                println!("block {}: {}", i, label);
            }
        }
        Cmd::Retrain => {
            let (outcome, eval) = runner::run_retrain::<T>(cfg, out)?;
            println!(
                "retrain: {} epochs, val loss {:.6}, test loss {:.6}, {} = {:.4}",
                outcome.epochs_run, outcome.final_val, eval.loss, eval.metric_name, eval.metric
            );
        }
        Cmd::BenchMemory => {
            let model = runner::run_bench_memory::<T>(cfg, out)?;
            for line in model.summary_lines() {
                println!("{}", line);
            }
            println!(
                "reference constants: 6 blocks x 64 batch x 850 frames x 640 width x 4 B / 4 devices = {} bytes (~{:.1} MB)",
                eq12_bytes(6, 64, 850, 640, 4, 4),
                eq12_bytes(6, 64, 850, 640, 4, 4) as f64 / 1e6
            );
        }
        Cmd::AblateWarmup { seeds } => {
            let seed_list: Vec<u64> = (0..*seeds as u64).map(|i| cfg.seed + i).collect();
            let report = runner::warmup_ablation::<T>(cfg, &seed_list, out)?;
            for s in &report.seeds {
                println!(
                    "seed {}: A ({} warmup epochs) final {:.6} | B ({} warmup epochs) final {:.6}",
                    s.seed, s.a.warmup_epochs, s.a.final_retrain_val, s.b.warmup_epochs, s.b.final_retrain_val
                );
            }
            println!(
                "median final retrain val loss: A = {:.6}, B = {:.6}",
                report.median_final_a, report.median_final_b
            );
        }
        Cmd::Gradcheck | Cmd::Report => unreachable!("handled before dispatch"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    // Commands that need no configuration.
    match &cli.cmd {
        Cmd::Gradcheck => {
            let checks = check::run_all_checks();
            let mut failed = 0usize;
            for c in &checks {
                println!("{}", c.line());
                if !c.passed {
                    failed += 1;
                }
            }
            println!("{} checks, {} failed", checks.len(), failed);
            return if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
        Cmd::Report => {
            return match runner::report(&cli.out) {
                Ok(text) => {
                    print!("{}", text);
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {}", e);
                    ExitCode::from(exit_code_for(&e))
                }
            };
        }
        _ => {}
    }

    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {}", e);
            return ExitCode::from(exit_code_for(&e));
        }
    };
    let result = match cli.precision {
        Precision::F32 => run_cmd::<f32>(&cli.cmd, &cfg, &cli.out),
        Precision::F64 => run_cmd::<f64>(&cli.cmd, &cfg, &cli.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code_for(&e))
        }
    }
}
