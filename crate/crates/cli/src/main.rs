use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rpaf_core::harness::checks::{run_property_checks, CheckOptions};
use rpaf_core::harness::report::{emit_report, format_summary, load_runs, summarize, SUMMARY_FILE};
use rpaf_core::harness::{
    load_agent, run_collect_train, run_evaluate, write_training_artifacts, ExperimentConfig,
    HarnessError, Method, CHECKPOINT_FILE,
};
use rpaf_core::prediction::{Backbone, Penalty};

#[derive(Parser)]
#[command(
    name = "rpaf",
    version,
    about = "Budgeted real-time/cached serving experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect data with the behaviour policy and train actor and critics.
    Train(Common),
    /// Evaluate one method (or `all`) over several seeded trials.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to load; defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the property-check battery.
    Check {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Rebuild the summary from the trial CSVs under `--out`.
    Report(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// greedy, all-realtime, oracle-myopic, rpaf-nopool, rpaf, or all.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    backbone: Option<Backbone>,
    #[arg(long)]
    penalty: Option<Penalty>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
}

enum Failure {
    Config(String),
    Check,
    Other(anyhow::Error),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.exit_code() == 2 {
            Failure::Config(e.to_string())
        } else {
            Failure::Other(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl Common {
    /// Resolved config plus the methods selected by `--method`.
    fn resolve(&self) -> Result<(ExperimentConfig, Vec<Method>), Failure> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .map_err(|e| Failure::Config(format!("config {}: {e}", path.display())))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(b) = self.backbone {
            cfg.trainer.backbone = b;
        }
        if let Some(p) = self.penalty {
            cfg.trainer.penalty = p;
        }
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        let methods = match self.method.as_deref() {
            Some("all") => Method::ALL.to_vec(),
            Some(name) => vec![name.parse::<Method>().map_err(Failure::Config)?],
            None => vec![cfg.method],
        };
        cfg.method = methods[0];
        cfg.validate()?;
        Ok((cfg, methods))
    }
}

fn train(common: &Common) -> Result<(), Failure> {
    let (cfg, _) = common.resolve()?;
    let outcome = run_collect_train(&cfg)?;
    write_training_artifacts(&cfg, &outcome, &cfg.output)?;
    if let Some(last) = outcome.diagnostics.last() {
        println!(
            "trained {} steps; last epoch mean atilde {:.4} (behaviour {:.4})",
            last.steps,
            last.mean_atilde.unwrap_or(f64::NAN),
            last.behavior_atilde
        );
    }
    println!("wrote {}", cfg.output.display());
    Ok(())
}

fn evaluate(common: &Common, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let (cfg, methods) = common.resolve()?;
    let agent = if methods.iter().any(|m| m.uses_actor()) {
        let path = checkpoint
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.output.join(CHECKPOINT_FILE));
        Some(load_agent(&cfg, &path).map_err(|e| match e {
            HarnessError::Checkpoint(_) | HarnessError::Prediction(_) => {
                Failure::Config(format!("checkpoint {}: {e}", path.display()))
            }
            other => other.into(),
        })?)
    } else {
        None
    };
    let mut runs = Vec::new();
    for method in methods {
        let mut mcfg = cfg.clone();
        mcfg.method = method;
        runs.push(run_evaluate(&mcfg, method, agent.as_ref())?);
    }
    emit_report(&cfg.output, &runs)?;
    let all = load_runs(&cfg.output, cfg.sim.num_users)?;
    let text = format_summary(&summarize(&all));
    std::fs::write(cfg.output.join(SUMMARY_FILE), &text).context("writing summary")?;
    print!("{text}");
    Ok(())
}

fn report(common: &Common) -> Result<(), Failure> {
    let (cfg, _) = common.resolve()?;
    let runs = load_runs(&cfg.output, cfg.sim.num_users)?;
    let text = format_summary(&summarize(&runs));
    std::fs::write(cfg.output.join(SUMMARY_FILE), &text).context("writing summary")?;
    print!("{text}");
    Ok(())
}

fn check(seed: u64) -> Result<(), Failure> {
    let results = run_property_checks(&CheckOptions {
        seed,
        ..CheckOptions::default()
    });
    for r in &results {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(Failure::Check)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Evaluate { common, checkpoint } => evaluate(common, checkpoint.as_deref()),
        Command::Check { seed } => check(*seed),
        Command::Report(c) => report(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
