//! Experiment driver: training runs, multi-trial evaluation, reports and
//! the property-check battery used by the `check` command.

pub mod checks;
pub mod config;
pub mod episode;
pub mod report;
pub mod stats;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ExperimentConfig, Method, NopoolRule, TrainSchedule};
pub use episode::{run_episode, EpisodeResult, HourlyMetrics, LoopParams};

use crate::nn::{load_checkpoint, save_checkpoint, NnError};
use crate::prediction::{state_dim, Agent, PredictionError, ReplayBuffer};
use crate::sim::SimError;
use episode::{Episode, Policy, TransitionSink};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Checkpoint(#[from] NnError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Sim(SimError),
    #[error("report error: {0}")]
    Report(String),
}

impl HarnessError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_)
            | HarnessError::Prediction(PredictionError::Incompatible(_)) => 2,
            _ => 1,
        }
    }
}

/// Per-epoch training summary written to `diagnostics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    pub epoch: usize,
    pub steps: u64,
    pub buffer: usize,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub mean_atilde: Option<f64>,
    pub mean_penalty: Option<f64>,
    pub mean_td_error: Option<f64>,
    /// Mean relaxed action over the epoch's collected requests.
    pub behavior_atilde: f64,
    /// Mean relaxed action over requests of hours with demand at least 1.5 budgets.
    pub peak_atilde: Option<f64>,
}

pub struct TrainOutcome {
    pub agent: Agent,
    pub diagnostics: Vec<EpochDiagnostics>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Alternates simulation under the Bernoulli behaviour policy with training steps.
pub fn run_collect_train(cfg: &ExperimentConfig) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let mut agent = Agent::new(state_dim(&cfg.sim), cfg.trainer.clone())?;
    let mut buffer = ReplayBuffer::new(cfg.trainer.buffer_size);
    let mut episode = Episode::new(cfg.sim.clone(), LoopParams::from(cfg))?;
    let mut sink = TransitionSink::new(cfg.sim.num_users);
    let budget = cfg.sim.hourly_budget as f64;
    let hours = cfg.schedule.hours_per_epoch;
    let mut diagnostics = Vec::with_capacity(cfg.schedule.epochs);
    for epoch in 0..cfg.schedule.epochs {
        let policy = Policy::Collect {
            agent: &agent,
            floor: cfg.trainer.explore_floor,
        };
        let hourly = episode.run(epoch * hours..(epoch + 1) * hours, policy, Some(&mut sink))?;
        for t in sink.drain() {
            buffer.push(t);
        }
        let mut steps = Vec::with_capacity(cfg.schedule.steps_per_epoch);
        if buffer.len() >= cfg.trainer.batch_size {
            for _ in 0..cfg.schedule.steps_per_epoch {
                steps.push(agent.train_step(&buffer)?);
            }
        }
        let requests: usize = hourly.iter().map(|h| h.request_count).sum();
        let weighted = |h: &HourlyMetrics| h.mean_atilde.unwrap_or(0.0) * h.request_count as f64;
        let peak: Vec<&HourlyMetrics> = hourly
            .iter()
            .filter(|h| h.request_count as f64 >= 1.5 * budget)
            .collect();
        let peak_requests: usize = peak.iter().map(|h| h.request_count).sum();
        diagnostics.push(EpochDiagnostics {
            epoch,
            steps: agent.steps(),
            buffer: buffer.len(),
            critic_loss: mean(steps.iter().map(|d| d.critic_loss)),
            actor_loss: mean(steps.iter().filter_map(|d| d.actor_loss)),
            mean_atilde: mean(
                steps
                    .iter()
                    .filter(|d| d.actor_loss.is_some())
                    .map(|d| d.mean_atilde),
            ),
            mean_penalty: mean(
                steps
                    .iter()
                    .filter(|d| d.actor_loss.is_some())
                    .map(|d| d.mean_penalty),
            ),
            mean_td_error: mean(steps.iter().map(|d| d.mean_td_error)),
            behavior_atilde: hourly.iter().map(weighted).sum::<f64>() / requests.max(1) as f64,
            peak_atilde: (peak_requests > 0)
                .then(|| peak.iter().map(|h| weighted(h)).sum::<f64>() / peak_requests as f64),
        });
    }
    Ok(TrainOutcome { agent, diagnostics })
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Writes the checkpoint, the diagnostics CSV and the resolved config into `dir`.
pub fn write_training_artifacts(
    cfg: &ExperimentConfig,
    outcome: &TrainOutcome,
    dir: &Path,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    save_checkpoint(&outcome.agent.networks(), &dir.join(CHECKPOINT_FILE))?;
    let mut w = csv::Writer::from_path(dir.join(DIAGNOSTICS_FILE))?;
    for d in &outcome.diagnostics {
        w.serialize(d)?;
    }
    w.flush()?;
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;
    Ok(())
}

/// Builds an agent for `cfg` and loads checkpointed networks into it.
pub fn load_agent(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Agent, HarnessError> {
    let mut agent = Agent::new(state_dim(&cfg.sim), cfg.trainer.clone())?;
    agent.load_networks(load_checkpoint(checkpoint)?)?;
    Ok(agent)
}

/// All trials of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: Method,
    pub trials: Vec<EpisodeResult>,
}

impl MethodRun {
    pub fn watch_per_user(&self) -> Vec<f64> {
        self.trials
            .iter()
            .map(EpisodeResult::watch_per_user)
            .collect()
    }
}

/// Simulator seed of evaluation trial `i`; disjoint from the training seed.
pub fn trial_seed(base: u64, trial: usize) -> u64 {
    base.wrapping_add(1 + trial as u64)
}

/// Runs `cfg.trials` full horizons of `method`, in parallel, results in trial order.
pub fn run_evaluate(
    cfg: &ExperimentConfig,
    method: Method,
    agent: Option<&Agent>,
) -> Result<MethodRun, HarnessError> {
    cfg.validate()?;
    let params = LoopParams::from(cfg);
    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|i| {
            let mut sim = cfg.sim.clone();
            sim.seed = trial_seed(cfg.sim.seed, i);
            run_episode(sim, method, agent, params)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MethodRun { method, trials })
}
