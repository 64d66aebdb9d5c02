use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::prediction::{Backbone, Penalty, TrainerConfig};
use crate::sim::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Greedy,
    AllRealtime,
    OracleMyopic,
    RpafNopool,
    Rpaf,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Greedy,
        Method::AllRealtime,
        Method::OracleMyopic,
        Method::RpafNopool,
        Method::Rpaf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::AllRealtime => "all-realtime",
            Method::OracleMyopic => "oracle-myopic",
            Method::RpafNopool => "rpaf-nopool",
            Method::Rpaf => "rpaf",
        }
    }

    /// Whether decisions need a trained actor.
    pub fn uses_actor(self) -> bool {
        matches!(self, Method::Rpaf | Method::RpafNopool)
    }

    pub fn is_budgeted(self) -> bool {
        self != Method::AllRealtime
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                format!(
                    "unknown method {s:?} (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

/// How `rpaf-nopool` turns a relaxed action into a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NopoolRule {
    /// Real-time iff the relaxed action reaches the period's target ratio.
    Threshold,
    /// Real-time with probability equal to the relaxed action.
    Sample,
}

/// Collection/training schedule of `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// Simulated hours collected per epoch.
    pub hours_per_epoch: usize,
    pub steps_per_epoch: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 40,
            hours_per_epoch: 24,
            steps_per_epoch: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub trainer: TrainerConfig,
    pub schedule: TrainSchedule,
    pub method: Method,
    /// Bucket width of the rank index.
    pub eta: f64,
    pub trials: usize,
    pub output: PathBuf,
    pub nopool_rule: NopoolRule,
    /// Feed the hour-of-day encoding to the networks; when off those two
    /// features are zeroed.
    pub hour_features: bool,
    /// Monte Carlo draws per user for the myopic oracle's real-time estimate.
    pub oracle_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            trainer: TrainerConfig::default(),
            schedule: TrainSchedule::default(),
            method: Method::Rpaf,
            eta: 0.001,
            trials: 20,
            output: PathBuf::from("out"),
            nopool_rule: NopoolRule::Sample,
            hour_features: false,
            oracle_samples: 32,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn backbone(&self) -> Backbone {
        self.trainer.backbone
    }

    pub fn penalty(&self) -> Penalty {
        self.trainer.penalty
    }

    /// Sets the simulator and trainer seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.sim.seed = seed;
        self.trainer.seed = seed.wrapping_add(10_007);
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.sim
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        self.trainer.validate().map_err(HarnessError::Config)?;
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(HarnessError::Config("eta must lie in (0, 1)".into()));
        }
        if self.trials == 0 {
            return Err(HarnessError::Config("trials must be positive".into()));
        }
        if self.schedule.epochs == 0 || self.schedule.hours_per_epoch == 0 {
            return Err(HarnessError::Config(
                "schedule epochs and hours_per_epoch must be positive".into(),
            ));
        }
        if self.method == Method::OracleMyopic && self.oracle_samples == 0 {
            return Err(HarnessError::Config(
                "oracle_samples must be positive".into(),
            ));
        }
        if self.method.uses_actor()
            && self.trainer.penalty == Penalty::Kl
            && self.trainer.alpha == 0.0
        {
            return Err(HarnessError::Config("kl penalty needs alpha > 0".into()));
        }
        Ok(())
    }
}
