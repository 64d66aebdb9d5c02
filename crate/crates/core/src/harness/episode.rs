//! Hour-by-hour simulation loop shared by data collection and evaluation.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method, NopoolRule};
use super::HarnessError;
use crate::allocation::{
    all_realtime_allocator, batch_oracle, decide, greedy_allocator, BudgetLedger, RankIndex,
};
use crate::prediction::{compute_m_t, encode_state, Agent, Transition};
use crate::sim::{generate_traffic, resolve_action, Action, SimConfig, SimError, Simulator};

const STREAM_POLICY: u64 = 9;

/// Per-hour serving counts. Column names follow the report CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyMetrics {
    pub hour: usize,
    #[serde(rename = "requests")]
    pub request_count: usize,
    #[serde(rename = "realtime")]
    pub realtime_served: usize,
    #[serde(rename = "cached")]
    pub cached_served: usize,
    #[serde(rename = "failures")]
    pub serve_failures: usize,
    pub budget: usize,
    #[serde(rename = "watchtime")]
    pub watch_time_sum: f64,
    pub mean_atilde: Option<f64>,
}

impl HourlyMetrics {
    pub fn is_balanced(&self) -> bool {
        self.realtime_served + self.cached_served + self.serve_failures == self.request_count
    }
}

/// Who chooses the requested action.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Evaluate {
        method: Method,
        agent: Option<&'a Agent>,
    },
    /// Bernoulli on the clamped relaxed action, budget ignored.
    Collect { agent: &'a Agent, floor: f64 },
}

/// Knobs of the loop that do not live in `SimConfig`.
#[derive(Debug, Clone, Copy)]
pub struct LoopParams {
    pub eta: f64,
    pub nopool_rule: NopoolRule,
    pub hour_features: bool,
    pub oracle_samples: usize,
}

impl From<&ExperimentConfig> for LoopParams {
    fn from(cfg: &ExperimentConfig) -> Self {
        Self {
            eta: cfg.eta,
            nopool_rule: cfg.nopool_rule,
            hour_features: cfg.hour_features,
            oracle_samples: cfg.oracle_samples,
        }
    }
}

/// Network input for a user; the hour pair is zeroed when hour features are off.
pub fn observe(
    user: &crate::sim::UserSessionState,
    sim: &SimConfig,
    hour_features: bool,
) -> Vec<f64> {
    let mut s = encode_state(user, sim);
    if !hour_features {
        let n = s.len();
        s[n - 2] = 0.0;
        s[n - 1] = 0.0;
    }
    s
}

/// Turns served requests into transitions: a transition is closed by the
/// same user's next request, or immediately when its session ends.
#[derive(Debug, Default)]
pub struct TransitionSink {
    pending: Vec<Option<Transition>>,
    pub completed: Vec<Transition>,
}

impl TransitionSink {
    pub fn new(num_users: usize) -> Self {
        Self {
            pending: vec![None; num_users],
            completed: Vec::new(),
        }
    }

    fn close(&mut self, user_id: usize, next_state: &[f64]) {
        if let Some(mut t) = self.pending[user_id].take() {
            t.next_state = next_state.to_vec();
            self.completed.push(t);
        }
    }

    fn record(&mut self, user_id: usize, t: Transition) {
        if t.done {
            self.completed.push(t);
        } else {
            self.pending[user_id] = Some(t);
        }
    }

    pub fn drain(&mut self) -> Vec<Transition> {
        std::mem::take(&mut self.completed)
    }
}

/// Stateful episode: simulator plus allocation state that persists across hours.
pub struct Episode {
    pub sim: Simulator,
    params: LoopParams,
    index: RankIndex,
    ledger: BudgetLedger,
    rng: ChaCha8Rng,
}

impl Episode {
    pub fn new(sim_config: SimConfig, params: LoopParams) -> Result<Self, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(sim_config.seed);
        rng.set_stream(STREAM_POLICY);
        let budget = sim_config.hourly_budget as u64;
        Ok(Self {
            sim: Simulator::new(sim_config).map_err(|e| HarnessError::Config(e.to_string()))?,
            params,
            index: RankIndex::new(params.eta),
            ledger: BudgetLedger::new(budget),
            rng,
        })
    }

    fn agent<'a>(policy: &Policy<'a>) -> Option<&'a Agent> {
        match *policy {
            Policy::Evaluate { method, agent } if method.uses_actor() => agent,
            Policy::Evaluate { .. } => None,
            Policy::Collect { agent, .. } => Some(agent),
        }
    }

    /// Myopic gain of a real-time serve for each slot, from user states frozen at the hour start.
    fn myopic_values(&self, users: &[usize]) -> Vec<f64> {
        let samples = self.params.oracle_samples;
        let mut memo: Vec<Option<f64>> = vec![None; self.sim.users().len()];
        users
            .iter()
            .map(|&u| {
                *memo[u].get_or_insert_with(|| {
                    let realtime = self.sim.expected_realtime_watch(u, samples);
                    let cached = if self.sim.user(u).session_active {
                        self.sim.next_cached_watch(u).unwrap_or(0.0)
                    } else {
                        0.0
                    };
                    realtime - cached
                })
            })
            .collect()
    }

    /// Simulates `hours`, optionally feeding transitions to `sink`.
    pub fn run(
        &mut self,
        hours: Range<usize>,
        policy: Policy<'_>,
        mut sink: Option<&mut TransitionSink>,
    ) -> Result<Vec<HourlyMetrics>, HarnessError> {
        let cfg = self.sim.config().clone();
        let budget = cfg.hourly_budget;
        let slate = cfg.slate_size;
        if let Policy::Evaluate {
            method,
            agent: None,
        } = policy
        {
            if method.uses_actor() {
                return Err(HarnessError::Config(format!(
                    "method {method} needs a trained actor"
                )));
            }
        }
        let agent = Self::agent(&policy);
        let mut out = Vec::with_capacity(hours.len());
        for hour in hours {
            let requests = generate_traffic(&cfg, hour);
            self.ledger.start_period(hour as u64);
            let mut m = HourlyMetrics {
                hour,
                request_count: requests.len(),
                realtime_served: 0,
                cached_served: 0,
                serve_failures: 0,
                budget,
                watch_time_sum: 0.0,
                mean_atilde: None,
            };
            if requests.is_empty() {
                self.index.rotate_period();
                out.push(m);
                continue;
            }
            let m_now = compute_m_t(budget, requests.len())?;
            let prev_hour = hour.checked_sub(1).unwrap_or(23);
            let m_prev = compute_m_t(budget, cfg.traffic(prev_hour).max(1))?;
            let oracle_pick = match policy {
                Policy::Evaluate {
                    method: Method::OracleMyopic,
                    ..
                } => {
                    let users: Vec<usize> = requests.iter().map(|r| r.user_id).collect();
                    Some(batch_oracle(&self.myopic_values(&users), budget))
                }
                _ => None,
            };
            let mut atilde_sum = 0.0;
            for req in &requests {
                let uid = req.user_id;
                self.sim.begin_request(uid, hour);
                let state = observe(self.sim.user(uid), &cfg, self.params.hour_features);
                if let Some(s) = sink.as_deref_mut() {
                    s.close(uid, &state);
                }
                let relaxed = match agent {
                    Some(a) => {
                        let v = a.relaxed_action(&state)?;
                        atilde_sum += v;
                        Some(v)
                    }
                    None => None,
                };
                let (requested, budgeted) = match policy {
                    Policy::Collect { floor, .. } => {
                        let p = relaxed
                            .expect("collect has an actor")
                            .clamp(floor, 1.0 - floor);
                        (Action::from_bit(self.rng.random_bool(p)), false)
                    }
                    Policy::Evaluate { method, .. } => {
                        let a = match method {
                            Method::Greedy => greedy_allocator(&self.ledger),
                            Method::AllRealtime => all_realtime_allocator(),
                            Method::Rpaf => {
                                decide(&self.index, &self.ledger, relaxed.expect("actor"))
                            }
                            Method::RpafNopool => {
                                let v = relaxed.expect("actor");
                                let want = match self.params.nopool_rule {
                                    NopoolRule::Threshold => v >= m_prev,
                                    NopoolRule::Sample => self.rng.random_bool(v.clamp(0.0, 1.0)),
                                };
                                Action::from_bit(want && self.ledger.try_consume())
                            }
                            Method::OracleMyopic => {
                                let pick =
                                    oracle_pick.as_ref().expect("computed above")[req.arrival];
                                Action::from_bit(pick.is_realtime() && self.ledger.try_consume())
                            }
                        };
                        (a, method.is_budgeted())
                    }
                };
                let effective = match requested {
                    Action::Realtime => Ok(Action::Realtime),
                    Action::Cached => {
                        let remaining = if budgeted {
                            self.ledger.remaining() as usize
                        } else {
                            usize::MAX
                        };
                        resolve_action(Action::Cached, self.sim.cache(uid), slate, remaining)
                    }
                };
                let record = match effective {
                    Ok(action) => {
                        if budgeted && requested == Action::Cached && action == Action::Realtime {
                            let granted = self.ledger.try_consume();
                            debug_assert!(granted, "resolve_action saw remaining budget");
                        }
                        self.sim.step(uid, action).map_err(HarnessError::Sim)?
                    }
                    Err(SimError::ServeFailure) => {
                        m.serve_failures += 1;
                        if let Some(s) = sink.as_deref_mut() {
                            s.pending[uid] = None;
                        }
                        self.sim.fail(uid);
                        continue;
                    }
                    Err(e) => return Err(HarnessError::Sim(e)),
                };
                match record.action {
                    Action::Realtime => m.realtime_served += 1,
                    Action::Cached => m.cached_served += 1,
                }
                m.watch_time_sum += record.watch_time;
                if let Some(s) = sink.as_deref_mut() {
                    s.record(
                        uid,
                        Transition {
                            next_state: if record.done {
                                state.clone()
                            } else {
                                Vec::new()
                            },
                            state,
                            action: record.action,
                            reward: record.watch_time,
                            done: record.done,
                            active: true,
                            target_ratio: m_now,
                        },
                    );
                }
            }
            if agent.is_some() {
                m.mean_atilde = Some(atilde_sum / requests.len() as f64);
            }
            self.index.rotate_period();
            out.push(m);
        }
        Ok(out)
    }
}

/// One evaluation trial.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub hourly: Vec<HourlyMetrics>,
    pub num_users: usize,
}

impl EpisodeResult {
    pub fn total_watch(&self) -> f64 {
        self.hourly.iter().map(|h| h.watch_time_sum).sum()
    }

    /// Accumulated watch seconds per user.
    pub fn watch_per_user(&self) -> f64 {
        self.total_watch() / self.num_users as f64
    }
}

pub fn run_episode(
    sim_config: SimConfig,
    method: Method,
    agent: Option<&Agent>,
    params: LoopParams,
) -> Result<EpisodeResult, HarnessError> {
    let hours = sim_config.hours;
    let num_users = sim_config.num_users;
    let mut ep = Episode::new(sim_config, params)?;
    let hourly = ep.run(0..hours, Policy::Evaluate { method, agent }, None)?;
    Ok(EpisodeResult { hourly, num_users })
}
