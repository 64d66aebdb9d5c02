//! Prediction stage: a two-headed critic, a relaxed allocator (actor) whose
//! output is the probability of a real-time serve, and DDPG/TD3 training
//! with a convex penalty that pulls the actor towards the period's
//! real-time ratio.
//!
//! The critic maps a state to `(Q(s, 0), Q(s, 1))`; the value of a relaxed
//! action `a` is the affine mix `a * Q(s, 1) + (1 - a) * Q(s, 0)`, so its
//! derivative in `a` is the head difference.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::nn::{Activation, AdamConfig, AdamState, DenseNetParams, NnError};
use crate::sim::{Action, SimConfig, UserSessionState};

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("penalty argument {0} outside the open unit interval")]
    Domain(f64),
    #[error("no active requests in the period")]
    NoTraffic,
    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    NotEnoughData { have: usize, need: usize },
    #[error("checkpoint does not match the trainer: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    /// Watch seconds.
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
    pub active: bool,
    /// Real-time ratio `m_t` of the period the request arrived in.
    pub target_ratio: f64,
}

/// Fixed-capacity ring of active transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores an active transition, overwriting the oldest when full.
    /// Inactive transitions are rejected.
    pub fn push(&mut self, t: Transition) -> bool {
        if !t.active {
            return false;
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        true
    }

    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Transition> {
        (0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    Mse,
    Kl,
    None,
}

impl std::str::FromStr for Penalty {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mse" => Ok(Penalty::Mse),
            "kl" => Ok(Penalty::Kl),
            "none" => Ok(Penalty::None),
            other => Err(format!(
                "unknown penalty {other:?} (expected mse, kl or none)"
            )),
        }
    }
}

/// Penalty kind together with its weight `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: Penalty,
    pub alpha: f64,
}

/// `(T(x_hat, x), dT/dx_hat)`; both kinds are convex in `x_hat` with their minimum at `x`.
pub fn penalty(kind: Penalty, x_hat: f64, x: f64) -> Result<(f64, f64), PredictionError> {
    match kind {
        Penalty::None => Ok((0.0, 0.0)),
        Penalty::Mse => Ok(((x_hat - x).powi(2), 2.0 * (x_hat - x))),
        Penalty::Kl => {
            if !(x_hat > 0.0 && x_hat < 1.0) {
                return Err(PredictionError::Domain(x_hat));
            }
            let value = -(xlogy(x, x_hat) + xlogy(1.0 - x, 1.0 - x_hat));
            let grad = -x / x_hat + (1.0 - x) / (1.0 - x_hat);
            Ok((value, grad))
        }
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Target real-time ratio of a period: `M / active`, clamped to 1.
pub fn compute_m_t(budget: usize, active_count: usize) -> Result<f64, PredictionError> {
    if active_count == 0 {
        return Err(PredictionError::NoTraffic);
    }
    Ok((budget as f64 / active_count as f64).min(1.0))
}

/// `a * q1 + (1 - a) * q0`.
pub fn critic_value(q0: f64, q1: f64, relaxed: f64) -> f64 {
    relaxed * q1 + (1.0 - relaxed) * q0
}

/// A network plus its slowly tracking target copy.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedNet {
    pub online: DenseNetParams,
    pub target: DenseNetParams,
}

impl TrackedNet {
    pub fn new(online: DenseNetParams) -> Self {
        Self {
            target: online.clone(),
            online,
        }
    }

    pub fn soft_update(&mut self, tau: f64) -> Result<(), NnError> {
        self.target.soft_update(&self.online, tau)
    }
}

/// State -> `[Q(s, 0), Q(s, 1)]`.
pub type CriticNet = TrackedNet;
/// State -> relaxed action in (0, 1).
pub type ActorNet = TrackedNet;

pub fn net_dims(
    input: usize,
    hidden_width: usize,
    hidden_layers: usize,
    output: usize,
) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat_n(hidden_width, hidden_layers));
    dims.push(output);
    dims
}

pub fn q_heads(critic: &DenseNetParams, state: &[f64]) -> Result<(f64, f64), PredictionError> {
    let q = critic.predict(state)?;
    Ok((q[0], q[1]))
}

pub fn relaxed_action(actor: &DenseNetParams, state: &[f64]) -> Result<f64, PredictionError> {
    Ok(actor.predict(state)?[0])
}

/// Per-sample actor loss `-Q(s, mu(s)) + alpha * T(mu(s), m_t)` and its gradient
/// with respect to the actor parameters.
pub fn actor_loss(
    actor: &DenseNetParams,
    critic: &DenseNetParams,
    state: &[f64],
    m_t: f64,
    spec: &PenaltySpec,
) -> Result<(f64, Vec<f64>), PredictionError> {
    let (out, trace) = actor.forward(state)?;
    let a = out[0];
    let (q0, q1) = q_heads(critic, state)?;
    let (t, dt) = penalty(spec.kind, a, m_t)?;
    let loss = -critic_value(q0, q1, a) + spec.alpha * t;
    let dloss_da = -(q1 - q0) + spec.alpha * dt;
    let (grads, _) = actor.backward_single(&trace, &[dloss_da])?;
    Ok((loss, grads))
}

/// Bootstrapped target `r + gamma * (1 - done) * Q_target(s', mu_target(s'))`.
pub fn td_target(
    actor_target: &DenseNetParams,
    critic_target: &DenseNetParams,
    t: &Transition,
    gamma: f64,
) -> Result<f64, PredictionError> {
    if t.done {
        return Ok(t.reward);
    }
    let a_next = relaxed_action(actor_target, &t.next_state)?;
    let (q0, q1) = q_heads(critic_target, &t.next_state)?;
    Ok(t.reward + gamma * critic_value(q0, q1, a_next))
}

/// Per-sample critic loss `(Q(s, a) - y)^2` and its gradient with respect to
/// the online critic; the target is held fixed. Inactive transitions
/// contribute nothing.
pub fn critic_loss(
    critic: &DenseNetParams,
    actor_target: &DenseNetParams,
    critic_target: &DenseNetParams,
    t: &Transition,
    gamma: f64,
) -> Result<(f64, Vec<f64>), PredictionError> {
    if !t.active {
        return Ok((0.0, vec![0.0; critic.num_params()]));
    }
    let y = td_target(actor_target, critic_target, t, gamma)?;
    let (out, trace) = critic.forward(&t.state)?;
    let head = t.action as usize;
    let diff = out[head] - y;
    let mut g = [0.0, 0.0];
    g[head] = 2.0 * diff;
    let (grads, _) = critic.backward_single(&trace, &g)?;
    Ok((diff * diff, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Ddpg,
    Td3,
}

impl std::str::FromStr for Backbone {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ddpg" => Ok(Backbone::Ddpg),
            "td3" => Ok(Backbone::Td3),
            other => Err(format!("unknown backbone {other:?} (expected ddpg or td3)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub alpha: f64,
    pub penalty: Penalty,
    pub backbone: Backbone,
    pub policy_delay: u64,
    pub target_noise_std: f64,
    pub target_noise_clip: f64,
    /// Rewards enter the critic target multiplied by this factor.
    pub reward_scale: f64,
    /// Behaviour-policy probabilities are clamped to `[floor, 1 - floor]`.
    pub explore_floor: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            actor_lr: 1e-4,
            critic_lr: 2e-4,
            gamma: 0.9,
            tau: 0.005,
            batch_size: 256,
            buffer_size: 100_000,
            hidden_width: 64,
            hidden_layers: 4,
            alpha: 1.0,
            penalty: Penalty::Mse,
            backbone: Backbone::Td3,
            policy_delay: 2,
            target_noise_std: 0.1,
            target_noise_clip: 0.2,
            reward_scale: 0.002,
            explore_floor: 0.05,
            seed: 17,
        }
    }
}

impl TrainerConfig {
    pub fn penalty_spec(&self) -> PenaltySpec {
        PenaltySpec {
            kind: self.penalty,
            alpha: self.alpha,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("reward_scale", self.reward_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err("gamma must lie in [0, 1)".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err("tau must lie in (0, 1]".into());
        }
        if self.batch_size == 0 || self.buffer_size < self.batch_size {
            return Err("batch_size must be positive and at most buffer_size".into());
        }
        if self.hidden_width == 0 || self.policy_delay == 0 {
            return Err("hidden_width and policy_delay must be positive".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err("alpha must be finite and non-negative".into());
        }
        if !(0.0..0.5).contains(&self.explore_floor) {
            return Err("explore_floor must lie in [0, 0.5)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub step: u64,
    pub critic_loss: f64,
    /// `None` on steps where a delayed actor was not updated.
    pub actor_loss: Option<f64>,
    pub mean_atilde: f64,
    pub mean_penalty: f64,
    pub mean_td_error: f64,
}

/// Actor, one or two critics, their optimizers and the sampling RNG.
#[derive(Debug, Clone)]
pub struct Agent {
    config: TrainerConfig,
    pub actor: ActorNet,
    pub critics: Vec<CriticNet>,
    actor_opt: AdamState,
    critic_opts: Vec<AdamState>,
    steps: u64,
    rng: ChaCha8Rng,
}

struct Batch {
    states: Array2<f64>,
    next_states: Array2<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    ratios: Vec<f64>,
}

impl Batch {
    fn from_samples(samples: &[&Transition], reward_scale: f64) -> Self {
        let dim = samples[0].state.len();
        let n = samples.len();
        let mut states = Array2::zeros((n, dim));
        let mut next_states = Array2::zeros((n, dim));
        for (i, t) in samples.iter().enumerate() {
            states
                .row_mut(i)
                .assign(&ndarray::ArrayView1::from(&t.state[..]));
            next_states
                .row_mut(i)
                .assign(&ndarray::ArrayView1::from(&t.next_state[..]));
        }
        Self {
            states,
            next_states,
            actions: samples.iter().map(|t| t.action as usize).collect(),
            rewards: samples.iter().map(|t| t.reward * reward_scale).collect(),
            dones: samples.iter().map(|t| t.done).collect(),
            ratios: samples.iter().map(|t| t.target_ratio).collect(),
        }
    }
}

impl Agent {
    pub fn new(state_dim: usize, config: TrainerConfig) -> Result<Self, PredictionError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let actor_dims = net_dims(state_dim, config.hidden_width, config.hidden_layers, 1);
        let critic_dims = net_dims(state_dim, config.hidden_width, config.hidden_layers, 2);
        let actor = TrackedNet::new(DenseNetParams::random(
            &actor_dims,
            Activation::Logistic,
            &mut rng,
        )?);
        let n_critics = match config.backbone {
            Backbone::Ddpg => 1,
            Backbone::Td3 => 2,
        };
        let critics: Vec<CriticNet> = (0..n_critics)
            .map(|_| {
                DenseNetParams::random(&critic_dims, Activation::Identity, &mut rng)
                    .map(TrackedNet::new)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            actor_opt: AdamState::for_net(&actor.online, AdamConfig::with_lr(config.actor_lr)),
            critic_opts: critics
                .iter()
                .map(|c| AdamState::for_net(&c.online, AdamConfig::with_lr(config.critic_lr)))
                .collect(),
            actor,
            critics,
            config,
            steps: 0,
            rng,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn state_dim(&self) -> usize {
        self.actor.online.input_dim()
    }

    pub fn relaxed_action(&self, state: &[f64]) -> Result<f64, PredictionError> {
        relaxed_action(&self.actor.online, state)
    }

    /// Relaxed actions for many states in one batched pass.
    pub fn relaxed_actions(&self, states: Array2<f64>) -> Result<Vec<f64>, PredictionError> {
        let trace = self.actor.online.forward_batch(states)?;
        Ok(trace.output().column(0).to_vec())
    }

    pub fn q_heads(&self, state: &[f64]) -> Result<(f64, f64), PredictionError> {
        q_heads(&self.critics[0].online, state)
    }

    /// Networks in checkpoint order: actor, actor target, then each critic and its target.
    pub fn networks(&self) -> Vec<DenseNetParams> {
        let mut nets = vec![self.actor.online.clone(), self.actor.target.clone()];
        for c in &self.critics {
            nets.push(c.online.clone());
            nets.push(c.target.clone());
        }
        nets
    }

    /// Replaces the networks with checkpointed ones (warm start); optimizer state is reset.
    pub fn load_networks(&mut self, nets: Vec<DenseNetParams>) -> Result<(), PredictionError> {
        let expected = 2 + 2 * self.critics.len();
        if nets.len() != expected {
            return Err(PredictionError::Incompatible(format!(
                "expected {expected} networks, found {}",
                nets.len()
            )));
        }
        let mine = self.networks();
        for (a, b) in mine.iter().zip(&nets) {
            if !a.same_shape(b) {
                return Err(PredictionError::Incompatible(format!(
                    "layer dims {:?} vs {:?}",
                    a.layer_dims(),
                    b.layer_dims()
                )));
            }
        }
        let mut it = nets.into_iter();
        self.actor.online = it.next().expect("counted");
        self.actor.target = it.next().expect("counted");
        for c in &mut self.critics {
            c.online = it.next().expect("counted");
            c.target = it.next().expect("counted");
        }
        self.actor_opt = AdamState::for_net(
            &self.actor.online,
            AdamConfig::with_lr(self.config.actor_lr),
        );
        self.critic_opts = self
            .critics
            .iter()
            .map(|c| AdamState::for_net(&c.online, AdamConfig::with_lr(self.config.critic_lr)))
            .collect();
        Ok(())
    }

    /// One update of the configured backbone.
    pub fn train_step(
        &mut self,
        buffer: &ReplayBuffer,
    ) -> Result<TrainDiagnostics, PredictionError> {
        if buffer.len() < self.config.batch_size {
            return Err(PredictionError::NotEnoughData {
                have: buffer.len(),
                need: self.config.batch_size,
            });
        }
        let samples = buffer.sample(self.config.batch_size, &mut self.rng);
        let batch = Batch::from_samples(&samples, self.config.reward_scale);
        self.steps += 1;
        let (critic_loss, td) = self.update_critics(&batch)?;
        let actor_due = match self.config.backbone {
            Backbone::Ddpg => true,
            Backbone::Td3 => self.steps.is_multiple_of(self.config.policy_delay),
        };
        let mut diag = TrainDiagnostics {
            step: self.steps,
            critic_loss,
            mean_td_error: td,
            ..Default::default()
        };
        if actor_due {
            let (loss, mean_a, mean_pen) = self.update_actor(&batch)?;
            diag.actor_loss = Some(loss);
            diag.mean_atilde = mean_a;
            diag.mean_penalty = mean_pen;
            self.actor.soft_update(self.config.tau)?;
            for c in &mut self.critics {
                c.soft_update(self.config.tau)?;
            }
        } else {
            let a = self.relaxed_actions(batch.states.clone())?;
            diag.mean_atilde = a.iter().sum::<f64>() / a.len() as f64;
        }
        Ok(diag)
    }

    /// Bootstrapped targets for a batch, with TD3 smoothing and twin minimum when configured.
    fn targets(&mut self, batch: &Batch) -> Result<Vec<f64>, PredictionError> {
        let n = batch.rewards.len();
        let mut a_next = self
            .actor
            .target
            .forward_batch(batch.next_states.clone())?
            .output()
            .column(0)
            .to_vec();
        if self.config.backbone == Backbone::Td3 && self.config.target_noise_std > 0.0 {
            let noise = Normal::new(0.0, self.config.target_noise_std).expect("positive std");
            let clip = self.config.target_noise_clip;
            for a in &mut a_next {
                let eps: f64 = noise.sample(&mut self.rng);
                *a = (*a + eps.clamp(-clip, clip)).clamp(0.0, 1.0);
            }
        }
        let mut next_value = vec![f64::INFINITY; n];
        for c in &self.critics {
            let q = c.target.forward_batch(batch.next_states.clone())?;
            let q = q.output();
            for i in 0..n {
                next_value[i] = next_value[i].min(critic_value(q[[i, 0]], q[[i, 1]], a_next[i]));
            }
        }
        Ok((0..n)
            .map(|i| {
                if batch.dones[i] {
                    batch.rewards[i]
                } else {
                    batch.rewards[i] + self.config.gamma * next_value[i]
                }
            })
            .collect())
    }

    fn update_critics(&mut self, batch: &Batch) -> Result<(f64, f64), PredictionError> {
        let y = self.targets(batch)?;
        let n = y.len() as f64;
        let mut total_loss = 0.0;
        let mut total_abs = 0.0;
        for (c, opt) in self.critics.iter_mut().zip(&mut self.critic_opts) {
            let trace = c.online.forward_batch(batch.states.clone())?;
            let out = trace.output();
            let mut g = Array2::zeros(out.dim());
            let mut loss = 0.0;
            for (i, &head) in batch.actions.iter().enumerate() {
                let diff = out[[i, head]] - y[i];
                loss += diff * diff;
                total_abs += diff.abs();
                g[[i, head]] = 2.0 * diff / n;
            }
            total_loss += loss / n;
            let (grads, _) = c.online.backward(&trace, &g)?;
            opt.step(c.online.params_mut(), &grads)?;
        }
        let k = self.critics.len() as f64;
        Ok((total_loss / k, total_abs / (n * k)))
    }

    fn update_actor(&mut self, batch: &Batch) -> Result<(f64, f64, f64), PredictionError> {
        let spec = self.config.penalty_spec();
        let trace = self.actor.online.forward_batch(batch.states.clone())?;
        let q = self.critics[0].online.forward_batch(batch.states.clone())?;
        let (a, q) = (trace.output(), q.output());
        let n = batch.rewards.len() as f64;
        let mut g = Array2::zeros(a.dim());
        let (mut loss, mut sum_a, mut sum_pen) = (0.0, 0.0, 0.0);
        for i in 0..a.nrows() {
            let ai = a[[i, 0]];
            let (q0, q1) = (q[[i, 0]], q[[i, 1]]);
            let (t, dt) = penalty(spec.kind, ai, batch.ratios[i])?;
            loss += -critic_value(q0, q1, ai) + spec.alpha * t;
            g[[i, 0]] = (-(q1 - q0) + spec.alpha * dt) / n;
            sum_a += ai;
            sum_pen += t;
        }
        let (grads, _) = self.actor.online.backward(&trace, &g)?;
        self.actor_opt
            .step(self.actor.online.params_mut(), &grads)?;
        Ok((loss / n, sum_a / n, sum_pen / n))
    }
}

/// One DDPG update (the agent must have been built with the DDPG backbone).
pub fn train_step_ddpg(
    buffer: &ReplayBuffer,
    agent: &mut Agent,
) -> Result<TrainDiagnostics, PredictionError> {
    debug_assert_eq!(agent.config.backbone, Backbone::Ddpg);
    agent.train_step(buffer)
}

/// One TD3 update (the agent must have been built with the TD3 backbone).
pub fn train_step_td3(
    buffer: &ReplayBuffer,
    agent: &mut Agent,
) -> Result<TrainDiagnostics, PredictionError> {
    debug_assert_eq!(agent.config.backbone, Backbone::Td3);
    agent.train_step(buffer)
}

pub fn hour_encoding(hour: u32) -> (f64, f64) {
    let angle = 2.0 * PI * (hour % 24) as f64 / 24.0;
    (angle.sin(), angle.cos())
}

pub fn state_dim(sim: &SimConfig) -> usize {
    sim.feature_dim + 5
}

/// Feature vector: preference, engagement offset, staleness, occupancy, hour (sin, cos).
pub fn encode_state(user: &UserSessionState, sim: &SimConfig) -> Vec<f64> {
    let mut v = Vec::with_capacity(state_dim(sim));
    v.extend_from_slice(&user.preference);
    v.push(user.engagement - 1.0);
    v.push(user.consecutive_cached as f64 / sim.max_cached_run().max(1) as f64);
    v.push(user.cache_occupancy as f64 / sim.cache_capacity() as f64);
    let (s, c) = hour_encoding(user.hour_of_day);
    v.push(s);
    v.push(c);
    v
}

/// Bandit task with a known constant gap between the two action values.
///
/// Every transition is terminal with reward `base + gap * a`. All samples
/// share one target ratio, so the penalized actor optimum has a closed form.
pub mod synthetic {
    use super::*;

    #[derive(Debug, Clone, Copy)]
    pub struct ConstantGapTask {
        pub state_dim: usize,
        pub base_reward: f64,
        pub gap: f64,
        pub target_ratio: f64,
        pub seed: u64,
    }

    impl ConstantGapTask {
        pub fn fill(&self, buffer: &mut ReplayBuffer, n: usize) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            for _ in 0..n {
                let state: Vec<f64> = (0..self.state_dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect();
                let action = Action::from_bit(rng.random_bool(0.5));
                buffer.push(Transition {
                    next_state: state.clone(),
                    state,
                    action,
                    reward: self.base_reward + self.gap * action.as_f64(),
                    done: true,
                    active: true,
                    target_ratio: self.target_ratio,
                });
            }
        }

        /// Mean actor output over `n` fresh states.
        pub fn mean_action(&self, agent: &Agent, n: usize) -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xabcd);
            let states =
                Array2::from_shape_fn((n, self.state_dim), |_| rng.random_range(-1.0..1.0));
            let a = agent.relaxed_actions(states).expect("state dim matches");
            a.iter().sum::<f64>() / n as f64
        }
    }

    /// Trains a fresh agent on the task and returns it with the per-step diagnostics.
    pub fn train(
        task: &ConstantGapTask,
        config: TrainerConfig,
        steps: usize,
    ) -> Result<(Agent, Vec<TrainDiagnostics>), PredictionError> {
        let mut buffer = ReplayBuffer::new(config.buffer_size);
        task.fill(&mut buffer, config.buffer_size);
        let mut agent = Agent::new(task.state_dim, config)?;
        let diags = (0..steps)
            .map(|_| agent.train_step(&buffer))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((agent, diags))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn critic_value_is_affine() {
        assert_eq!(critic_value(1.0, 2.0, 0.0), 1.0);
        assert_eq!(critic_value(1.0, 2.0, 1.0), 2.0);
        assert_eq!(critic_value(1.0, 2.0, 0.25), 1.25);
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty(Penalty::Mse, 0.3, 0.3).unwrap(), (0.0, 0.0));
        let (v, _) = penalty(Penalty::Mse, 0.5, 0.3).unwrap();
        assert!((v - 0.04).abs() < 1e-15);
        let (v, d) = penalty(Penalty::Kl, 0.5, 0.5).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!(d.abs() < 1e-15);
        assert!(matches!(
            penalty(Penalty::Kl, 1.0, 0.5),
            Err(PredictionError::Domain(_))
        ));
        assert!(matches!(
            penalty(Penalty::Kl, 0.0, 0.5),
            Err(PredictionError::Domain(_))
        ));
        assert_eq!(penalty(Penalty::None, 0.9, 0.1).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn kl_derivative_matches_difference_quotient() {
        for &(xh, x) in &[(0.2, 0.7), (0.9, 0.1), (0.5, 1.0)] {
            let (_, d) = penalty(Penalty::Kl, xh, x).unwrap();
            let h = 1e-6;
            let fd = (penalty(Penalty::Kl, xh + h, x).unwrap().0
                - penalty(Penalty::Kl, xh - h, x).unwrap().0)
                / (2.0 * h);
            assert!((d - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn m_t_examples() {
        assert_eq!(compute_m_t(4500, 9000).unwrap(), 0.5);
        assert_eq!(compute_m_t(4500, 4000).unwrap(), 1.0);
        assert_eq!(compute_m_t(1, 4).unwrap(), 0.25);
        assert!(matches!(compute_m_t(5, 0), Err(PredictionError::NoTraffic)));
    }

    fn small_nets(seed: u64, dim: usize) -> (DenseNetParams, DenseNetParams) {
        let mut r = rng(seed);
        let actor =
            DenseNetParams::random(&net_dims(dim, 6, 2, 1), Activation::Logistic, &mut r).unwrap();
        let critic =
            DenseNetParams::random(&net_dims(dim, 6, 2, 2), Activation::Identity, &mut r).unwrap();
        (actor, critic)
    }

    /// Critic whose heads are the constants `q0`, `q1` regardless of input.
    fn constant_critic(dim: usize, q0: f64, q1: f64) -> DenseNetParams {
        let mut c = DenseNetParams::zeros(&[dim, 2], Activation::Identity).unwrap();
        let p = c.params_mut();
        p[2 * dim] = q0;
        p[2 * dim + 1] = q1;
        c
    }

    #[test]
    fn actor_loss_without_penalty_is_negative_critic_value() {
        let (actor, critic) = small_nets(1, 4);
        let state = [0.1, -0.4, 0.3, 0.9];
        let spec = PenaltySpec {
            kind: Penalty::Mse,
            alpha: 0.0,
        };
        let (loss, _) = actor_loss(&actor, &critic, &state, 0.4, &spec).unwrap();
        let a = relaxed_action(&actor, &state).unwrap();
        let (q0, q1) = q_heads(&critic, &state).unwrap();
        assert!((loss + critic_value(q0, q1, a)).abs() < 1e-12);
    }

    #[test]
    fn equal_heads_make_mse_minimizer_equal_target() {
        // With a flat critic the loss is alpha * (a - m)^2: the minimizing
        // action over a fine grid is m itself.
        let m = 0.37;
        let spec = PenaltySpec {
            kind: Penalty::Mse,
            alpha: 1.0,
        };
        let best = (0..=1000)
            .map(|i| i as f64 / 1000.0)
            .map(|a| {
                (
                    a,
                    -critic_value(2.0, 2.0, a) + spec.alpha * penalty(spec.kind, a, m).unwrap().0,
                )
            })
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap()
            .0;
        assert!((best - m).abs() < 1e-9);

        // The gradient through a real actor vanishes where its output equals m.
        let mut actor = DenseNetParams::zeros(&[1, 1], Activation::Logistic).unwrap();
        actor.params_mut()[1] = (m / (1.0 - m)).ln();
        let (_, g) = actor_loss(&actor, &constant_critic(1, 2.0, 2.0), &[0.0], m, &spec).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn critic_loss_examples() {
        let dim = 3;
        let (actor, _) = small_nets(2, dim);
        let critic = constant_critic(dim, 1.0, 4.0);
        let target = constant_critic(dim, 10.0, 20.0);
        let t = Transition {
            state: vec![0.0; dim],
            action: Action::Realtime,
            reward: 4.0,
            next_state: vec![0.5; dim],
            done: true,
            active: true,
            target_ratio: 0.5,
        };
        assert_eq!(
            critic_loss(&critic, &actor, &target, &t, 0.9).unwrap().0,
            0.0
        );

        let t = Transition {
            done: false,
            reward: 1.5,
            ..t
        };
        let (loss, _) = critic_loss(&critic, &actor, &target, &t, 0.0).unwrap();
        assert!((loss - 2.5f64.powi(2)).abs() < 1e-12);

        // gamma = 0.9 by hand: y = 1.5 + 0.9 * (a' * 20 + (1 - a') * 10), Q(s, 1) = 4.
        let a_next = relaxed_action(&actor, &t.next_state).unwrap();
        let y = 1.5 + 0.9 * (a_next * 20.0 + (1.0 - a_next) * 10.0);
        let (loss, _) = critic_loss(&critic, &actor, &target, &t, 0.9).unwrap();
        assert!((loss - (4.0 - y).powi(2)).abs() < 1e-9);

        let inactive = Transition { active: false, ..t };
        let (loss, g) = critic_loss(&critic, &actor, &target, &inactive, 0.9).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn replay_buffer_ring_and_inactive_rejection() {
        let mut buf = ReplayBuffer::new(3);
        let t = |r: f64, active| Transition {
            state: vec![0.0],
            action: Action::Cached,
            reward: r,
            next_state: vec![0.0],
            done: false,
            active,
            target_ratio: 1.0,
        };
        assert!(!buf.push(t(9.0, false)));
        for r in 0..5 {
            assert!(buf.push(t(r as f64, true)));
        }
        assert_eq!(buf.len(), 3);
        let mut rewards: Vec<f64> = buf.iter().map(|t| t.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
        let sample = buf.sample(100, &mut rng(1));
        assert!(sample.iter().all(|t| t.active));
    }

    #[test]
    fn state_encoding_anchors() {
        let sim = SimConfig::default();
        let mut u = UserSessionState {
            user_id: 0,
            preference: vec![0.0; sim.feature_dim],
            engagement: 1.0,
            consecutive_cached: 0,
            cache_occupancy: sim.cache_capacity(),
            hour_of_day: 0,
            session_active: true,
        };
        let v = encode_state(&u, &sim);
        let d = sim.feature_dim;
        assert_eq!(v.len(), state_dim(&sim));
        assert_eq!(v[d + 1], 0.0);
        assert_eq!(v[d + 2], 1.0);
        let zero = (v[d + 3], v[d + 4]);
        u.hour_of_day = 24;
        let v24 = encode_state(&u, &sim);
        assert_eq!((v24[d + 3], v24[d + 4]), zero);
    }

    fn filled_buffer(dim: usize, n: usize, seed: u64) -> ReplayBuffer {
        let mut r = rng(seed);
        let mut buf = ReplayBuffer::new(n);
        for _ in 0..n {
            let s: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            let ns: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            buf.push(Transition {
                state: s,
                action: Action::from_bit(r.random_bool(0.5)),
                reward: r.random_range(0.0..100.0),
                next_state: ns,
                done: r.random_bool(0.2),
                active: true,
                target_ratio: r.random_range(0.2..1.0),
            });
        }
        buf
    }

    fn tiny_config(backbone: Backbone) -> TrainerConfig {
        TrainerConfig {
            batch_size: 16,
            buffer_size: 64,
            hidden_width: 8,
            hidden_layers: 2,
            backbone,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let buf = filled_buffer(5, 64, 3);
        for backbone in [Backbone::Ddpg, Backbone::Td3] {
            let run = || {
                let mut agent = Agent::new(5, tiny_config(backbone)).unwrap();
                (0..10)
                    .map(|_| agent.train_step(&buf).unwrap())
                    .collect::<Vec<_>>()
            };
            assert_eq!(run(), run());
        }
    }

    #[test]
    fn td3_actor_waits_for_policy_delay() {
        let buf = filled_buffer(5, 64, 4);
        let mut agent = Agent::new(5, tiny_config(Backbone::Td3)).unwrap();
        for step in 1..=6u64 {
            let before = agent.actor.online.clone();
            let diag = agent.train_step(&buf).unwrap();
            if step % 2 == 1 {
                assert_eq!(agent.actor.online, before, "step {step}");
                assert!(diag.actor_loss.is_none());
            } else {
                assert_ne!(agent.actor.online, before);
                assert!(diag.actor_loss.is_some());
            }
        }
    }

    #[test]
    fn identical_twins_reduce_to_single_critic_target() {
        let buf = filled_buffer(5, 64, 5);
        let mut td3 = Agent::new(
            5,
            TrainerConfig {
                target_noise_std: 0.0,
                ..tiny_config(Backbone::Td3)
            },
        )
        .unwrap();
        td3.critics[1] = td3.critics[0].clone();
        let mut ddpg = td3.clone();
        ddpg.critics.truncate(1);
        let samples: Vec<&Transition> = buf.iter().collect();
        let batch = Batch::from_samples(&samples, 0.01);
        assert_eq!(td3.targets(&batch).unwrap(), ddpg.targets(&batch).unwrap());
    }

    #[test]
    fn batched_losses_match_per_sample_losses() {
        let dim = 5;
        let buf = filled_buffer(dim, 16, 6);
        let config = TrainerConfig {
            reward_scale: 1.0,
            ..tiny_config(Backbone::Ddpg)
        };
        let agent = Agent::new(dim, config).unwrap();
        let samples: Vec<&Transition> = buf.iter().collect();
        let batch = Batch::from_samples(&samples, 1.0);
        let mut probe = agent.clone();
        let y = probe.targets(&batch).unwrap();
        for (t, &yi) in samples.iter().zip(&y) {
            let expect = td_target(
                &agent.actor.target,
                &agent.critics[0].target,
                t,
                agent.config.gamma,
            )
            .unwrap();
            assert!((expect - yi).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_task_fills_buffer() {
        let task = synthetic::ConstantGapTask {
            state_dim: 4,
            base_reward: 1.0,
            gap: 0.05,
            target_ratio: 0.3,
            seed: 1,
        };
        let mut buf = ReplayBuffer::new(100);
        task.fill(&mut buf, 100);
        assert_eq!(buf.len(), 100);
        assert!(buf
            .iter()
            .all(|t| t.done && (t.reward - 1.0 - 0.05 * t.action.as_f64()).abs() < 1e-12));
    }
}
