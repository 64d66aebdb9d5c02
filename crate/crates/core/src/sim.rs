//! Synthetic recommender with per-user result caches.
//!
//! Every hour a deterministic number of requests arrives. A request is served
//! either in real time (a fresh list of `L` scored items, the best `K` shown
//! and the other `L - K` stored in the user's result cache) or from the cache
//! (the next `K` stored items). Watch time is a positive function of item
//! scores, discounted when the user keeps receiving cached slates, and the
//! user continues the session with a probability that grows with watch time.

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// RNG stream ids; each purpose draws from its own ChaCha stream.
const STREAM_USERS: u64 = 1;
const STREAM_DYNAMICS: u64 = 2;
const STREAM_TRAFFIC_BASE: u64 = 1 << 32;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("cache holds {have} items, a slate needs {need}")]
    InsufficientCache { have: usize, need: usize },
    #[error("serve failure: cache cannot fill a slate and the budget is exhausted")]
    ServeFailure,
    #[error("user {0} has no active session")]
    InactiveSession(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub num_users: usize,
    /// Items shown per request (`K`).
    pub slate_size: usize,
    /// Items returned by a real-time recommendation (`L`).
    pub realtime_return: usize,
    /// Maximum real-time recommendations per hour (`M`).
    pub hourly_budget: usize,
    pub hours: usize,
    pub traffic_min: usize,
    pub traffic_max: usize,
    pub staleness_floor: f64,
    pub staleness_slope: f64,
    /// Slope of the continuation logit in watch seconds.
    pub leave_sensitivity: f64,
    /// Offset of the continuation logit.
    pub continue_bias: f64,
    pub feature_dim: usize,
    pub seconds_per_item: f64,
    /// Half-width of the per-user engagement multiplier around 1.
    pub engagement_spread: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            num_users: 100,
            slate_size: 8,
            realtime_return: 40,
            hourly_budget: 225,
            hours: 168,
            traffic_min: 50,
            traffic_max: 400,
            staleness_floor: 0.6,
            staleness_slope: 0.1,
            leave_sensitivity: 0.03,
            continue_bias: 1.5,
            feature_dim: 8,
            seconds_per_item: 10.0,
            engagement_spread: 0.5,
            seed: 7,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: &str| Err(SimError::Config(m.to_string()));
        if self.num_users == 0 || self.slate_size == 0 || self.hourly_budget == 0 || self.hours == 0
        {
            return err("num_users, slate_size, hourly_budget and hours must be positive");
        }
        if self.realtime_return <= self.slate_size {
            return err("realtime_return must exceed slate_size");
        }
        if self.traffic_min == 0 || self.traffic_min > self.traffic_max {
            return err("traffic band must satisfy 0 < traffic_min <= traffic_max");
        }
        if !(0.0..=1.0).contains(&self.staleness_floor) || self.staleness_slope < 0.0 {
            return err("staleness_floor must lie in [0, 1] and staleness_slope be non-negative");
        }
        if self.feature_dim == 0 || !(self.seconds_per_item > 0.0) {
            return err("feature_dim and seconds_per_item must be positive");
        }
        if !(0.0..1.0).contains(&self.engagement_spread) {
            return err("engagement_spread must lie in [0, 1)");
        }
        if !self.leave_sensitivity.is_finite() || !self.continue_bias.is_finite() {
            return err("continuation parameters must be finite");
        }
        Ok(())
    }

    /// Capacity of a result cache right after a real-time serve (`L - K`).
    pub fn cache_capacity(&self) -> usize {
        self.realtime_return - self.slate_size
    }

    /// Longest possible run of cached serves after one real-time serve.
    pub fn max_cached_run(&self) -> usize {
        self.cache_capacity() / self.slate_size
    }

    /// Requests arriving in `hour` (any absolute hour; the curve repeats daily).
    pub fn traffic(&self, hour: usize) -> usize {
        let s = (PI * (hour % 24) as f64 / 24.0).sin();
        let span = (self.traffic_max - self.traffic_min) as f64;
        (self.traffic_min as f64 + span * s * s).round() as usize
    }

    /// Watch-time multiplier after `consecutive_cached` cached serves in a row.
    pub fn staleness_discount(&self, consecutive_cached: u32) -> f64 {
        (1.0 - self.staleness_slope * consecutive_cached as f64).max(self.staleness_floor)
    }

    pub fn continue_probability(&self, watch_time: f64) -> f64 {
        let z = self.leave_sensitivity * watch_time - self.continue_bias;
        1.0 / (1.0 + (-z).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Cached = 0,
    Realtime = 1,
}

impl Action {
    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Action::Realtime
        } else {
            Action::Cached
        }
    }

    pub fn is_realtime(self) -> bool {
        self == Action::Realtime
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Action::Cached => 0.0,
            Action::Realtime => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSessionState {
    pub user_id: usize,
    /// Unit-norm latent preference.
    pub preference: Vec<f64>,
    /// Per-user watch-time multiplier, part of the user profile.
    pub engagement: f64,
    pub consecutive_cached: u32,
    pub cache_occupancy: usize,
    pub hour_of_day: u32,
    pub session_active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredItem {
    pub item_id: u64,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultCache {
    items: VecDeque<ScoredItem>,
}

impl ResultCache {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = &ScoredItem> {
        self.items.iter()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    /// True when the cache can fill a slate of `k` items.
    pub fn can_serve(&self, k: usize) -> bool {
        self.items.len() >= k
    }

    pub fn from_items(items: impl IntoIterator<Item = ScoredItem>) -> Self {
        Self {
            items: items.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slate {
    pub items: Vec<ScoredItem>,
}

impl Slate {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackOutcome {
    pub watch_time: f64,
    pub continued: bool,
}

/// One arrival in an hour's request stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Request {
    pub user_id: usize,
    pub arrival: usize,
}

fn traffic_rng(config: &SimConfig, hour: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STREAM_TRAFFIC_BASE + hour as u64);
    rng
}

/// The ordered request stream of `hour`; a pure function of the seed and hour.
pub fn generate_traffic(config: &SimConfig, hour: usize) -> Vec<Request> {
    let mut rng = traffic_rng(config, hour);
    let users = Uniform::new(0, config.num_users).expect("num_users > 0");
    (0..config.traffic(hour))
        .map(|arrival| Request {
            user_id: users.sample(&mut rng),
            arrival,
        })
        .collect()
}

/// Positive link from an item score to a per-item watch fraction.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Real-time serve: scores `L` fresh items, shows the best `K`, caches the rest.
///
/// The previous cache content is replaced.
pub fn serve_realtime<R: Rng + ?Sized>(
    config: &SimConfig,
    user: &mut UserSessionState,
    cache: &mut ResultCache,
    next_item_id: &mut u64,
    rng: &mut R,
) -> Slate {
    let mut fresh: Vec<ScoredItem> = (0..config.realtime_return)
        .map(|_| {
            let score: f64 = user
                .preference
                .iter()
                .map(|p| {
                    let z: f64 = StandardNormal.sample(rng);
                    p * z
                })
                .sum::<f64>();
            let id = *next_item_id;
            *next_item_id += 1;
            ScoredItem { item_id: id, score }
        })
        .collect();
    fresh.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id)));
    let rest = fresh.split_off(config.slate_size);
    cache.items = rest.into();
    user.consecutive_cached = 0;
    user.cache_occupancy = cache.len();
    Slate { items: fresh }
}

/// Cached serve: pops the first `K` stored items.
pub fn serve_cached(
    config: &SimConfig,
    user: &mut UserSessionState,
    cache: &mut ResultCache,
) -> Result<Slate, SimError> {
    let k = config.slate_size;
    if !cache.can_serve(k) {
        return Err(SimError::InsufficientCache {
            have: cache.len(),
            need: k,
        });
    }
    let items: Vec<ScoredItem> = cache.items.drain(..k).collect();
    user.consecutive_cached += 1;
    user.cache_occupancy = cache.len();
    Ok(Slate { items })
}

/// Deterministic part of the feedback: watch seconds for `slate`.
///
/// `user.consecutive_cached` must already include the serve being scored.
pub fn watch_time(
    config: &SimConfig,
    user: &UserSessionState,
    slate: &Slate,
    was_cached: bool,
) -> f64 {
    let base: f64 = slate.items.iter().map(|it| softplus(it.score)).sum::<f64>()
        * config.seconds_per_item
        * user.engagement;
    let discount = if was_cached {
        config.staleness_discount(user.consecutive_cached)
    } else {
        1.0
    };
    base * discount
}

pub fn feedback<R: Rng + ?Sized>(
    config: &SimConfig,
    user: &UserSessionState,
    slate: &Slate,
    was_cached: bool,
    rng: &mut R,
) -> FeedbackOutcome {
    let watch_time = watch_time(config, user, slate, was_cached);
    let p = config.continue_probability(watch_time);
    let continued = rng.random::<f64>() < p;
    FeedbackOutcome {
        watch_time,
        continued,
    }
}

/// Maps a requested action onto one that the cache and budget can honour.
pub fn resolve_action(
    requested: Action,
    cache: &ResultCache,
    slate_size: usize,
    budget_remaining: usize,
) -> Result<Action, SimError> {
    let cache_ok = cache.can_serve(slate_size);
    match requested {
        Action::Cached if cache_ok => Ok(Action::Cached),
        Action::Realtime if budget_remaining > 0 => Ok(Action::Realtime),
        _ if cache_ok => Ok(Action::Cached),
        _ if budget_remaining > 0 => Ok(Action::Realtime),
        _ => Err(SimError::ServeFailure),
    }
}

/// Outcome of serving one request.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub before: UserSessionState,
    pub action: Action,
    pub watch_time: f64,
    pub after: UserSessionState,
    pub done: bool,
}

/// All users, their caches and the dynamics RNG of one simulation run.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    users: Vec<UserSessionState>,
    caches: Vec<ResultCache>,
    rng: ChaCha8Rng,
    next_item_id: u64,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let mut user_rng = ChaCha8Rng::seed_from_u64(config.seed);
        user_rng.set_stream(STREAM_USERS);
        let users = (0..config.num_users)
            .map(|user_id| {
                let mut pref: Vec<f64> = (0..config.feature_dim)
                    .map(|_| StandardNormal.sample(&mut user_rng))
                    .collect();
                let norm = pref.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                pref.iter_mut().for_each(|v| *v /= norm);
                let engagement = if config.engagement_spread > 0.0 {
                    user_rng.random_range(
                        1.0 - config.engagement_spread..=1.0 + config.engagement_spread,
                    )
                } else {
                    1.0
                };
                UserSessionState {
                    user_id,
                    preference: pref,
                    engagement,
                    consecutive_cached: 0,
                    cache_occupancy: 0,
                    hour_of_day: 0,
                    session_active: false,
                }
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_DYNAMICS);
        Ok(Self {
            caches: vec![ResultCache::default(); config.num_users],
            config,
            users,
            rng,
            next_item_id: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn user(&self, user_id: usize) -> &UserSessionState {
        &self.users[user_id]
    }

    pub fn cache(&self, user_id: usize) -> &ResultCache {
        &self.caches[user_id]
    }

    pub fn users(&self) -> &[UserSessionState] {
        &self.users
    }

    /// Registers an arrival: stamps the hour and opens a session if none is active.
    ///
    /// A new session starts with an empty result cache.
    pub fn begin_request(&mut self, user_id: usize, hour: usize) -> &UserSessionState {
        let user = &mut self.users[user_id];
        user.hour_of_day = (hour % 24) as u32;
        if !user.session_active {
            user.session_active = true;
            user.consecutive_cached = 0;
            user.cache_occupancy = 0;
            self.caches[user_id].clear();
        }
        &self.users[user_id]
    }

    /// Serves the request with an already feasible action and draws feedback.
    pub fn step(&mut self, user_id: usize, action: Action) -> Result<StepRecord, SimError> {
        let user = &mut self.users[user_id];
        if !user.session_active {
            return Err(SimError::InactiveSession(user_id));
        }
        let before = user.clone();
        let cache = &mut self.caches[user_id];
        let slate = match action {
            Action::Realtime => serve_realtime(
                &self.config,
                user,
                cache,
                &mut self.next_item_id,
                &mut self.rng,
            ),
            Action::Cached => serve_cached(&self.config, user, cache)?,
        };
        let outcome = feedback(
            &self.config,
            user,
            &slate,
            action == Action::Cached,
            &mut self.rng,
        );
        if !outcome.continued {
            user.session_active = false;
        }
        Ok(StepRecord {
            before,
            action,
            watch_time: outcome.watch_time,
            after: user.clone(),
            done: !outcome.continued,
        })
    }

    /// Ends the session after a failed serve.
    pub fn fail(&mut self, user_id: usize) -> StepRecord {
        let before = self.users[user_id].clone();
        self.users[user_id].session_active = false;
        StepRecord {
            before,
            action: Action::Cached,
            watch_time: 0.0,
            after: self.users[user_id].clone(),
            done: true,
        }
    }

    /// Expected watch seconds of a real-time serve for `user_id`, estimated
    /// once per call from `samples` independent draws of a private RNG stream.
    pub fn expected_realtime_watch(&self, user_id: usize, samples: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        rng.set_stream(3);
        let mut probe = self.users[user_id].clone();
        let mut cache = ResultCache::default();
        let mut ids = 0;
        let total: f64 = (0..samples.max(1))
            .map(|_| {
                let slate =
                    serve_realtime(&self.config, &mut probe, &mut cache, &mut ids, &mut rng);
                watch_time(&self.config, &probe, &slate, false)
            })
            .sum();
        total / samples.max(1) as f64
    }

    /// Watch seconds the next cached serve would earn, or `None` if the cache cannot fill a slate.
    pub fn next_cached_watch(&self, user_id: usize) -> Option<f64> {
        let cache = &self.caches[user_id];
        let k = self.config.slate_size;
        if !cache.can_serve(k) {
            return None;
        }
        let mut probe = self.users[user_id].clone();
        probe.consecutive_cached += 1;
        let slate = Slate {
            items: cache.items.iter().take(k).copied().collect(),
        };
        Some(watch_time(&self.config, &probe, &slate, true))
    }
}
