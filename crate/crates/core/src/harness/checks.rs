//! Property-check battery behind the `check` command.
//!
//! Each check returns a [`CheckResult`]; the battery fails if any does.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Method, NopoolRule};
use super::episode::{run_episode, LoopParams};
use crate::allocation::{batch_oracle, prefix_from_counts, RankIndex};
use crate::nn::{Activation, DenseNetParams};
use crate::prediction::{
    actor_loss, critic_loss, net_dims, penalty, state_dim, Agent, Penalty, PenaltySpec,
    TrainerConfig, Transition,
};
use crate::sim::{Action, SimConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub seed: u64,
    pub oracle_vectors: usize,
    pub max_n: usize,
    pub jensen_batches: usize,
    pub gradient_nets: usize,
    pub budget_hours: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            oracle_vectors: 200,
            max_n: 12,
            jensen_batches: 1000,
            gradient_nets: 50,
            budget_hours: 48,
        }
    }
}

pub const ORACLE_TIME_LIMIT_SECS: f64 = 60.0;
pub const GRADIENT_REL_TOL: f64 = 1e-4;
/// Components with both analytic and numeric magnitude below this are compared absolutely.
pub const GRADIENT_ABS_FLOOR: f64 = 1e-9;
pub const MONOTONE_GRID: f64 = 1e-3;

/// Best subset sum for every subset size, by enumerating all `2^n` masks.
/// Returns `(best_sum, best_mask)` indexed by size.
pub fn exhaustive_best_subsets(values: &[f64]) -> Vec<(f64, u32)> {
    let n = values.len();
    assert!(n <= 20);
    let mut best = vec![(f64::NEG_INFINITY, 0u32); n + 1];
    for mask in 0u32..(1 << n) {
        let sum: f64 = (0..n)
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| values[i])
            .sum();
        let k = mask.count_ones() as usize;
        if sum > best[k].0 {
            best[k] = (sum, mask);
        }
    }
    best
}

fn oracle_equivalence(opts: &CheckOptions) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let start = Instant::now();
    let mut mismatches = 0usize;
    let mut cases = 0usize;
    for _ in 0..opts.oracle_vectors {
        for n in 1..=opts.max_n {
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let best = exhaustive_best_subsets(&values);
            for m in 1..=n {
                cases += 1;
                let pick = batch_oracle(&values, m);
                let mask = pick
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| a.is_realtime())
                    .fold(0u32, |acc, (i, _)| acc | 1 << i);
                if mask != best[m].1 {
                    mismatches += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    CheckResult {
        name: "oracle-equivalence",
        passed: mismatches == 0 && secs < ORACLE_TIME_LIMIT_SECS,
        detail: format!("{cases} (vector, M) cases, {mismatches} mismatches, {secs:.2}s"),
    }
}

/// Grid minimizer of `-(q0 + a * dq) + alpha * T(a, m)` over the open unit interval.
pub fn grid_minimizer(kind: Penalty, alpha: f64, dq: f64, m: f64) -> f64 {
    let cells = (1.0 / MONOTONE_GRID).round() as usize;
    (1..cells)
        .map(|i| i as f64 * MONOTONE_GRID)
        .map(|a| {
            (
                a,
                -a * dq + alpha * penalty(kind, a, m).expect("interior").0,
            )
        })
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("non-empty grid")
        .0
}

fn monotonicity() -> CheckResult {
    let mut violations = 0;
    let mut sweeps = 0;
    for alpha in [0.5, 1.0, 2.0] {
        for kind in [Penalty::Mse, Penalty::Kl] {
            for m in [0.2, 0.5, 0.8] {
                sweeps += 1;
                let mut prev = 0.0;
                for i in 0..=100 {
                    let dq = -5.0 + 0.1 * i as f64;
                    let a = grid_minimizer(kind, alpha, dq, m);
                    if a < prev - MONOTONE_GRID - 1e-12 {
                        violations += 1;
                    }
                    prev = a;
                }
            }
        }
    }
    CheckResult {
        name: "penalized-minimizer-monotone",
        passed: violations == 0,
        detail: format!("{sweeps} sweeps of 101 gaps, {violations} decreases beyond one grid cell"),
    }
}

fn jensen(opts: &CheckOptions) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x1e45);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..opts.jensen_batches {
        let m = rng.random_range(0.01..0.99);
        let batch: Vec<f64> = (0..256)
            .map(|_| rng.random_range(1e-6..1.0 - 1e-6))
            .collect();
        let mean = batch.iter().sum::<f64>() / batch.len() as f64;
        for kind in [Penalty::Mse, Penalty::Kl] {
            let lhs = penalty(kind, mean, m).expect("interior").0;
            let rhs = batch
                .iter()
                .map(|&a| penalty(kind, a, m).expect("interior").0)
                .sum::<f64>()
                / batch.len() as f64;
            worst = worst.max(lhs - rhs);
        }
    }
    CheckResult {
        name: "penalty-jensen-bound",
        passed: worst <= 1e-12,
        detail: format!("max T(mean) - mean(T) = {worst:.3e}"),
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < GRADIENT_ABS_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Largest relative error between `grads` and central differences of `loss` over `net`'s parameters.
pub fn max_fd_error(
    net: &DenseNetParams,
    grads: &[f64],
    loss: impl Fn(&DenseNetParams) -> f64,
) -> f64 {
    let h = 1e-5;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..net.num_params() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = loss(&probe);
        probe.params_mut()[i] = orig - h;
        let down = loss(&probe);
        probe.params_mut()[i] = orig;
        worst = worst.max(rel_err(grads[i], (up - down) / (2.0 * h)));
    }
    worst
}

/// Random net with every parameter jittered, so no ReLU input sits exactly
/// on the kink (zero-initialized biases behind a dead layer would).
fn jittered(dims: &[usize], head: Activation, rng: &mut ChaCha8Rng) -> DenseNetParams {
    let mut net = DenseNetParams::random(dims, head, rng).expect("valid dims");
    for p in net.params_mut() {
        *p += rng.random_range(-0.1..0.1);
    }
    net
}

fn gradients(opts: &CheckOptions) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9ad);
    let mut worst_actor: f64 = 0.0;
    let mut worst_critic: f64 = 0.0;
    for k in 0..opts.gradient_nets {
        let dim = rng.random_range(2..7);
        let width = rng.random_range(3..9);
        let actor = jittered(&net_dims(dim, width, 2, 1), Activation::Logistic, &mut rng);
        let critic = jittered(&net_dims(dim, width, 2, 2), Activation::Identity, &mut rng);
        let critic_t = jittered(&net_dims(dim, width, 2, 2), Activation::Identity, &mut rng);
        let state: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = rng.random_range(0.05..0.95);
        let spec = PenaltySpec {
            kind: if k % 2 == 0 {
                Penalty::Mse
            } else {
                Penalty::Kl
            },
            alpha: rng.random_range(0.1..3.0),
        };
        let (_, g) = actor_loss(&actor, &critic, &state, m, &spec).unwrap();
        worst_actor = worst_actor.max(max_fd_error(&actor, &g, |p| {
            actor_loss(p, &critic, &state, m, &spec).unwrap().0
        }));
        let t = Transition {
            state: state.clone(),
            action: Action::from_bit(rng.random_bool(0.5)),
            reward: rng.random_range(0.0..2.0),
            next_state: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            done: rng.random_bool(0.3),
            active: true,
            target_ratio: m,
        };
        let (_, g) = critic_loss(&critic, &actor, &critic_t, &t, 0.9).unwrap();
        worst_critic = worst_critic.max(max_fd_error(&critic, &g, |p| {
            critic_loss(p, &actor, &critic_t, &t, 0.9).unwrap().0
        }));
    }
    CheckResult {
        name: "loss-gradients",
        passed: worst_actor <= GRADIENT_REL_TOL && worst_critic <= GRADIENT_REL_TOL,
        detail: format!("max rel err actor {worst_actor:.2e}, critic {worst_critic:.2e}"),
    }
}

fn budget_strictness(opts: &CheckOptions) -> CheckResult {
    let sim = SimConfig {
        hours: opts.budget_hours,
        seed: opts.seed,
        ..SimConfig::default()
    };
    let agent = Agent::new(
        state_dim(&sim),
        TrainerConfig {
            seed: opts.seed,
            ..TrainerConfig::default()
        },
    )
    .expect("default trainer is valid");
    let mut violations = 0;
    let mut unbalanced = 0;
    for method in Method::ALL.into_iter().filter(|m| m.is_budgeted()) {
        for rule in [NopoolRule::Threshold, NopoolRule::Sample] {
            if rule == NopoolRule::Sample && method != Method::RpafNopool {
                continue;
            }
            let params = LoopParams {
                eta: 0.001,
                nopool_rule: rule,
                hour_features: false,
                oracle_samples: 4,
            };
            let r = run_episode(sim.clone(), method, Some(&agent), params).expect("valid episode");
            violations += r
                .hourly
                .iter()
                .filter(|h| h.realtime_served > h.budget)
                .count();
            unbalanced += r.hourly.iter().filter(|h| !h.is_balanced()).count();
        }
    }
    CheckResult {
        name: "strict-budget",
        passed: violations == 0 && unbalanced == 0,
        detail: format!("{violations} over-budget hours, {unbalanced} unbalanced rows"),
    }
}

/// Whether every lookup is within its own bucket's population of the exact strict-greater count.
pub fn rank_consistent(index: &RankIndex, pool: &[f64], queries: &[f64]) -> bool {
    let counts = bucket_counts(index, pool);
    queries.iter().all(|&q| {
        let exact = pool.iter().filter(|&&v| v > q).count() as i64;
        let b = index.bucket(q);
        (index.rank_lookup(b) as i64 - exact).unsigned_abs() <= counts[b]
    })
}

fn bucket_counts(index: &RankIndex, pool: &[f64]) -> Vec<u64> {
    let mut counts = vec![0u64; index.buckets()];
    for &v in pool {
        counts[index.bucket(v)] += 1;
    }
    counts
}

fn rank_consistency(opts: &CheckOptions) -> (CheckResult, CheckResult) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7a2c);
    let index = RankIndex::new(0.01);
    let pool: Vec<f64> = (0..2000).map(|_| rng.random::<f64>().powi(2)).collect();
    for &v in &pool {
        index.record(index.bucket(v));
    }
    index.rotate_period();
    let queries: Vec<f64> = (0..500).map(|_| rng.random()).collect();
    let ok = rank_consistent(&index, &pool, &queries);

    let mut corrupted = prefix_from_counts(&bucket_counts(&index, &pool));
    corrupted.reverse();
    index.install_prefix(corrupted);
    let detected = !rank_consistent(&index, &pool, &queries);
    (
        CheckResult {
            name: "rank-consistency",
            passed: ok,
            detail: format!("{} queries against a pool of {}", queries.len(), pool.len()),
        },
        CheckResult {
            name: "rank-consistency-negative-control",
            passed: detected,
            detail: format!(
                "reversed prefix array {}",
                if detected { "detected" } else { "missed" }
            ),
        },
    )
}

/// Runs every check in a fixed order.
pub fn run_property_checks(opts: &CheckOptions) -> Vec<CheckResult> {
    let (rank, control) = rank_consistency(opts);
    vec![
        oracle_equivalence(opts),
        monotonicity(),
        jensen(opts),
        gradients(opts),
        budget_strictness(opts),
        rank,
        control,
    ]
}
