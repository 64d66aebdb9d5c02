//! Allocation stage: strict hourly budget, streaming pool-rank admission and
//! batch reference allocators.
//!
//! [`RankIndex`] keeps two buffers. Requests of the running period are
//! counted into per-bucket atomic cells; the rank of a new request is read
//! from an immutable prefix array built from the previous period's counts.
//! [`RankIndex::rotate_period`] builds the next prefix array and publishes it
//! with one atomic pointer swap, so readers never observe a partial array.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use arc_swap::ArcSwap;

use crate::sim::Action;

/// Bucket of a relaxed action at resolution `eta`; `1.0` falls in the last bucket.
pub fn bucketize(relaxed: f64, eta: f64) -> usize {
    let buckets = bucket_count(eta);
    let raw = (relaxed.clamp(0.0, 1.0) / eta + 1e-9).floor();
    (raw as usize).min(buckets - 1)
}

pub fn bucket_count(eta: f64) -> usize {
    ((1.0 / eta) - 1e-9).ceil().max(1.0) as usize
}

#[derive(Debug)]
pub struct RankIndex {
    resolution: f64,
    counts: Vec<AtomicU64>,
    online: ArcSwap<Vec<u64>>,
}

impl RankIndex {
    pub fn new(resolution: f64) -> Self {
        assert!(
            resolution > 0.0 && resolution < 1.0,
            "resolution must lie in (0, 1), got {resolution}"
        );
        let n = bucket_count(resolution);
        Self {
            resolution,
            counts: (0..n).map(|_| AtomicU64::new(0)).collect(),
            online: ArcSwap::from_pointee(vec![0; n]),
        }
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn buckets(&self) -> usize {
        self.counts.len()
    }

    pub fn bucket(&self, relaxed: f64) -> usize {
        bucketize(relaxed, self.resolution)
    }

    /// Number of previous-period requests in buckets strictly above `bucket`.
    pub fn rank_lookup(&self, bucket: usize) -> u64 {
        self.online.load()[bucket]
    }

    pub fn rank_of(&self, relaxed: f64) -> u64 {
        self.rank_lookup(self.bucket(relaxed))
    }

    /// Counts a request of the running period.
    pub fn record(&self, bucket: usize) {
        self.counts[bucket].fetch_add(1, Ordering::Relaxed);
    }

    pub fn current_counts(&self) -> Vec<u64> {
        self.counts
            .iter()
            .map(|c| c.load(Ordering::Relaxed))
            .collect()
    }

    /// Snapshot of the prefix array readers currently see.
    pub fn online_prefix(&self) -> Arc<Vec<u64>> {
        self.online.load_full()
    }

    /// Closes the running period: drains its counts into a fresh strict-greater
    /// suffix-sum array and publishes it as the online snapshot.
    pub fn rotate_period(&self) {
        let drained: Vec<u64> = self
            .counts
            .iter()
            .map(|c| c.swap(0, Ordering::AcqRel))
            .collect();
        self.online.store(Arc::new(prefix_from_counts(&drained)));
    }

    /// Publishes an externally built prefix array.
    pub fn install_prefix(&self, prefix: Vec<u64>) {
        assert_eq!(
            prefix.len(),
            self.buckets(),
            "prefix length must match bucket count"
        );
        self.online.store(Arc::new(prefix));
    }
}

/// `A[i] = sum of C[j] for j > i`.
pub fn prefix_from_counts(counts: &[u64]) -> Vec<u64> {
    let mut prefix = vec![0; counts.len()];
    let mut above = 0;
    for i in (0..counts.len()).rev() {
        prefix[i] = above;
        above += counts[i];
    }
    prefix
}

/// Strict per-period real-time counter.
#[derive(Debug)]
pub struct BudgetLedger {
    budget: u64,
    consumed: AtomicU64,
    period: AtomicU64,
}

impl BudgetLedger {
    pub fn new(budget: u64) -> Self {
        Self {
            budget,
            consumed: AtomicU64::new(0),
            period: AtomicU64::new(0),
        }
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn consumed(&self) -> u64 {
        self.consumed.load(Ordering::Acquire)
    }

    pub fn remaining(&self) -> u64 {
        self.budget - self.consumed()
    }

    pub fn period(&self) -> u64 {
        self.period.load(Ordering::Acquire)
    }

    /// Takes one unit of budget if any is left.
    pub fn try_consume(&self) -> bool {
        self.consumed
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |c| {
                (c < self.budget).then_some(c + 1)
            })
            .is_ok()
    }

    pub fn start_period(&self, period: u64) {
        self.period.store(period, Ordering::Release);
        self.consumed.store(0, Ordering::Release);
    }
}

/// Pool-rank admission of one request.
///
/// The request is counted into the running period whatever the outcome. A
/// rank below the budget admits it unless the ledger is already spent, in
/// which case it is downgraded to a cached serve.
pub fn decide(index: &RankIndex, ledger: &BudgetLedger, relaxed: f64) -> Action {
    let bucket = index.bucket(relaxed);
    let rank = index.rank_lookup(bucket);
    index.record(bucket);
    if rank < ledger.budget() && ledger.try_consume() {
        Action::Realtime
    } else {
        Action::Cached
    }
}

/// Real-time for the `budget` largest values, ties to the earlier index.
///
/// When `budget` is at least the number of values every entry is selected.
pub fn batch_oracle(values: &[f64], budget: usize) -> Vec<Action> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut out = vec![Action::Cached; values.len()];
    for &i in order.iter().take(budget) {
        out[i] = Action::Realtime;
    }
    out
}

pub fn greedy_allocator(ledger: &BudgetLedger) -> Action {
    Action::from_bit(ledger.try_consume())
}

/// Upper-bound reference; ignores the budget.
pub fn all_realtime_allocator() -> Action {
    Action::Realtime
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucketize_examples() {
        assert_eq!(bucketize(0.37, 0.01), 37);
        assert_eq!(bucketize(0.0, 0.01), 0);
        assert_eq!(bucketize(1.0, 0.01), 99);
        assert_eq!(bucket_count(0.001), 1000);
        assert_eq!(bucketize(0.5, 0.001), 500);
    }

    fn index_with_pool(pool: &[f64], eta: f64) -> RankIndex {
        let idx = RankIndex::new(eta);
        for &v in pool {
            idx.record(idx.bucket(v));
        }
        idx.rotate_period();
        idx
    }

    #[test]
    fn rank_lookup_examples() {
        let idx = index_with_pool(&[0.9, 0.8, 0.7], 0.1);
        assert_eq!(idx.rank_of(0.85), 1);
        assert_eq!(idx.rank_of(0.95), 0);
        assert_eq!(idx.rank_of(0.05), 3);
    }

    #[test]
    fn rotate_builds_strict_suffix_sums() {
        assert_eq!(prefix_from_counts(&[0, 2, 1]), vec![3, 1, 0]);
        let idx = RankIndex::new(0.5);
        assert_eq!(idx.buckets(), 2);
        idx.rotate_period();
        assert!(idx.online_prefix().iter().all(|&a| a == 0));
        assert_eq!(idx.rank_of(0.1), 0);
    }

    #[test]
    fn rotate_resets_counts_and_forgets_older_periods() {
        let idx = index_with_pool(&[0.9, 0.9, 0.9], 0.1);
        assert!(idx.current_counts().iter().all(|&c| c == 0));
        assert_eq!(idx.rank_of(0.1), 3);
        idx.record(idx.bucket(0.3));
        idx.rotate_period();
        assert_eq!(idx.rank_of(0.1), 1);
        assert_eq!(idx.rank_of(0.35), 0);
    }

    #[test]
    fn decide_examples() {
        // Pool with two entries above bucket 1, so o = 2.
        let idx = index_with_pool(&[0.9, 0.8], 0.1);
        let ledger = BudgetLedger::new(5);
        assert_eq!(decide(&idx, &ledger, 0.15), Action::Realtime);
        assert_eq!(ledger.consumed(), 1);

        while ledger.try_consume() {}
        assert_eq!(decide(&idx, &ledger, 0.15), Action::Cached);
        assert_eq!(ledger.consumed(), 5);
        assert_eq!(idx.current_counts()[1], 2);

        let big = index_with_pool(&[0.9; 7], 0.1);
        let ledger = BudgetLedger::new(5);
        assert_eq!(decide(&big, &ledger, 0.15), Action::Cached);
        assert_eq!(ledger.consumed(), 0);
    }

    #[test]
    fn ledger_never_exceeds_budget() {
        let ledger = BudgetLedger::new(3);
        let granted = (0..10).filter(|_| ledger.try_consume()).count();
        assert_eq!(granted, 3);
        assert_eq!(ledger.remaining(), 0);
        ledger.start_period(1);
        assert_eq!((ledger.consumed(), ledger.period()), (0, 1));
    }

    #[test]
    fn concurrent_decisions_respect_budget() {
        let idx = Arc::new(index_with_pool(&[0.1; 10], 0.01));
        let ledger = Arc::new(BudgetLedger::new(50));
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let (idx, ledger) = (Arc::clone(&idx), Arc::clone(&ledger));
                std::thread::spawn(move || {
                    (0..100)
                        .filter(|i| {
                            decide(&idx, &ledger, 0.5 + 0.001 * ((t * 100 + i) % 400) as f64)
                                .is_realtime()
                        })
                        .count()
                })
            })
            .collect();
        let admitted: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
        assert_eq!(admitted, 50);
        assert_eq!(idx.current_counts().iter().sum::<u64>(), 800);
    }

    #[test]
    fn batch_oracle_examples() {
        use Action::*;
        assert_eq!(
            batch_oracle(&[5.0, 1.0, 3.0], 2),
            vec![Realtime, Cached, Realtime]
        );
        assert_eq!(
            batch_oracle(&[2.0, 2.0, 1.0], 1),
            vec![Realtime, Cached, Cached]
        );
        assert_eq!(batch_oracle(&[1.0, 2.0], 5), vec![Realtime, Realtime]);
    }

    #[test]
    fn greedy_takes_first_m_arrivals() {
        let ledger = BudgetLedger::new(5);
        let actions: Vec<Action> = (0..10).map(|_| greedy_allocator(&ledger)).collect();
        assert!(actions[..5].iter().all(|a| a.is_realtime()));
        assert!(actions[5..].iter().all(|a| !a.is_realtime()));
        assert_eq!(all_realtime_allocator(), Action::Realtime);
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn rank_brackets_the_exact_count(
            pool in prop::collection::vec(0.0f64..=1.0, 0..300),
            query in 0.0f64..=1.0,
            eta in prop::sample::select(vec![0.001, 0.01, 0.05, 0.25]),
        ) {
            let index = RankIndex::new(eta);
            for &v in &pool {
                index.record(index.bucket(v));
            }
            index.rotate_period();
            let b = index.bucket(query);
            let rank = index.rank_lookup(b);
            let above = pool.iter().filter(|&&v| index.bucket(v) > b).count() as u64;
            let same = pool.iter().filter(|&&v| index.bucket(v) == b).count() as u64;
            let exact = pool.iter().filter(|&&v| v > query).count() as u64;
            prop_assert_eq!(rank, above);
            prop_assert!(rank <= exact && exact <= rank + same);
        }

        #[test]
        fn rank_is_monotone_in_the_relaxed_action(
            pool in prop::collection::vec(0.0f64..=1.0, 1..200),
            mut a in 0.0f64..=1.0,
            mut b in 0.0f64..=1.0,
        ) {
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            let index = RankIndex::new(0.01);
            for &v in &pool {
                index.record(index.bucket(v));
            }
            index.rotate_period();
            prop_assert!(index.rank_of(a) >= index.rank_of(b));
        }

        #[test]
        fn admissions_never_exceed_the_budget(
            relaxed in prop::collection::vec(0.0f64..=1.0, 0..400),
            previous in prop::collection::vec(0.0f64..=1.0, 0..400),
            budget in 0u64..120,
        ) {
            let index = RankIndex::new(0.001);
            for &v in &previous {
                index.record(index.bucket(v));
            }
            index.rotate_period();
            let ledger = BudgetLedger::new(budget);
            let admitted = relaxed.iter().filter(|&&a| decide(&index, &ledger, a).is_realtime()).count() as u64;
            prop_assert!(admitted <= budget);
            prop_assert_eq!(admitted, ledger.consumed());
        }

        #[test]
        fn greedy_admits_exactly_min_of_budget_and_arrivals(arrivals in 0usize..300, budget in 0u64..200) {
            let ledger = BudgetLedger::new(budget);
            let admitted = (0..arrivals).filter(|_| greedy_allocator(&ledger).is_realtime()).count() as u64;
            prop_assert_eq!(admitted, budget.min(arrivals as u64));
        }

        #[test]
        fn batch_oracle_selects_a_dominating_set(
            values in prop::collection::vec(-1e3f64..1e3, 0..60),
            budget in 0usize..80,
        ) {
            let picks = batch_oracle(&values, budget);
            let chosen: Vec<f64> = values.iter().zip(&picks).filter(|(_, a)| a.is_realtime()).map(|(v, _)| *v).collect();
            let rest: Vec<f64> = values.iter().zip(&picks).filter(|(_, a)| !a.is_realtime()).map(|(v, _)| *v).collect();
            prop_assert_eq!(chosen.len(), budget.min(values.len()));
            let low = chosen.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(rest.iter().all(|&v| v <= low));
        }
    }
}
