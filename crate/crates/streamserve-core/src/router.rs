//! Multi-signal worker selection with overload exclusion and a
//! least-queue fallback.
//!
//! Each candidate worker is scored from its latest metrics snapshot:
//!
//! ```text
//! S = a1*C + a2*(1 - M) + a3*(1 - Q) + a4*(1 - L)
//! ```
//!
//! where `Q` is the live queue depth normalized by `q_max` and clamped at 1.
//! Workers whose snapshot is stale or whose overload score `M + 2*Q_raw/q_max`
//! exceeds the threshold are excluded from scoring. If nobody survives,
//! selection falls back to the worker with the smallest live queue; stale
//! workers stay eligible for the fallback because queue depths are read live.
//!
//! Note on the overload score: the memory term enters as a fraction in
//! `[0, 1]` (utilization-percent divided by 100), so the score ranges over
//! roughly `[0, 3]` and the 0.85 default threshold is meaningful.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::metrics::{is_stale, WorkerId, WorkerMetricsSnapshot, DEFAULT_STALENESS_WINDOW_MS};

/// Score weights; must be nonnegative and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingWeights {
    /// Weight on cache hit rate.
    pub cache: f64,
    /// Weight on memory headroom `1 - M`.
    pub memory: f64,
    /// Weight on queue headroom `1 - Q`.
    pub queue: f64,
    /// Weight on load headroom `1 - L`.
    pub load: f64,
}

impl Default for RoutingWeights {
    fn default() -> Self {
        Self {
            cache: 0.4,
            memory: 0.1,
            queue: 0.3,
            load: 0.2,
        }
    }
}

impl RoutingWeights {
    pub fn validate(&self) -> Result<(), RouterError> {
        let ws = [self.cache, self.memory, self.queue, self.load];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(RouterError::InvalidWeights);
        }
        let sum: f64 = ws.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(RouterError::InvalidWeights);
        }
        Ok(())
    }

    /// Divide all four weights by their sum. Errors if the sum is zero.
    pub fn normalized(&self) -> Result<Self, RouterError> {
        let sum = self.cache + self.memory + self.queue + self.load;
        if !sum.is_finite() || sum <= 0.0 {
            return Err(RouterError::InvalidWeights);
        }
        Ok(Self {
            cache: self.cache / sum,
            memory: self.memory / sum,
            queue: self.queue / sum,
            load: self.load / sum,
        })
    }
}

/// Overload detection parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverloadConfig {
    /// Threshold on the composite overload score (strict comparison).
    pub threshold: f64,
    /// Queue depth that counts as fully loaded when normalizing.
    pub q_max: u32,
}

impl Default for OverloadConfig {
    fn default() -> Self {
        Self {
            threshold: 0.85,
            q_max: 100,
        }
    }
}

impl OverloadConfig {
    pub fn validate(&self) -> Result<(), RouterError> {
        if self.threshold.is_nan() || self.threshold <= 0.0 || self.q_max == 0 {
            return Err(RouterError::InvalidOverloadConfig);
        }
        Ok(())
    }
}

/// Everything worker selection needs besides the candidates themselves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub weights: RoutingWeights,
    pub overload: OverloadConfig,
    pub staleness_window_ms: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            weights: RoutingWeights::default(),
            overload: OverloadConfig::default(),
            staleness_window_ms: DEFAULT_STALENESS_WINDOW_MS,
        }
    }
}

/// A worker up for selection: its last published snapshot plus the live
/// prefill queue depth, which overrides the snapshot's stored depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkerCandidate {
    pub snapshot: WorkerMetricsSnapshot,
    pub live_queue_depth: u32,
}

/// Per-worker audit entry inside a [`RoutingDecision`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerVerdict {
    pub worker_id: WorkerId,
    /// Present only for workers that passed the staleness and overload gates.
    pub score: Option<f64>,
    pub overloaded: bool,
    pub stale: bool,
}

/// The audit trail of one selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub chosen_worker: WorkerId,
    pub workers: Vec<WorkerVerdict>,
    pub used_fallback: bool,
}

impl RoutingDecision {
    /// One-line JSON rendering for audit logs.
    pub fn to_json_line(&self) -> alloc::string::String {
        serde_json::to_string(self).expect("decision serializes")
    }
}

/// Eq. of the score function; `queue_depth` is pre-normalized by `q_max` and
/// clamped at 1 so pathological queues keep the score in `[0, 1]`.
pub fn score(snapshot: &WorkerMetricsSnapshot, weights: &RoutingWeights, q_max: u32) -> f64 {
    let q = ((snapshot.queue_depth as f64) / (q_max as f64)).min(1.0);
    weights.cache * snapshot.cache_hit_rate
        + weights.memory * (1.0 - snapshot.memory_util)
        + weights.queue * (1.0 - q)
        + weights.load * (1.0 - snapshot.active_load)
}

/// Composite overload score: memory utilization as a fraction plus twice the
/// normalized queue depth. Deliberately unclamped; deep queues should read
/// as severely overloaded.
pub fn overload_score(snapshot: &WorkerMetricsSnapshot, cfg: &OverloadConfig) -> f64 {
    snapshot.memory_util + 2.0 * (snapshot.queue_depth as f64 / cfg.q_max as f64)
}

/// Strict threshold comparison, so a score exactly at the threshold is not
/// overloaded.
pub fn is_overloaded(snapshot: &WorkerMetricsSnapshot, cfg: &OverloadConfig) -> bool {
    overload_score(snapshot, cfg) > cfg.threshold
}

/// Select a worker from the candidate set.
///
/// Live queue depths override the snapshots' stored depths before scoring
/// and overload checks. Ties break toward the lowest worker id so identical
/// inputs always produce identical decisions.
pub fn select_worker(
    candidates: &[WorkerCandidate],
    now_ms: u64,
    cfg: &RouterConfig,
) -> Result<RoutingDecision, RouterError> {
    if candidates.is_empty() {
        return Err(RouterError::NoWorkers);
    }
    cfg.weights.validate()?;
    cfg.overload.validate()?;

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_unstable_by_key(|&i| candidates[i].snapshot.worker_id);

    let mut verdicts = Vec::with_capacity(candidates.len());
    let mut best: Option<(WorkerId, f64)> = None;
    for &i in &order {
        let cand = &candidates[i];
        let mut snap = cand.snapshot;
        snap.queue_depth = cand.live_queue_depth;
        let stale = is_stale(&cand.snapshot, now_ms, cfg.staleness_window_ms);
        let overloaded = is_overloaded(&snap, &cfg.overload);
        let s = if stale || overloaded {
            None
        } else {
            let s = score(&snap, &cfg.weights, cfg.overload.q_max);
            match best {
                Some((_, bs)) if s <= bs => {}
                _ => best = Some((snap.worker_id, s)),
            }
            Some(s)
        };
        verdicts.push(WorkerVerdict {
            worker_id: snap.worker_id,
            score: s,
            overloaded,
            stale,
        });
    }

    if let Some((winner, _)) = best {
        return Ok(RoutingDecision {
            chosen_worker: winner,
            workers: verdicts,
            used_fallback: false,
        });
    }

    // Everyone is stale or saturated: take the shortest live queue.
    let mut fallback: Option<(WorkerId, u32)> = None;
    for &i in &order {
        let cand = &candidates[i];
        let qd = cand.live_queue_depth;
        match fallback {
            Some((_, best_qd)) if qd >= best_qd => {}
            _ => fallback = Some((cand.snapshot.worker_id, qd)),
        }
    }
    Ok(RoutingDecision {
        chosen_worker: fallback.expect("nonempty candidates").0,
        workers: verdicts,
        used_fallback: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouterError {
    NoWorkers,
    InvalidWeights,
    InvalidOverloadConfig,
}

impl fmt::Display for RouterError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RouterError::NoWorkers => write!(f, "no workers to select from"),
            RouterError::InvalidWeights => {
                write!(f, "routing weights must be nonnegative and sum to 1")
            }
            RouterError::InvalidOverloadConfig => {
                write!(f, "overload config requires threshold > 0 and q_max >= 1")
            }
        }
    }
}

impl core::error::Error for RouterError {}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn snap(worker_id: WorkerId, c: f64, m: f64, q: u32, l: f64) -> WorkerMetricsSnapshot {
        WorkerMetricsSnapshot {
            worker_id,
            timestamp_ms: 0,
            cache_hit_rate: c,
            memory_util: m,
            queue_depth: q,
            active_load: l,
            acceptance_rate: 0.5,
            recent_throughput: 100.0,
        }
    }

    #[test]
    fn score_extremes() {
        let w = RoutingWeights::default();
        assert_eq!(score(&snap(1, 1.0, 0.0, 0, 0.0), &w, 100), 1.0);
        assert_eq!(score(&snap(1, 0.0, 1.0, 100, 1.0), &w, 100), 0.0);
    }

    #[test]
    fn score_worked_example() {
        // 0.4*0.5 + 0.1*0.6 + 0.3*0.8 + 0.2*0.7 = 0.64
        let s = score(&snap(1, 0.5, 0.4, 20, 0.3), &RoutingWeights::default(), 100);
        assert!((s - 0.64).abs() < 1e-12);
    }

    #[test]
    fn overload_score_examples() {
        let cfg = OverloadConfig::default();
        assert_eq!(overload_score(&snap(1, 0.0, 0.0, 0, 0.0), &cfg), 0.0);
        assert_eq!(overload_score(&snap(1, 0.0, 0.5, 20, 0.0), &cfg), 0.9);
        // boundary: exactly at the threshold is not overloaded
        let s = snap(1, 0.0, 0.85, 0, 0.0);
        assert_eq!(overload_score(&s, &cfg), 0.85);
        assert!(!is_overloaded(&s, &cfg));
        assert!(is_overloaded(&snap(1, 0.0, 0.5, 20, 0.0), &cfg));
    }

    fn cand(s: WorkerMetricsSnapshot) -> WorkerCandidate {
        WorkerCandidate {
            live_queue_depth: s.queue_depth,
            snapshot: s,
        }
    }

    #[test]
    fn only_survivor_wins() {
        let cfg = RouterConfig::default();
        let healthy = cand(snap(1, 0.2, 0.3, 2, 0.2));
        let overloaded = cand(snap(2, 0.9, 0.9, 40, 0.9));
        let d = select_worker(&[healthy, overloaded], 0, &cfg).unwrap();
        assert_eq!(d.chosen_worker, 1);
        assert!(!d.used_fallback);
        assert!(d.workers[1].overloaded);
        assert!(d.workers[1].score.is_none());
    }

    #[test]
    fn all_overloaded_falls_back_to_min_queue() {
        let cfg = RouterConfig::default();
        let a = cand(snap(1, 0.2, 0.9, 5, 0.9));
        let b = cand(snap(2, 0.2, 0.9, 2, 0.9));
        let d = select_worker(&[a, b], 0, &cfg).unwrap();
        assert_eq!(d.chosen_worker, 2);
        assert!(d.used_fallback);
    }

    #[test]
    fn argmax_score_wins() {
        let cfg = RouterConfig::default();
        // scores 0.64 and 0.71 by direct evaluation of the score function
        let a = cand(snap(1, 0.5, 0.4, 20, 0.3));
        let b = cand(snap(2, 0.5, 0.2, 10, 0.2));
        let sb = score(&b.snapshot, &cfg.weights, cfg.overload.q_max);
        assert!((sb - 0.71).abs() < 1e-12);
        let d = select_worker(&[a, b], 0, &cfg).unwrap();
        assert_eq!(d.chosen_worker, 2);
        assert!(!d.used_fallback);
    }

    #[test]
    fn live_queue_depth_overrides_snapshot() {
        let cfg = RouterConfig::default();
        // snapshot says quiet, live queue says saturated
        let mut c = cand(snap(1, 0.2, 0.3, 0, 0.2));
        c.live_queue_depth = 50;
        let lone = select_worker(&[c], 0, &cfg).unwrap();
        // overload score 0.3 + 2*0.5 = 1.3 > 0.85 -> fallback to itself
        assert!(lone.used_fallback);
        assert_eq!(lone.chosen_worker, 1);
    }

    #[test]
    fn stale_workers_score_nothing_but_fall_back() {
        let cfg = RouterConfig::default();
        let mut a = cand(snap(1, 0.9, 0.1, 1, 0.1));
        a.snapshot.timestamp_ms = 0;
        let d = select_worker(&[a], 5_000, &cfg).unwrap();
        assert!(d.used_fallback);
        assert!(d.workers[0].stale);
        assert_eq!(d.chosen_worker, 1);
    }

    #[test]
    fn empty_worker_set_is_an_error() {
        assert!(matches!(
            select_worker(&[], 0, &RouterConfig::default()),
            Err(RouterError::NoWorkers)
        ));
    }

    #[test]
    fn ties_break_to_lowest_worker_id() {
        let cfg = RouterConfig::default();
        let a = cand(snap(2, 0.5, 0.5, 0, 0.5));
        let b = cand(snap(1, 0.5, 0.5, 0, 0.5));
        // identical signals, passed in descending id order
        let d = select_worker(&[a, b], 0, &cfg).unwrap();
        assert_eq!(d.chosen_worker, 1);
    }

    #[test]
    fn decision_serializes_to_json_line() {
        let cfg = RouterConfig::default();
        let d = select_worker(&[cand(snap(1, 0.5, 0.5, 0, 0.5))], 0, &cfg).unwrap();
        let line = d.to_json_line();
        assert!(line.contains("\"chosen_worker\":1"));
        assert!(line.contains("\"used_fallback\":false"));
    }

    fn arb_snapshot(id: WorkerId) -> impl Strategy<Value = WorkerMetricsSnapshot> {
        (0.0f64..=1.0, 0.0f64..=1.0, 0u32..200, 0.0f64..=1.0).prop_map(move |(c, m, q, l)| {
            snap(id, c, m, q, l)
        })
    }

    proptest! {
        #[test]
        fn score_monotone_in_each_signal(
            base in arb_snapshot(1),
            bump in 0.01f64..0.5,
            qbump in 1u32..50,
        ) {
            let w = RoutingWeights::default();
            let s0 = score(&base, &w, 100);
            let mut better_c = base;
            better_c.cache_hit_rate = (base.cache_hit_rate + bump).min(1.0);
            prop_assert!(score(&better_c, &w, 100) >= s0);
            let mut worse_m = base;
            worse_m.memory_util = (base.memory_util + bump).min(1.0);
            prop_assert!(score(&worse_m, &w, 100) <= s0);
            let mut worse_q = base;
            worse_q.queue_depth = base.queue_depth + qbump;
            prop_assert!(score(&worse_q, &w, 100) <= s0);
            let mut worse_l = base;
            worse_l.active_load = (base.active_load + bump).min(1.0);
            prop_assert!(score(&worse_l, &w, 100) <= s0);
        }

        #[test]
        fn rescaled_weights_preserve_argmax(
            snaps in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0u32..80, 0.0f64..=1.0), 2..6),
            k in 0.1f64..10.0,
        ) {
            let cands: Vec<WorkerCandidate> = snaps
                .iter()
                .enumerate()
                .map(|(i, &(c, m, q, l))| cand(snap(i as WorkerId + 1, c, m, q, l)))
                .collect();
            let cfg = RouterConfig::default();
            let scaled = RoutingWeights {
                cache: cfg.weights.cache * k,
                memory: cfg.weights.memory * k,
                queue: cfg.weights.queue * k,
                load: cfg.weights.load * k,
            }
            .normalized()
            .unwrap();
            let cfg2 = RouterConfig { weights: scaled, ..cfg };
            let d1 = select_worker(&cands, 0, &cfg).unwrap();
            let d2 = select_worker(&cands, 0, &cfg2).unwrap();
            prop_assert_eq!(d1.chosen_worker, d2.chosen_worker);
            prop_assert_eq!(d1.used_fallback, d2.used_fallback);
        }

        #[test]
        fn never_returns_overloaded_without_fallback(
            snaps in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0u32..200, 0.0f64..=1.0), 1..6),
        ) {
            let cands: Vec<WorkerCandidate> = snaps
                .iter()
                .enumerate()
                .map(|(i, &(c, m, q, l))| cand(snap(i as WorkerId + 1, c, m, q, l)))
                .collect();
            let cfg = RouterConfig::default();
            let d = select_worker(&cands, 0, &cfg).unwrap();
            let chosen = &cands[(d.chosen_worker - 1) as usize];
            if !d.used_fallback {
                prop_assert!(!is_overloaded(&chosen.snapshot, &cfg.overload));
            }
            // single worker is always chosen, fallback or not
            if cands.len() == 1 {
                prop_assert_eq!(d.chosen_worker, 1);
            }
            // determinism
            let d2 = select_worker(&cands, 0, &cfg).unwrap();
            prop_assert_eq!(d, d2);
        }
    }
}
