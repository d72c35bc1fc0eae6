//! Worker telemetry and per-request performance metrics.
//!
//! Every stream pair publishes a [`WorkerMetricsSnapshot`] into the
//! [`MetricsRegistry`] on a fixed cadence (500 virtual ms by default); the
//! router and the speculation controller both read from this registry.
//! Completed requests are summarized into [`CompletionRecord`]s carrying
//! end-to-end latency, TPOT (mean inter-token gap), and token throughput.
//!
//! The registry is plain data: in simulation everything runs on the single
//! event loop, and live deployments that share it across threads wrap it in
//! a lock, so readers always observe whole snapshots.

use alloc::collections::BTreeMap;
use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Stream-pair index. Pairs are numbered from 1.
pub type WorkerId = u32;

/// Metrics collection cadence, virtual milliseconds.
pub const DEFAULT_COLLECTION_INTERVAL_MS: u64 = 500;
/// A snapshot older than this is considered stale for routing purposes.
/// Twice the collection cadence tolerates one missed publication.
pub const DEFAULT_STALENESS_WINDOW_MS: u64 = 1_000;

/// One worker's timestamped signal vector.
///
/// All fractional signals are stored in `[0, 1]`; `queue_depth` is a raw
/// request count and gets normalized by the consumer (`q_max` in the router).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkerMetricsSnapshot {
    pub worker_id: WorkerId,
    pub timestamp_ms: u64,
    /// Cache hit rate `C`, EMA of per-request prefix-cache hits.
    pub cache_hit_rate: f64,
    /// Normalized memory utilization `M` (occupied KV slots / capacity).
    pub memory_util: f64,
    /// Raw prefill queue depth `Q_raw`.
    pub queue_depth: u32,
    /// Normalized active request load `L`.
    pub active_load: f64,
    /// Speculative acceptance rate `a`.
    pub acceptance_rate: f64,
    /// Recent token throughput, tokens/second.
    pub recent_throughput: f64,
}

impl WorkerMetricsSnapshot {
    /// Check the type invariants: fractions in `[0, 1]`, throughput finite
    /// and nonnegative.
    pub fn validate(&self) -> Result<(), MetricsError> {
        let frac = |name: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(MetricsError::InvalidSnapshot { field: name })
            }
        };
        frac("cache_hit_rate", self.cache_hit_rate)?;
        frac("memory_util", self.memory_util)?;
        frac("active_load", self.active_load)?;
        frac("acceptance_rate", self.acceptance_rate)?;
        if !(self.recent_throughput >= 0.0 && self.recent_throughput.is_finite()) {
            return Err(MetricsError::InvalidSnapshot {
                field: "recent_throughput",
            });
        }
        if self.worker_id == 0 {
            return Err(MetricsError::InvalidSnapshot { field: "worker_id" });
        }
        Ok(())
    }
}

/// Whether `snapshot` is too old to route on at time `now_ms`.
///
/// Strict comparison: a snapshot aged exactly `window_ms` is still fresh.
pub fn is_stale(snapshot: &WorkerMetricsSnapshot, now_ms: u64, window_ms: u64) -> bool {
    debug_assert!(now_ms >= snapshot.timestamp_ms);
    now_ms.saturating_sub(snapshot.timestamp_ms) > window_ms
}

/// Per-worker latest snapshot plus a bounded history ring.
#[derive(Debug, Clone)]
pub struct MetricsRegistry {
    collection_interval_ms: u64,
    staleness_window_ms: u64,
    history_capacity: usize,
    latest: BTreeMap<WorkerId, WorkerMetricsSnapshot>,
    history: BTreeMap<WorkerId, VecDeque<WorkerMetricsSnapshot>>,
}

impl Default for MetricsRegistry {
    fn default() -> Self {
        Self::new(DEFAULT_COLLECTION_INTERVAL_MS, DEFAULT_STALENESS_WINDOW_MS)
    }
}

impl MetricsRegistry {
    pub fn new(collection_interval_ms: u64, staleness_window_ms: u64) -> Self {
        Self {
            collection_interval_ms,
            staleness_window_ms,
            history_capacity: 4_096,
            latest: BTreeMap::new(),
            history: BTreeMap::new(),
        }
    }

    pub fn collection_interval_ms(&self) -> u64 {
        self.collection_interval_ms
    }

    pub fn staleness_window_ms(&self) -> u64 {
        self.staleness_window_ms
    }

    /// Record a snapshot as the worker's latest and append it to history.
    ///
    /// A snapshot timestamped earlier than the worker's current latest is a
    /// clock regression and is rejected; equal timestamps supersede.
    pub fn record_snapshot(&mut self, snapshot: WorkerMetricsSnapshot) -> Result<(), MetricsError> {
        snapshot.validate()?;
        if let Some(prev) = self.latest.get(&snapshot.worker_id) {
            if snapshot.timestamp_ms < prev.timestamp_ms {
                return Err(MetricsError::ClockRegression {
                    worker_id: snapshot.worker_id,
                    have_ms: prev.timestamp_ms,
                    got_ms: snapshot.timestamp_ms,
                });
            }
        }
        self.latest.insert(snapshot.worker_id, snapshot);
        let ring = self.history.entry(snapshot.worker_id).or_default();
        if ring.len() == self.history_capacity {
            ring.pop_front();
        }
        ring.push_back(snapshot);
        Ok(())
    }

    /// The most recent snapshot for a worker, if it has published any.
    pub fn latest(&self, worker_id: WorkerId) -> Option<&WorkerMetricsSnapshot> {
        self.latest.get(&worker_id)
    }

    /// Latest snapshots for all publishing workers, ascending by worker id.
    pub fn latest_all(&self) -> Vec<WorkerMetricsSnapshot> {
        self.latest.values().copied().collect()
    }

    pub fn is_stale(&self, snapshot: &WorkerMetricsSnapshot, now_ms: u64) -> bool {
        is_stale(snapshot, now_ms, self.staleness_window_ms)
    }

    /// Full snapshot history in publication order (worker-major).
    pub fn history(&self) -> Vec<WorkerMetricsSnapshot> {
        let mut out = Vec::new();
        for ring in self.history.values() {
            out.extend(ring.iter().copied());
        }
        out
    }

    /// Export the snapshot history as CSV, time-major.
    ///
    /// Header: `timestamp_ms,worker_id,cache_hit,mem_util,queue_depth,active_load,accept_rate,throughput`
    pub fn export_csv(&self) -> String {
        let mut rows = self.history();
        rows.sort_by_key(|s| (s.timestamp_ms, s.worker_id));
        snapshots_to_csv(&rows)
    }
}

/// Render snapshots in the registry's CSV schema.
pub fn snapshots_to_csv(rows: &[WorkerMetricsSnapshot]) -> String {
    use core::fmt::Write;
    let mut out =
        String::from("timestamp_ms,worker_id,cache_hit,mem_util,queue_depth,active_load,accept_rate,throughput\n");
    for s in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{},{:.6},{:.6},{:.6}",
            s.timestamp_ms,
            s.worker_id,
            s.cache_hit_rate,
            s.memory_util,
            s.queue_depth,
            s.active_load,
            s.acceptance_rate,
            s.recent_throughput
        );
    }
    out
}

/// Raw timing observations for one completed request, before metric
/// derivation. Times are virtual milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTiming {
    pub request_id: u64,
    pub worker_id: WorkerId,
    /// Admission time.
    pub t_start_ms: u64,
    pub prefill_finish_ms: u64,
    /// Absent in monolithic mode, where no KV transfer happens.
    pub transfer_finish_ms: Option<u64>,
    /// When decode service began; the `t_0` for the TPOT sum.
    pub decode_start_ms: u64,
    /// One entry per generated token, nondecreasing.
    pub token_emit_times_ms: Vec<u64>,
    pub prompt_len: u32,
}

/// Fully derived per-request record; the unit of all reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub request_id: u64,
    pub worker_id: WorkerId,
    pub t_start_ms: u64,
    pub t_end_ms: u64,
    pub prefill_finish_ms: u64,
    pub transfer_finish_ms: Option<u64>,
    pub decode_start_ms: u64,
    pub token_emit_times_ms: Vec<u64>,
    /// Prompt length in tokens.
    pub prompt_len: u32,
    /// Generated tokens; always `token_emit_times_ms.len()`.
    pub gen_len: u32,
    /// End-to-end latency in seconds: `(t_end - t_start) / 1000`.
    pub latency_s: f64,
    /// Mean inter-token gap in seconds/token, first gap measured from
    /// decode start.
    pub tpot_s: f64,
    /// `(prompt_len + gen_len) / latency_s`, tokens/second.
    pub throughput_tps: f64,
}

/// Derive latency, TPOT, and throughput from raw timings.
pub fn derive_metrics(timing: RequestTiming) -> Result<CompletionRecord, MetricsError> {
    let gen_len = timing.token_emit_times_ms.len() as u32;
    if gen_len == 0 {
        return Err(MetricsError::NoGeneratedTokens {
            request_id: timing.request_id,
        });
    }
    let mut prev = timing.decode_start_ms;
    for &t in &timing.token_emit_times_ms {
        if t < prev {
            return Err(MetricsError::NonMonotonicEmits {
                request_id: timing.request_id,
            });
        }
        prev = t;
    }
    let first_emit = timing.token_emit_times_ms[0];
    if first_emit < timing.t_start_ms {
        return Err(MetricsError::NonMonotonicEmits {
            request_id: timing.request_id,
        });
    }
    let t_end = *timing.token_emit_times_ms.last().unwrap();
    let latency_s = (t_end - timing.t_start_ms) as f64 / 1000.0;
    if latency_s <= 0.0 {
        return Err(MetricsError::ZeroLatency {
            request_id: timing.request_id,
        });
    }

    // Sum of consecutive inter-token gaps, with t_0 = decode start. The sum
    // telescopes but is evaluated gap by gap to stay an audit of the inputs.
    let mut gap_sum_ms = 0u64;
    let mut prev = timing.decode_start_ms;
    for &t in &timing.token_emit_times_ms {
        gap_sum_ms += t - prev;
        prev = t;
    }
    let tpot_s = (gap_sum_ms as f64 / 1000.0) / gen_len as f64;
    let throughput_tps = (timing.prompt_len as f64 + gen_len as f64) / latency_s;

    Ok(CompletionRecord {
        request_id: timing.request_id,
        worker_id: timing.worker_id,
        t_start_ms: timing.t_start_ms,
        t_end_ms: t_end,
        prefill_finish_ms: timing.prefill_finish_ms,
        transfer_finish_ms: timing.transfer_finish_ms,
        decode_start_ms: timing.decode_start_ms,
        token_emit_times_ms: timing.token_emit_times_ms,
        prompt_len: timing.prompt_len,
        gen_len,
        latency_s,
        tpot_s,
        throughput_tps,
    })
}

/// Nearest-rank percentile: the value at 1-based index `ceil(p/100 * n)` of
/// the ascending-sorted samples. `p` must lie in `(0, 100]`.
pub fn percentile(samples: &[f64], p: f64) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(MetricsError::InvalidPercentile { p });
    }
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("non-NaN samples"));
    let n = sorted.len();
    let rank = libm::ceil(p * n as f64 / 100.0) as usize;
    let idx = rank.clamp(1, n) - 1;
    Ok(sorted[idx])
}

/// Errors from metric recording and derivation.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    InvalidSnapshot { field: &'static str },
    ClockRegression { worker_id: WorkerId, have_ms: u64, got_ms: u64 },
    NoGeneratedTokens { request_id: u64 },
    ZeroLatency { request_id: u64 },
    NonMonotonicEmits { request_id: u64 },
    EmptySamples,
    InvalidPercentile { p: f64 },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::InvalidSnapshot { field } => {
                write!(f, "snapshot field `{field}` out of range")
            }
            MetricsError::ClockRegression {
                worker_id,
                have_ms,
                got_ms,
            } => write!(
                f,
                "clock regression for worker {worker_id}: have t={have_ms}ms, got t={got_ms}ms"
            ),
            MetricsError::NoGeneratedTokens { request_id } => {
                write!(f, "request {request_id}: TPOT undefined for zero generated tokens")
            }
            MetricsError::ZeroLatency { request_id } => {
                write!(f, "request {request_id}: throughput undefined for zero latency")
            }
            MetricsError::NonMonotonicEmits { request_id } => {
                write!(f, "request {request_id}: token emit times not monotone")
            }
            MetricsError::EmptySamples => write!(f, "percentile of empty sample set"),
            MetricsError::InvalidPercentile { p } => {
                write!(f, "percentile {p} outside (0, 100]")
            }
        }
    }
}

impl core::error::Error for MetricsError {}
