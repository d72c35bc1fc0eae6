//! Deterministic discrete-event engine for N prefill/decode stream pairs.
//!
//! The engine realizes the serving pipeline as a parametric time model:
//! admission, routing, a serial prefill worker per pair, a bandwidth/latency
//! KV-transfer link, and a continuously batching decode worker that runs
//! speculative verification steps. Monolithic mode collapses each pair onto
//! one shared timeline (prefill jobs interleave with decode steps) with a
//! contention penalty on decode and no KV transfer.
//!
//! All internal event times are integer microseconds; the public record and
//! snapshot surfaces round to milliseconds. Randomness is confined to the
//! per-request acceptance processes, each seeded from (engine seed, request
//! id), so event interleaving never shifts another request's draws and runs
//! with speculation disabled are seed-independent.

mod sim;

pub use sim::{
    run, AdaptLogEntry, AdmissionRequest, Completion, Drive, Engine, EventLogEntry, RunOutput,
};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::router::RouterConfig;
use crate::speculation::{SpecConfig, SpeculationPlan};

/// Parametric time model. Every numeric default is a simulator parameter
/// chosen for qualitative behavior at desk scale, not a hardware claim.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    /// Fixed prefill overhead per request, ms.
    pub prefill_base_ms: f64,
    /// Prefill compute per prompt token, ms.
    pub prefill_per_token_ms: f64,
    /// Model hidden dimension; sizes the KV payload.
    pub d_model: u32,
    /// Bytes per token = `d_model * 2 (float16) * kv_factor`, the factor
    /// covering K+V across layers.
    pub kv_factor: u32,
    /// Fast-link bandwidth, bytes/ms (default ~20 GB/s GPU-direct P2P).
    pub link_bandwidth_bytes_per_ms: f64,
    /// Fast-link latency, ms.
    pub link_latency_ms: f64,
    /// Standard-P2P derate: bandwidth divided and latency multiplied by
    /// this ratio when the standard transfer mode is selected.
    pub std_link_ratio: f64,
    /// Base time of one speculative verification step, ms. The effective
    /// step cost is `verify_step_time * (1 + 1/b)` where `b` is the number
    /// of sequences verified together, so larger micro-batches amortize
    /// the fixed launch overhead.
    pub verify_step_time_ms: f64,
    /// Per-token decode time without speculation, ms.
    pub token_time_ms: f64,
    /// Multiplier on decode step time in monolithic mode.
    pub contention_penalty: f64,
    /// Hard cap on sequences decoded together.
    pub max_decode_batch: u32,
    /// Resident-sequence count that reads as fully loaded (`L = 1`); this
    /// is the pair's practical saturation population, smaller than the hard
    /// batch ceiling.
    pub load_norm_sequences: u32,
    /// KV slot capacity per pair in tokens; normalizes the memory signal
    /// `M`. Sized so a saturated decode side reads as high memory pressure
    /// and trips the router's overload detector.
    pub kv_capacity_tokens: u64,
    /// Fraction of per-token prefill compute skipped when the request's
    /// prefix group is already cached on the pair (prefix reuse).
    pub cache_hit_prefill_discount: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            prefill_base_ms: 2.0,
            prefill_per_token_ms: 0.3,
            d_model: 4_096,
            kv_factor: 64,
            link_bandwidth_bytes_per_ms: 20.0e6,
            link_latency_ms: 0.1,
            std_link_ratio: 4.0,
            verify_step_time_ms: 10.0,
            token_time_ms: 15.0,
            contention_penalty: 1.3,
            max_decode_batch: 12,
            load_norm_sequences: 8,
            kv_capacity_tokens: 2_500,
            cache_hit_prefill_discount: 0.5,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), EngineError> {
        let times = [
            self.prefill_base_ms,
            self.prefill_per_token_ms,
            self.link_latency_ms,
            self.verify_step_time_ms,
            self.token_time_ms,
        ];
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(EngineError::InvalidConfig(
                "cost model times must be nonnegative".into(),
            ));
        }
        if !self.link_bandwidth_bytes_per_ms.is_finite()
            || self.link_bandwidth_bytes_per_ms <= 0.0
            || self.std_link_ratio.is_nan()
            || self.std_link_ratio < 1.0
        {
            return Err(EngineError::InvalidConfig(
                "link bandwidth must be positive and std ratio >= 1".into(),
            ));
        }
        if self.contention_penalty.is_nan() || self.contention_penalty < 1.0 {
            return Err(EngineError::InvalidConfig(
                "contention penalty must be >= 1".into(),
            ));
        }
        if self.max_decode_batch == 0 || self.kv_capacity_tokens == 0 || self.load_norm_sequences == 0
        {
            return Err(EngineError::InvalidConfig(
                "decode batch cap, load norm, and kv capacity must be >= 1".into(),
            ));
        }
        if self.d_model == 0 || self.kv_factor == 0 {
            return Err(EngineError::InvalidConfig(
                "d_model and kv_factor must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.cache_hit_prefill_discount) {
            return Err(EngineError::InvalidConfig(
                "cache_hit_prefill_discount must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn kv_bytes_per_token(&self) -> u64 {
        self.d_model as u64 * 2 * self.kv_factor as u64
    }

    /// Effective (bandwidth bytes/ms, latency ms) for a transfer mode.
    pub fn link_params(&self, transfer: TransferMode) -> (f64, f64) {
        match transfer {
            TransferMode::Fast => (self.link_bandwidth_bytes_per_ms, self.link_latency_ms),
            TransferMode::Standard => (
                self.link_bandwidth_bytes_per_ms / self.std_link_ratio,
                self.link_latency_ms * self.std_link_ratio,
            ),
        }
    }

    /// Prefill service time for a cold (uncached) prompt, ms.
    pub fn prefill_time_ms(&self, prompt_len: u32) -> f64 {
        self.prefill_base_ms + prompt_len as f64 * self.prefill_per_token_ms
    }

    /// Prefill service time given the admission-time prefix-cache outcome.
    pub fn prefill_time_cached_ms(&self, prompt_len: u32, cache_hit: bool) -> f64 {
        let per_token = if cache_hit {
            self.prefill_per_token_ms * (1.0 - self.cache_hit_prefill_discount)
        } else {
            self.prefill_per_token_ms
        };
        self.prefill_base_ms + prompt_len as f64 * per_token
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    Disaggregated,
    Monolithic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    Fast,
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeculationMode {
    Adaptive,
    Fixed { depth: u32 },
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    FlowGuard,
    RoundRobin,
}

/// Engine toggles; each ablation row of the experiment harness is one
/// setting of these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub n_pairs: u32,
    pub mode: EngineMode,
    pub transfer: TransferMode,
    pub speculation: SpeculationMode,
    pub router: RouterKind,
    pub seed: u64,
    pub router_config: RouterConfig,
    pub spec_config: SpecConfig,
    /// Metrics publication cadence, virtual ms.
    pub collection_interval_ms: u64,
    /// Record a JSONL-able event log during runs.
    pub event_log: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_pairs: 2,
            mode: EngineMode::Disaggregated,
            transfer: TransferMode::Fast,
            speculation: SpeculationMode::Adaptive,
            router: RouterKind::FlowGuard,
            seed: 0,
            router_config: RouterConfig::default(),
            spec_config: SpecConfig::default(),
            collection_interval_ms: crate::metrics::DEFAULT_COLLECTION_INTERVAL_MS,
            event_log: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.n_pairs == 0 {
            return Err(EngineError::InvalidConfig("n_pairs must be >= 1".into()));
        }
        self.spec_config
            .validate()
            .map_err(|e| EngineError::InvalidConfig(format!("{e}")))?;
        if let SpeculationMode::Fixed { depth } = self.speculation {
            if depth < self.spec_config.d_min || depth > self.spec_config.d_max {
                return Err(EngineError::InvalidConfig(format!(
                    "fixed depth {depth} outside [{}, {}]",
                    self.spec_config.d_min, self.spec_config.d_max
                )));
            }
        }
        if self.collection_interval_ms == 0 {
            return Err(EngineError::InvalidConfig(
                "collection interval must be >= 1 ms".into(),
            ));
        }
        Ok(())
    }
}

/// Prefill cost evaluation: KV payload size and the finish time for a job
/// that starts no earlier than `busy_until_ms`.
///
/// Times here are the cost model's exact fractional milliseconds; the
/// engine quantizes to its microsecond clock when scheduling.
pub fn simulate_prefill(
    prompt_len: u32,
    now_ms: f64,
    busy_until_ms: f64,
    cost: &CostModel,
) -> (u64, f64) {
    let start = if busy_until_ms > now_ms { busy_until_ms } else { now_ms };
    let finish = start + cost.prefill_time_ms(prompt_len);
    (prompt_len as u64 * cost.kv_bytes_per_token(), finish)
}

/// KV transfer duration over the configured link, ms.
pub fn simulate_transfer(kv_bytes: u64, cost: &CostModel, transfer: TransferMode) -> f64 {
    let (bandwidth, latency) = cost.link_params(transfer);
    latency + kv_bytes as f64 / bandwidth
}

/// Draw the accepted prefix length for one verification step: each of the
/// `depth` drafted tokens is accepted independently with probability `p`,
/// and the first rejection stops the prefix.
pub fn draw_accepted_prefix<R: Rng>(rng: &mut R, p: f64, depth: u32) -> u32 {
    let mut k = 0;
    for _ in 0..depth {
        if rng.gen::<f64>() < p {
            k += 1;
        } else {
            break;
        }
    }
    k
}

/// Decode timing for a single request in isolation.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeFragment {
    /// Verification (or autoregressive) steps taken.
    pub steps: u64,
    /// Emission offsets from decode start, exact fractional ms, one per
    /// generated token.
    pub emit_offsets_ms: Vec<f64>,
}

/// Decode one request in isolation under a fixed acceptance probability.
///
/// With speculation, every step drafts `plan.depth` tokens, emits the
/// accepted prefix plus one corrected token (capped by the remaining
/// budget), and costs `verify_step_time * (1 + 1/plan.micro_batch)` — the
/// standalone model assumes the planned micro-batch is fully populated.
/// Inside engine runs the same step cost uses the number of sequences
/// actually verified together, with `plan.micro_batch` acting as the
/// batch-size cap.
pub fn simulate_decode_isolated<R: Rng>(
    gen_len: u32,
    plan: Option<&SpeculationPlan>,
    acceptance: f64,
    cost: &CostModel,
    rng: &mut R,
) -> DecodeFragment {
    let mut emit_offsets_ms = Vec::with_capacity(gen_len as usize);
    let mut steps = 0u64;
    let mut clock = 0.0f64;
    let mut remaining = gen_len;
    match plan {
        None => {
            while remaining > 0 {
                clock += cost.token_time_ms;
                emit_offsets_ms.push(clock);
                remaining -= 1;
                steps += 1;
            }
        }
        Some(plan) => {
            let step_ms =
                cost.verify_step_time_ms * (1.0 + 1.0 / plan.micro_batch as f64);
            while remaining > 0 {
                let k = draw_accepted_prefix(rng, acceptance, plan.depth);
                let emitted = (k + 1).min(remaining);
                clock += step_ms;
                for _ in 0..emitted {
                    emit_offsets_ms.push(clock);
                }
                remaining -= emitted;
                steps += 1;
            }
        }
    }
    DecodeFragment {
        steps,
        emit_offsets_ms,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EngineError {
    InvalidConfig(String),
    DuplicateRequest(u64),
    InvalidRequest { request_id: u64, reason: String },
    UnknownProfile(String),
    BadTraceRow { row: usize, reason: String },
    ShutDown,
    UnknownRequest(u64),
    AlreadyCollected(u64),
    EmptyTrace,
}

impl fmt::Display for EngineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineError::InvalidConfig(msg) => write!(f, "invalid engine config: {msg}"),
            EngineError::DuplicateRequest(id) => write!(f, "duplicate request id {id}"),
            EngineError::InvalidRequest { request_id, reason } => {
                write!(f, "invalid request {request_id}: {reason}")
            }
            EngineError::UnknownProfile(name) => write!(f, "unknown workload profile `{name}`"),
            EngineError::BadTraceRow { row, reason } => {
                write!(f, "trace row {row}: {reason}")
            }
            EngineError::ShutDown => write!(f, "engine is shut down"),
            EngineError::UnknownRequest(id) => write!(f, "unknown request id {id}"),
            EngineError::AlreadyCollected(id) => {
                write!(f, "request {id} was already collected")
            }
            EngineError::EmptyTrace => write!(f, "trace is empty"),
        }
    }
}

impl core::error::Error for EngineError {}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prefill_linear_model() {
        let cost = CostModel {
            prefill_base_ms: 2.0,
            prefill_per_token_ms: 0.5,
            ..CostModel::default()
        };
        let (_, finish) = simulate_prefill(1, 0.0, 0.0, &cost);
        assert_eq!(finish, 2.5);
        let (_, finish) = simulate_prefill(100, 0.0, 0.0, &cost);
        assert_eq!(finish, 52.0);
        // FIFO: a busy worker defers the start
        let (_, second) = simulate_prefill(100, 0.0, 52.0, &cost);
        assert_eq!(second, 104.0);
    }

    #[test]
    fn transfer_unit_ratio_and_worked_payload() {
        let cost = CostModel {
            link_bandwidth_bytes_per_ms: 1_000.0,
            link_latency_ms: 0.0,
            ..CostModel::default()
        };
        assert_eq!(simulate_transfer(1_000, &cost, TransferMode::Fast), 1.0);

        let cost = CostModel::default();
        let kv = 100 * cost.kv_bytes_per_token();
        assert_eq!(kv, 52_428_800);
        let dur = simulate_transfer(kv, &cost, TransferMode::Fast);
        assert!((dur - 2.72144).abs() < 1e-9, "got {dur}");
    }

    #[test]
    fn standard_link_scales_by_ratio() {
        let cost = CostModel::default();
        let kv = 100 * cost.kv_bytes_per_token();
        let fast = simulate_transfer(kv, &cost, TransferMode::Fast);
        let std = simulate_transfer(kv, &cost, TransferMode::Standard);
        // both the bandwidth term and the latency term scale by the ratio
        assert!((std - 4.0 * fast).abs() < 1e-9);
    }

    #[test]
    fn decode_zero_acceptance_is_autoregressive() {
        let cost = CostModel::default();
        let plan = crate::speculation::fixed_plan(5, &SpecConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frag = simulate_decode_isolated(17, Some(&plan), 0.0, &cost, &mut rng);
        assert_eq!(frag.steps, 17);
        assert_eq!(frag.emit_offsets_ms.len(), 17);
    }

    #[test]
    fn decode_full_acceptance_emits_depth_plus_one() {
        let cost = CostModel::default();
        let plan = crate::speculation::fixed_plan(5, &SpecConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frag = simulate_decode_isolated(20, Some(&plan), 1.0, &cost, &mut rng);
        // 6 tokens per step -> ceil(20/6) = 4 steps
        assert_eq!(frag.steps, 4);
        assert_eq!(frag.emit_offsets_ms.len(), 20);
    }

    #[test]
    fn decode_off_takes_gen_len_token_times() {
        let cost = CostModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frag = simulate_decode_isolated(8, None, 0.7, &cost, &mut rng);
        assert_eq!(frag.steps, 8);
        assert_eq!(*frag.emit_offsets_ms.last().unwrap(), 8.0 * cost.token_time_ms);
    }

    #[test]
    fn emission_bound_holds_per_step() {
        let cost = CostModel::default();
        let plan = crate::speculation::fixed_plan(7, &SpecConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let frag = simulate_decode_isolated(64, Some(&plan), 0.6, &cost, &mut rng);
            // group emissions by step time and check 1 <= emitted <= depth+1
            let mut per_step = alloc::collections::BTreeMap::new();
            for &t in &frag.emit_offsets_ms {
                *per_step.entry((t * 1e6) as u64).or_insert(0u32) += 1;
            }
            assert_eq!(per_step.len() as u64, frag.steps);
            for (_, n) in per_step {
                assert!((1..=plan.depth + 1).contains(&n));
            }
        }
    }

    #[test]
    fn config_validation_rejects_bad_fixed_depth() {
        let cfg = EngineConfig {
            speculation: SpeculationMode::Fixed { depth: 99 },
            ..EngineConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = EngineConfig {
            n_pairs: 0,
            ..EngineConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn geometric_prefix_mean_matches_closed_form() {
        // spot check at p=0.8, d=5: (1 - 0.8^6) / 0.2 = 3.68928 emitted/step
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 20_000;
        let mut total = 0u64;
        for _ in 0..n {
            total += u64::from(draw_accepted_prefix(&mut rng, 0.8, 5)) + 1;
        }
        let mean = total as f64 / n as f64;
        assert!((mean - 3.68928).abs() / 3.68928 < 0.02, "mean {mean}");
    }
}
