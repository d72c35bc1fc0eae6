//! Event-driven simulation of the stream-pair pipeline.
//!
//! One logical event loop over a priority queue of timed events; ties break
//! on insertion order, so identical inputs replay identically. The decode
//! worker batches continuously: every step advances all resident sequences
//! together and costs `verify_step_time * (1 + 1/B)` for a batch of `B`, so
//! concurrency amortizes the fixed per-step overhead. The speculation plan's
//! micro-batch size caps how many sequences may be verified together, which
//! is how deeper speculation trades batch amortization for per-step yield.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Reverse;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{
    derive_metrics, CompletionRecord, MetricsRegistry, RequestTiming, WorkerId,
    WorkerMetricsSnapshot,
};
use crate::router::{
    select_worker, RoutingDecision, WorkerCandidate, WorkerVerdict,
};
use crate::speculation::{adapt, fixed_plan, AdaptAudit, FlowState, SpeculationPlan};
use crate::workload::{builtin_profiles, AcceptanceProcess, TraceRow, WorkloadProfile};

use super::{
    draw_accepted_prefix, simulate_transfer, CostModel, EngineConfig, EngineError, EngineMode,
    RouterKind, SpeculationMode,
};

/// Internal clock unit: integer microseconds. Public timestamps are
/// rounded to milliseconds at the boundary.
type Us = u64;

fn us_of_ms(ms: f64) -> Us {
    libm::round(ms.max(0.0) * 1000.0) as Us
}

fn ms_of_us(us: Us) -> u64 {
    (us + 500) / 1000
}

/// How a run feeds admissions from its trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drive {
    /// Admit each row at its trace arrival time.
    Open,
    /// Fixed client count; each completion admits the next row immediately.
    Closed { concurrency: u32 },
}

/// A request entering the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissionRequest {
    pub request_id: u64,
    pub prompt_len: u32,
    pub max_new_tokens: u32,
    pub prefix_group: u32,
    pub profile_name: String,
}

impl From<&TraceRow> for AdmissionRequest {
    fn from(row: &TraceRow) -> Self {
        Self {
            request_id: row.request_id,
            prompt_len: row.prompt_len,
            max_new_tokens: row.max_new_tokens,
            prefix_group: row.prefix_group,
            profile_name: row.profile_name.clone(),
        }
    }
}

/// A finished request: the derived record plus the depths the controller
/// planned for it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Completion {
    pub record: CompletionRecord,
    pub depth_trace: Vec<u32>,
}

/// One adaptation with its request context, for the JSONL audit log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptLogEntry {
    pub time_ms: u64,
    pub request_id: u64,
    pub worker_id: WorkerId,
    #[serde(flatten)]
    pub audit: AdaptAudit,
}

/// Flag-gated trace of engine activity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLogEntry {
    pub time_ms: u64,
    pub event: String,
    pub request_id: Option<u64>,
    pub pair_id: Option<WorkerId>,
    pub detail: String,
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutput {
    pub records: Vec<CompletionRecord>,
    pub decisions: Vec<RoutingDecision>,
    pub adapt_log: Vec<AdaptLogEntry>,
    pub snapshots: Vec<WorkerMetricsSnapshot>,
    pub events: Option<Vec<EventLogEntry>>,
    pub depth_traces: BTreeMap<u64, Vec<u32>>,
}

// Ordering on the kind never decides heap order; the (time, seq) key is
// strictly increasing in seq.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    MetricsTick,
    PrefillFinish { pair: usize },
    TransferFinish { pair: usize, request_id: u64 },
    StepEnd { pair: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct EventKey {
    time_us: Us,
    seq: u64,
}

/// Recently-seen prefix tags with LRU eviction, feeding the cache-hit EMA.
#[derive(Debug, Clone)]
struct PrefixCache {
    tags: VecDeque<u32>,
    capacity: usize,
    hit_ema: f64,
}

impl PrefixCache {
    const CAPACITY: usize = 256;

    fn new() -> Self {
        Self {
            tags: VecDeque::new(),
            capacity: Self::CAPACITY,
            // optimistic prior: an untried worker is assumed warm, so cold
            // workers are not starved of traffic by the cache term
            hit_ema: 1.0,
        }
    }

    /// Record one request's prefix tag; returns whether it hit and the
    /// updated hit EMA.
    fn touch(&mut self, tag: u32) -> (bool, f64) {
        let hit = if let Some(pos) = self.tags.iter().position(|&t| t == tag) {
            self.tags.remove(pos);
            self.tags.push_back(tag);
            true
        } else {
            self.tags.push_back(tag);
            if self.tags.len() > self.capacity {
                self.tags.pop_front();
            }
            false
        };
        self.hit_ema = 0.9 * self.hit_ema + 0.1 * f64::from(hit);
        (hit, self.hit_ema)
    }
}

#[derive(Debug, Clone)]
struct ActiveSeq {
    request_id: u64,
    remaining: u32,
    plan: Option<SpeculationPlan>,
    acceptance: AcceptanceProcess,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
struct Pending {
    prompt_len: u32,
    gen_target: u32,
    profile_idx: usize,
    cache_hit: bool,
    t_start_us: Us,
    prefill_finish_us: Option<Us>,
    transfer_finish_us: Option<Us>,
    decode_start_us: Option<Us>,
    emit_times_us: Vec<Us>,
    depths: Vec<u32>,
}

#[derive(Debug, Clone)]
struct PairState {
    id: WorkerId,
    prefill_queue: VecDeque<u64>,
    prefill_current: Option<u64>,
    decode_wait: VecDeque<u64>,
    in_transfer: u32,
    active: Vec<ActiveSeq>,
    stepping: bool,
    /// Monolithic scheduling: alternate toward prefill after each step so
    /// neither phase starves the shared timeline.
    prefer_prefill: bool,
    flow: FlowState,
    acceptance_ema: f64,
    window_tokens: u64,
    last_window_tps: f64,
    kv_tokens: u64,
    cache: PrefixCache,
}

impl PairState {
    fn new(id: WorkerId, cfg: &EngineConfig) -> Self {
        Self {
            id,
            prefill_queue: VecDeque::new(),
            prefill_current: None,
            decode_wait: VecDeque::new(),
            in_transfer: 0,
            active: Vec::new(),
            stepping: false,
            prefer_prefill: false,
            flow: FlowState::reset(&cfg.spec_config),
            acceptance_ema: 0.0,
            window_tokens: 0,
            last_window_tps: 0.0,
            kv_tokens: 0,
            cache: PrefixCache::new(),
        }
    }

    /// Prefill-side occupancy: queued plus in-service jobs.
    fn prefill_occupancy(&self) -> u32 {
        self.prefill_queue.len() as u32 + u32::from(self.prefill_current.is_some())
    }

    /// Requests waiting for (or occupying) a blocking resource on the pair:
    /// the serial prefill worker or a decode batch slot. In-transfer
    /// requests ride a non-blocking link and delay nobody, so they are not
    /// queue depth. This is the signal the router reads fresh; unlike the
    /// normalized load signals it never saturates, so it stays informative
    /// under overload.
    fn backlog(&self) -> u32 {
        self.prefill_occupancy() + self.decode_wait.len() as u32
    }

    /// All admitted-but-unfinished requests on the pair, whatever stage
    /// they are in.
    fn in_flight(&self) -> u32 {
        self.backlog() + self.in_transfer + self.active.len() as u32
    }

    fn load_signal(&self, cost: &CostModel) -> f64 {
        (self.in_flight() as f64 / cost.load_norm_sequences as f64).min(1.0)
    }

    fn memory_signal(&self, cost: &CostModel) -> f64 {
        (self.kv_tokens as f64 / cost.kv_capacity_tokens as f64).min(1.0)
    }

    /// Update the prefix cache with one request's tag; returns whether the
    /// prefix was warm and the new cache-hit EMA.
    fn update_cache_state(&mut self, prefix_group: u32) -> (bool, f64) {
        self.cache.touch(prefix_group)
    }

    fn snapshot(&self, timestamp_ms: u64, cost: &CostModel) -> WorkerMetricsSnapshot {
        WorkerMetricsSnapshot {
            worker_id: self.id,
            timestamp_ms,
            cache_hit_rate: self.cache.hit_ema,
            memory_util: self.memory_signal(cost),
            queue_depth: self.backlog(),
            active_load: self.load_signal(cost),
            acceptance_rate: self.acceptance_ema,
            recent_throughput: self.last_window_tps,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-request RNG stream, independent of event interleaving.
fn request_rng(seed: u64, request_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ request_id.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// The deterministic engine. Drive it with [`Engine::admit`] and
/// [`Engine::step`]/[`Engine::advance_to`], or use [`run`] for whole traces.
#[derive(Debug, Clone)]
pub struct Engine {
    cfg: EngineConfig,
    cost: CostModel,
    profiles: Vec<WorkloadProfile>,
    pairs: Vec<PairState>,
    registry: MetricsRegistry,
    events: BinaryHeap<Reverse<(EventKey, EventKind)>>,
    now_us: Us,
    seq: u64,
    rr_counter: u64,
    tick_pending: bool,
    in_flight: usize,
    pending: BTreeMap<u64, Pending>,
    admitted: BTreeSet<u64>,
    completions: Vec<Completion>,
    decisions: Vec<RoutingDecision>,
    adapt_log: Vec<AdaptLogEntry>,
    event_log: Option<Vec<EventLogEntry>>,
}

impl Engine {
    pub fn new(
        cfg: EngineConfig,
        cost: CostModel,
        profiles: &[WorkloadProfile],
    ) -> Result<Self, EngineError> {
        cfg.validate()?;
        cost.validate()?;
        let profiles = if profiles.is_empty() {
            builtin_profiles()
        } else {
            let table = profiles.to_vec();
            for p in &table {
                p.validate()
                    .map_err(|e| EngineError::InvalidConfig(format!("{e}")))?;
            }
            table
        };
        let pairs: Vec<PairState> = (1..=cfg.n_pairs)
            .map(|id| PairState::new(id, &cfg))
            .collect();
        let event_log = cfg.event_log.then(Vec::new);
        let mut engine = Self {
            registry: MetricsRegistry::new(
                cfg.collection_interval_ms,
                cfg.router_config.staleness_window_ms,
            ),
            cfg,
            cost,
            profiles,
            pairs,
            events: BinaryHeap::new(),
            now_us: 0,
            seq: 0,
            rr_counter: 0,
            tick_pending: false,
            in_flight: 0,
            pending: BTreeMap::new(),
            admitted: BTreeSet::new(),
            completions: Vec::new(),
            decisions: Vec::new(),
            adapt_log: Vec::new(),
            event_log,
        };
        // Publish a zeroed snapshot per pair at t=0 so the router never
        // starts blind.
        for i in 0..engine.pairs.len() {
            let snap = engine.pairs[i].snapshot(0, &engine.cost);
            engine
                .registry
                .record_snapshot(snap)
                .expect("initial snapshot is valid");
        }
        Ok(engine)
    }

    pub fn now_ms(&self) -> u64 {
        ms_of_us(self.now_us)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    pub fn was_admitted(&self, request_id: u64) -> bool {
        self.admitted.contains(&request_id)
    }

    pub fn completions_len(&self) -> usize {
        self.completions.len()
    }

    /// All completions so far, in completion order. Callers that stream
    /// results keep their own cursor into this.
    pub fn completions(&self) -> &[Completion] {
        &self.completions
    }

    pub fn decisions_len(&self) -> usize {
        self.decisions.len()
    }

    fn schedule(&mut self, time_us: Us, kind: EventKind) {
        debug_assert!(time_us >= self.now_us);
        let key = EventKey {
            time_us,
            seq: self.seq,
        };
        self.seq += 1;
        self.events.push(Reverse((key, kind)));
    }

    fn tick_interval_us(&self) -> Us {
        self.cfg.collection_interval_ms * 1_000
    }

    fn ensure_tick(&mut self) {
        if !self.tick_pending {
            let interval = self.tick_interval_us();
            let next = (self.now_us / interval + 1) * interval;
            self.schedule(next, EventKind::MetricsTick);
            self.tick_pending = true;
        }
    }

    fn log_event(
        &mut self,
        event: &str,
        request_id: Option<u64>,
        pair_id: Option<WorkerId>,
        detail: String,
    ) {
        let time_ms = ms_of_us(self.now_us);
        if let Some(log) = self.event_log.as_mut() {
            log.push(EventLogEntry {
                time_ms,
                event: event.to_string(),
                request_id,
                pair_id,
                detail,
            });
        }
    }

    /// Admit one request at the current virtual time: route it, update the
    /// chosen pair's prefix cache, and enqueue it for prefill.
    pub fn admit(&mut self, req: AdmissionRequest) -> Result<RoutingDecision, EngineError> {
        if req.prompt_len == 0 || req.max_new_tokens == 0 {
            return Err(EngineError::InvalidRequest {
                request_id: req.request_id,
                reason: "prompt_len and max_new_tokens must be >= 1".into(),
            });
        }
        if self.admitted.contains(&req.request_id) {
            return Err(EngineError::DuplicateRequest(req.request_id));
        }
        let profile_idx = self
            .profiles
            .iter()
            .position(|p| p.name == req.profile_name)
            .ok_or_else(|| EngineError::UnknownProfile(req.profile_name.clone()))?;

        let decision = match self.cfg.router {
            RouterKind::FlowGuard => {
                // The monitor stream (cache, acceptance, throughput, and the
                // staleness timestamp) is the last published snapshot; the
                // load-side signals are collected fresh at selection time,
                // like the live queue depth.
                let candidates: Vec<WorkerCandidate> = self
                    .pairs
                    .iter()
                    .map(|p| {
                        let mut snapshot =
                            *self.registry.latest(p.id).expect("pairs always publish");
                        snapshot.memory_util = p.memory_signal(&self.cost);
                        snapshot.active_load = p.load_signal(&self.cost);
                        WorkerCandidate {
                            snapshot,
                            live_queue_depth: p.backlog(),
                        }
                    })
                    .collect();
                select_worker(&candidates, self.now_ms(), &self.cfg.router_config)
                    .map_err(|e| EngineError::InvalidConfig(format!("{e}")))?
            }
            RouterKind::RoundRobin => {
                let chosen = (self.rr_counter % self.cfg.n_pairs as u64) as WorkerId + 1;
                self.rr_counter += 1;
                RoutingDecision {
                    chosen_worker: chosen,
                    workers: self
                        .pairs
                        .iter()
                        .map(|p| WorkerVerdict {
                            worker_id: p.id,
                            score: None,
                            overloaded: false,
                            stale: false,
                        })
                        .collect(),
                    used_fallback: false,
                }
            }
        };

        let pair_idx = (decision.chosen_worker - 1) as usize;
        let (cache_hit, new_hit_ema) = self.pairs[pair_idx].update_cache_state(req.prefix_group);
        self.pairs[pair_idx].kv_tokens += req.prompt_len as u64;
        self.admitted.insert(req.request_id);
        self.in_flight += 1;
        self.pending.insert(
            req.request_id,
            Pending {
                prompt_len: req.prompt_len,
                gen_target: req.max_new_tokens,
                profile_idx,
                cache_hit,
                t_start_us: self.now_us,
                prefill_finish_us: None,
                transfer_finish_us: None,
                decode_start_us: None,
                emit_times_us: Vec::new(),
                depths: Vec::new(),
            },
        );
        self.pairs[pair_idx].prefill_queue.push_back(req.request_id);
        self.log_event(
            "admit",
            Some(req.request_id),
            Some(decision.chosen_worker),
            format!(
                "{{\"fallback\":{},\"cache_ema\":{:.4},\"queue\":{}}}",
                decision.used_fallback,
                new_hit_ema,
                self.pairs[pair_idx].prefill_queue.len()
            ),
        );
        self.decisions.push(decision.clone());
        self.ensure_tick();
        self.dispatch(pair_idx);
        Ok(decision)
    }

    /// Whether only the free-running metrics timer remains: no requests in
    /// flight and nothing but a pending tick in the event queue.
    fn only_timer_left(&self) -> bool {
        self.in_flight == 0 && self.events.len() == usize::from(self.tick_pending)
    }

    fn fire_next_event(&mut self) -> bool {
        let Some(Reverse((key, kind))) = self.events.pop() else {
            return false;
        };
        self.now_us = key.time_us;
        match kind {
            EventKind::MetricsTick => self.on_metrics_tick(),
            EventKind::PrefillFinish { pair } => self.on_prefill_finish(pair),
            EventKind::TransferFinish { pair, request_id } => {
                self.on_transfer_finish(pair, request_id)
            }
            EventKind::StepEnd { pair } => self.on_step_end(pair),
        }
        true
    }

    /// Process the next event. Returns false once the engine is idle (the
    /// metrics timer alone does not count as work).
    pub fn step(&mut self) -> bool {
        if self.only_timer_left() {
            return false;
        }
        self.fire_next_event()
    }

    /// Process all events up to and including `time_ms`, then advance the
    /// clock to it. The metrics timer keeps publishing on its grid through
    /// idle gaps, so routing after a lull still sees fresh snapshots.
    pub fn advance_to_ms(&mut self, time_ms: u64) {
        let target_us = time_ms * 1_000;
        while let Some(Reverse((key, _))) = self.events.peek() {
            if key.time_us > target_us {
                break;
            }
            self.fire_next_event();
        }
        if target_us > self.now_us {
            self.now_us = target_us;
        }
    }

    pub fn run_until_idle(&mut self) {
        while self.step() {}
    }

    fn on_metrics_tick(&mut self) {
        let interval_ms = self.cfg.collection_interval_ms;
        let now_ms = ms_of_us(self.now_us);
        for i in 0..self.pairs.len() {
            let tokens = self.pairs[i].window_tokens;
            self.pairs[i].window_tokens = 0;
            self.pairs[i].last_window_tps = tokens as f64 * (1000.0 / interval_ms as f64);
            let snap = self.pairs[i].snapshot(now_ms, &self.cost);
            self.registry
                .record_snapshot(snap)
                .expect("tick snapshots are valid and monotone");
        }
        self.log_event("metrics_tick", None, None, format!("{{\"pairs\":{}}}", self.pairs.len()));
        // free-running timer: publication does not depend on request
        // activity; idle engines simply never fire it (see `step`)
        self.tick_pending = false;
        self.ensure_tick();
    }

    fn dispatch(&mut self, pair_idx: usize) {
        match self.cfg.mode {
            EngineMode::Disaggregated => {
                self.dispatch_prefill(pair_idx);
                self.dispatch_decode(pair_idx);
            }
            EngineMode::Monolithic => self.dispatch_mono(pair_idx),
        }
    }

    fn start_prefill(&mut self, pair_idx: usize) {
        let request_id = self.pairs[pair_idx]
            .prefill_queue
            .pop_front()
            .expect("caller checked queue");
        let pending = &self.pending[&request_id];
        let dur_us = us_of_ms(
            self.cost
                .prefill_time_cached_ms(pending.prompt_len, pending.cache_hit),
        );
        self.pairs[pair_idx].prefill_current = Some(request_id);
        self.schedule(self.now_us + dur_us, EventKind::PrefillFinish { pair: pair_idx });
        let queue_after = self.pairs[pair_idx].prefill_queue.len();
        self.log_event(
            "prefill_start",
            Some(request_id),
            Some(self.pairs[pair_idx].id),
            format!("{{\"queue_after\":{queue_after}}}"),
        );
    }

    fn dispatch_prefill(&mut self, pair_idx: usize) {
        if self.pairs[pair_idx].prefill_current.is_none()
            && !self.pairs[pair_idx].prefill_queue.is_empty()
        {
            self.start_prefill(pair_idx);
        }
    }

    fn on_prefill_finish(&mut self, pair_idx: usize) {
        let request_id = self.pairs[pair_idx]
            .prefill_current
            .take()
            .expect("finish implies a job in service");
        let pending = self.pending.get_mut(&request_id).expect("pending exists");
        pending.prefill_finish_us = Some(self.now_us);
        let queue_len = self.pairs[pair_idx].prefill_queue.len();
        self.log_event(
            "prefill_finish",
            Some(request_id),
            Some(self.pairs[pair_idx].id),
            format!("{{\"queue\":{queue_len}}}"),
        );
        match self.cfg.mode {
            EngineMode::Disaggregated => {
                let prompt_len = self.pending[&request_id].prompt_len;
                let kv_bytes = prompt_len as u64 * self.cost.kv_bytes_per_token();
                let dur_us =
                    us_of_ms(simulate_transfer(kv_bytes, &self.cost, self.cfg.transfer));
                self.pairs[pair_idx].in_transfer += 1;
                self.schedule(
                    self.now_us + dur_us,
                    EventKind::TransferFinish {
                        pair: pair_idx,
                        request_id,
                    },
                );
                self.dispatch(pair_idx);
            }
            EngineMode::Monolithic => {
                // Same GPU holds the KV; no transfer leg.
                self.pairs[pair_idx].decode_wait.push_back(request_id);
                self.pairs[pair_idx].prefer_prefill = false;
                self.dispatch(pair_idx);
            }
        }
    }

    fn on_transfer_finish(&mut self, pair_idx: usize, request_id: u64) {
        let pending = self.pending.get_mut(&request_id).expect("pending exists");
        pending.transfer_finish_us = Some(self.now_us);
        self.pairs[pair_idx].in_transfer -= 1;
        self.pairs[pair_idx].decode_wait.push_back(request_id);
        self.log_event(
            "transfer_finish",
            Some(request_id),
            Some(self.pairs[pair_idx].id),
            format!("{{\"waiting\":{}}}", self.pairs[pair_idx].decode_wait.len()),
        );
        self.dispatch(pair_idx);
    }

    /// Plan speculation for the request at the head of the decode wait
    /// queue. Adaptive plans mutate the pair's flow state only when the
    /// admission actually happens.
    fn plan_for_next(&mut self, pair_idx: usize) -> (Option<SpeculationPlan>, Option<(FlowState, AdaptAudit)>) {
        match self.cfg.speculation {
            SpeculationMode::Off => (None, None),
            SpeculationMode::Fixed { depth } => {
                (Some(fixed_plan(depth, &self.cfg.spec_config)), None)
            }
            SpeculationMode::Adaptive => {
                let pair = &self.pairs[pair_idx];
                let out = adapt(
                    &pair.flow,
                    pair.acceptance_ema,
                    pair.load_signal(&self.cost),
                    pair.last_window_tps,
                    &self.cfg.spec_config,
                );
                (Some(out.plan), Some((out.state, out.audit)))
            }
        }
    }

    /// Move waiting sequences into the active batch while the batch-size
    /// cap allows. The cap is the smallest planned micro-batch among the
    /// batch members (deeper speculation constrains the batch more), never
    /// above the hard decode cap. Admission is FIFO with no skip-ahead.
    fn admit_to_batch(&mut self, pair_idx: usize) {
        loop {
            if self.pairs[pair_idx].decode_wait.is_empty() {
                return;
            }
            let (plan, adapted) = self.plan_for_next(pair_idx);
            let cand_b = plan
                .map(|p| p.micro_batch)
                .unwrap_or(self.cost.max_decode_batch);
            let min_b = self.pairs[pair_idx]
                .active
                .iter()
                .map(|s| {
                    s.plan
                        .map(|p| p.micro_batch)
                        .unwrap_or(self.cost.max_decode_batch)
                })
                .chain(core::iter::once(cand_b))
                .min()
                .expect("at least the candidate");
            let cap = min_b.min(self.cost.max_decode_batch) as usize;
            if self.pairs[pair_idx].active.len() + 1 > cap {
                return;
            }
            let request_id = self.pairs[pair_idx]
                .decode_wait
                .pop_front()
                .expect("checked nonempty");
            if let Some((state, audit)) = adapted {
                self.pairs[pair_idx].flow = state;
                self.adapt_log.push(AdaptLogEntry {
                    time_ms: ms_of_us(self.now_us),
                    request_id,
                    worker_id: self.pairs[pair_idx].id,
                    audit,
                });
            }
            let pending = self.pending.get_mut(&request_id).expect("pending exists");
            pending.decode_start_us = Some(self.now_us);
            if let Some(p) = &plan {
                pending.depths.push(p.depth);
            }
            let profile = &self.profiles[pending.profile_idx];
            let seq = ActiveSeq {
                request_id,
                remaining: pending.gen_target,
                plan,
                acceptance: AcceptanceProcess::for_profile(profile),
                rng: request_rng(self.cfg.seed, request_id),
            };
            self.pairs[pair_idx].active.push(seq);
            self.log_event(
                "decode_admit",
                Some(request_id),
                Some(self.pairs[pair_idx].id),
                format!(
                    "{{\"batch\":{},\"depth\":{}}}",
                    self.pairs[pair_idx].active.len(),
                    plan.map(|p| p.depth).unwrap_or(0)
                ),
            );
        }
    }

    fn step_duration_us(&self, batch: usize) -> Us {
        let base = match self.cfg.speculation {
            SpeculationMode::Off => self.cost.token_time_ms,
            _ => self.cost.verify_step_time_ms * (1.0 + 1.0 / batch as f64),
        };
        let penalized = match self.cfg.mode {
            EngineMode::Monolithic => base * self.cost.contention_penalty,
            EngineMode::Disaggregated => base,
        };
        us_of_ms(penalized)
    }

    fn start_step(&mut self, pair_idx: usize) {
        let batch = self.pairs[pair_idx].active.len();
        debug_assert!(batch > 0);
        let dur = self.step_duration_us(batch);
        self.pairs[pair_idx].stepping = true;
        self.schedule(self.now_us + dur, EventKind::StepEnd { pair: pair_idx });
        self.log_event(
            "step_start",
            None,
            Some(self.pairs[pair_idx].id),
            format!(
                "{{\"batch\":{},\"waiting\":{}}}",
                batch,
                self.pairs[pair_idx].decode_wait.len()
            ),
        );
    }

    fn dispatch_decode(&mut self, pair_idx: usize) {
        if self.pairs[pair_idx].stepping {
            return;
        }
        self.admit_to_batch(pair_idx);
        if !self.pairs[pair_idx].active.is_empty() {
            self.start_step(pair_idx);
        }
    }

    fn dispatch_mono(&mut self, pair_idx: usize) {
        if self.pairs[pair_idx].stepping || self.pairs[pair_idx].prefill_current.is_some() {
            return;
        }
        let has_prefill = !self.pairs[pair_idx].prefill_queue.is_empty();
        if self.pairs[pair_idx].prefer_prefill && has_prefill {
            self.start_prefill(pair_idx);
            return;
        }
        self.admit_to_batch(pair_idx);
        if !self.pairs[pair_idx].active.is_empty() {
            self.pairs[pair_idx].prefer_prefill = true;
            self.start_step(pair_idx);
        } else if has_prefill {
            self.start_prefill(pair_idx);
        }
    }

    fn on_step_end(&mut self, pair_idx: usize) {
        let now_us = self.now_us;
        let speculating = !matches!(self.cfg.speculation, SpeculationMode::Off);
        let mut finished: Vec<u64> = Vec::new();
        let mut emitted_total = 0u64;
        let mut ema = self.pairs[pair_idx].acceptance_ema;
        {
            let pair = &mut self.pairs[pair_idx];
            for seq in pair.active.iter_mut() {
                let emitted = if speculating {
                    let plan = seq.plan.as_ref().expect("speculating sequences carry a plan");
                    let p = seq.acceptance.current();
                    let k = draw_accepted_prefix(&mut seq.rng, p, plan.depth);
                    ema = 0.9 * ema + 0.1 * (k as f64 / plan.depth as f64);
                    seq.acceptance.step(&mut seq.rng);
                    (k + 1).min(seq.remaining)
                } else {
                    1
                };
                seq.remaining -= emitted;
                emitted_total += emitted as u64;
                let pending = self.pending.get_mut(&seq.request_id).expect("pending exists");
                for _ in 0..emitted {
                    pending.emit_times_us.push(now_us);
                }
                if seq.remaining == 0 {
                    finished.push(seq.request_id);
                }
            }
            pair.acceptance_ema = ema;
            pair.window_tokens += emitted_total;
            pair.kv_tokens += emitted_total;
            pair.active.retain(|s| s.remaining > 0);
            pair.stepping = false;
            if matches!(self.cfg.mode, EngineMode::Monolithic) {
                pair.prefer_prefill = true;
            }
        }
        self.log_event(
            "step_end",
            None,
            Some(self.pairs[pair_idx].id),
            format!(
                "{{\"emitted\":{},\"active_after\":{},\"waiting_after\":{},\"prefill_queue\":{}}}",
                emitted_total,
                self.pairs[pair_idx].active.len(),
                self.pairs[pair_idx].decode_wait.len(),
                self.pairs[pair_idx].prefill_queue.len()
            ),
        );
        for request_id in finished {
            self.finalize(pair_idx, request_id);
        }
        self.dispatch(pair_idx);
    }

    fn finalize(&mut self, pair_idx: usize, request_id: u64) {
        let pending = self.pending.remove(&request_id).expect("pending exists");
        self.pairs[pair_idx].kv_tokens = self.pairs[pair_idx]
            .kv_tokens
            .saturating_sub(pending.prompt_len as u64 + pending.gen_target as u64);
        let timing = RequestTiming {
            request_id,
            worker_id: self.pairs[pair_idx].id,
            t_start_ms: ms_of_us(pending.t_start_us),
            prefill_finish_ms: ms_of_us(pending.prefill_finish_us.expect("prefill ran")),
            transfer_finish_ms: pending.transfer_finish_us.map(ms_of_us),
            decode_start_ms: ms_of_us(pending.decode_start_us.expect("decode ran")),
            token_emit_times_ms: pending.emit_times_us.iter().map(|&t| ms_of_us(t)).collect(),
            prompt_len: pending.prompt_len,
        };
        let record = derive_metrics(timing).expect("engine timings are well-formed");
        self.log_event(
            "complete",
            Some(request_id),
            Some(self.pairs[pair_idx].id),
            format!(
                "{{\"latency_s\":{:.6},\"gen_len\":{}}}",
                record.latency_s, record.gen_len
            ),
        );
        self.in_flight -= 1;
        self.completions.push(Completion {
            record,
            depth_trace: pending.depths,
        });
    }

    /// Consume the engine and assemble the run artifacts.
    pub fn into_output(self) -> RunOutput {
        let mut snapshots = self.registry.history();
        snapshots.sort_by_key(|s| (s.timestamp_ms, s.worker_id));
        let mut depth_traces = BTreeMap::new();
        let mut records: Vec<CompletionRecord> = Vec::with_capacity(self.completions.len());
        for c in self.completions {
            depth_traces.insert(c.record.request_id, c.depth_trace);
            records.push(c.record);
        }
        RunOutput {
            records,
            decisions: self.decisions,
            adapt_log: self.adapt_log,
            snapshots,
            events: self.event_log,
            depth_traces,
        }
    }
}

fn validate_trace(trace: &[TraceRow], drive: Drive) -> Result<(), EngineError> {
    if trace.is_empty() {
        return Err(EngineError::EmptyTrace);
    }
    let mut seen = BTreeSet::new();
    let mut last_arrival = 0u64;
    for (i, row) in trace.iter().enumerate() {
        let rowno = i + 1;
        if row.prompt_len == 0 {
            return Err(EngineError::BadTraceRow {
                row: rowno,
                reason: "prompt_len must be >= 1".into(),
            });
        }
        if row.max_new_tokens == 0 {
            return Err(EngineError::BadTraceRow {
                row: rowno,
                reason: "max_new_tokens must be >= 1".into(),
            });
        }
        if !seen.insert(row.request_id) {
            return Err(EngineError::BadTraceRow {
                row: rowno,
                reason: format!("duplicate request id {}", row.request_id),
            });
        }
        if matches!(drive, Drive::Open) {
            if i > 0 && row.arrival_time_ms < last_arrival {
                return Err(EngineError::BadTraceRow {
                    row: rowno,
                    reason: "arrival times must be nondecreasing".into(),
                });
            }
            last_arrival = row.arrival_time_ms;
        }
    }
    Ok(())
}

/// Execute a whole trace and return everything it produced.
///
/// Open drive admits rows at their trace arrival times; closed drive keeps
/// `concurrency` requests in flight, admitting the next row the moment one
/// completes. Identical inputs yield byte-identical outputs.
pub fn run(
    cfg: &EngineConfig,
    cost: &CostModel,
    profiles: &[WorkloadProfile],
    trace: &[TraceRow],
    drive: Drive,
) -> Result<RunOutput, EngineError> {
    validate_trace(trace, drive)?;
    let mut engine = Engine::new(cfg.clone(), *cost, profiles)?;
    match drive {
        Drive::Open => {
            for row in trace {
                engine.advance_to_ms(row.arrival_time_ms);
                engine.admit(AdmissionRequest::from(row))?;
            }
            engine.run_until_idle();
        }
        Drive::Closed { concurrency } => {
            if concurrency == 0 {
                return Err(EngineError::InvalidConfig(
                    "closed-loop concurrency must be >= 1".into(),
                ));
            }
            let mut next = 0usize;
            let initial = (concurrency as usize).min(trace.len());
            while next < initial {
                engine.admit(AdmissionRequest::from(&trace[next]))?;
                next += 1;
            }
            let mut seen = 0usize;
            loop {
                if !engine.step() {
                    break;
                }
                while seen < engine.completions_len() {
                    seen += 1;
                    if next < trace.len() {
                        engine.admit(AdmissionRequest::from(&trace[next]))?;
                        next += 1;
                    }
                }
            }
        }
    }
    Ok(engine.into_output())
}
