//! Request orchestration over the engine: admission, routing invocation,
//! completion collection, and drain-on-shutdown.
//!
//! The scheduler is the synchronous face of the engine. `admit` routes and
//! enqueues a request at its submit time; `collect` drives simulated time
//! forward until that request's record exists and hands it out exactly
//! once. Live deployments (wall-clock pacing, wire protocol) layer on top
//! of this in the companion crate by feeding wall-derived submit times.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::engine::{
    AdmissionRequest, Completion, CostModel, Engine, EngineConfig, EngineError, RunOutput,
};
use crate::metrics::CompletionRecord;
use crate::router::RoutingDecision;
use crate::workload::WorkloadProfile;

/// A client request as the gateway sees it. Token counts are declared by
/// the client; there is no tokenizer in the loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestEnvelope {
    pub request_id: u64,
    pub prompt_len: u32,
    pub max_new_tokens: u32,
    pub prefix_group: u32,
    /// Virtual submit time; live mode derives this from the wall clock.
    pub submit_time_ms: u64,
    /// Workload profile supplying the acceptance character; `None` uses
    /// the scheduler's default.
    pub profile_name: Option<String>,
}

/// Admission/collection front end over one engine instance.
#[derive(Debug, Clone)]
pub struct Scheduler {
    engine: Engine,
    default_profile: String,
    seen: usize,
    ready: BTreeMap<u64, Completion>,
    collected: BTreeSet<u64>,
    shut_down: bool,
}

impl Scheduler {
    pub fn new(
        cfg: EngineConfig,
        cost: CostModel,
        profiles: &[WorkloadProfile],
        default_profile: &str,
    ) -> Result<Self, EngineError> {
        let engine = Engine::new(cfg, cost, profiles)?;
        Ok(Self {
            engine,
            default_profile: String::from(default_profile),
            seen: 0,
            ready: BTreeMap::new(),
            collected: BTreeSet::new(),
            shut_down: false,
        })
    }

    pub fn now_ms(&self) -> u64 {
        self.engine.now_ms()
    }

    pub fn is_shut_down(&self) -> bool {
        self.shut_down
    }

    fn drain_completions(&mut self) {
        let all = self.engine.completions();
        for c in &all[self.seen..] {
            self.ready.insert(c.record.request_id, c.clone());
        }
        self.seen = all.len();
    }

    /// Admit a request at its submit time (never earlier than the current
    /// virtual clock). Returns the routing decision that placed it.
    pub fn admit(&mut self, envelope: RequestEnvelope) -> Result<RoutingDecision, EngineError> {
        if self.shut_down {
            return Err(EngineError::ShutDown);
        }
        self.engine.advance_to_ms(envelope.submit_time_ms.max(self.engine.now_ms()));
        self.drain_completions();
        let profile_name = envelope
            .profile_name
            .unwrap_or_else(|| self.default_profile.clone());
        self.engine.admit(AdmissionRequest {
            request_id: envelope.request_id,
            prompt_len: envelope.prompt_len,
            max_new_tokens: envelope.max_new_tokens,
            prefix_group: envelope.prefix_group,
            profile_name,
        })
    }

    /// Resolve one request's completion, advancing simulated time as far as
    /// needed. Each record can be collected exactly once.
    pub fn collect(&mut self, request_id: u64) -> Result<Completion, EngineError> {
        if !self.engine.was_admitted(request_id) {
            return Err(EngineError::UnknownRequest(request_id));
        }
        if self.collected.contains(&request_id) {
            return Err(EngineError::AlreadyCollected(request_id));
        }
        loop {
            self.drain_completions();
            if let Some(c) = self.ready.remove(&request_id) {
                self.collected.insert(request_id);
                return Ok(c);
            }
            if !self.engine.step() {
                // admitted, not collected, engine idle: cannot happen with
                // a conserving engine
                return Err(EngineError::UnknownRequest(request_id));
            }
        }
    }

    /// Poll without advancing time: completions that are ready right now.
    pub fn poll_ready(&mut self) -> Vec<u64> {
        self.drain_completions();
        self.ready.keys().copied().collect()
    }

    /// Advance the virtual clock (live pacing calls this with wall time).
    pub fn advance_to_ms(&mut self, time_ms: u64) {
        self.engine.advance_to_ms(time_ms);
        self.drain_completions();
    }

    /// Stop admitting and drain everything in flight. Idempotent.
    pub fn shutdown(&mut self) {
        self.shut_down = true;
        self.engine.run_until_idle();
        self.drain_completions();
    }

    /// Records still waiting to be collected.
    pub fn uncollected(&self) -> Vec<u64> {
        self.ready.keys().copied().collect()
    }

    pub fn decisions_logged(&self) -> usize {
        self.engine.decisions_len()
    }

    /// Consume the scheduler and return the engine's full run output,
    /// covering every admitted request whether or not it was collected.
    pub fn into_output(self) -> RunOutput {
        let mut output = self.engine.into_output();
        output.records.sort_by_key(|r| r.request_id);
        output
    }
}

/// Convenience for tests and the wire protocol: the response-side view of a
/// completion.
pub fn response_fields(record: &CompletionRecord) -> (f64, f64, f64, u32) {
    (
        record.latency_s,
        record.tpot_s,
        record.throughput_tps,
        record.worker_id,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::RouterKind;
    use crate::workload::Arrival;

    fn profile() -> WorkloadProfile {
        WorkloadProfile {
            name: "p".into(),
            prompt_median: 80.0,
            prompt_sigma: 0.3,
            gen_median: 30.0,
            gen_sigma: 0.3,
            base_acceptance: 0.8,
            acceptance_volatility: 0.05,
            prefix_group_count: 8,
            arrival: Arrival::Closed { concurrency: 4 },
        }
    }

    fn envelope(id: u64, submit_ms: u64) -> RequestEnvelope {
        RequestEnvelope {
            request_id: id,
            prompt_len: 64,
            max_new_tokens: 12,
            prefix_group: 1,
            submit_time_ms: submit_ms,
            profile_name: None,
        }
    }

    fn scheduler() -> Scheduler {
        Scheduler::new(
            EngineConfig::default(),
            CostModel::default(),
            &[profile()],
            "p",
        )
        .unwrap()
    }

    #[test]
    fn admit_single_pair_always_routes_to_it() {
        let cfg = EngineConfig {
            n_pairs: 1,
            ..EngineConfig::default()
        };
        let mut sched =
            Scheduler::new(cfg, CostModel::default(), &[profile()], "p").unwrap();
        for id in 1..=5 {
            let d = sched.admit(envelope(id, 0)).unwrap();
            assert_eq!(d.chosen_worker, 1);
        }
    }

    #[test]
    fn round_robin_admissions_alternate() {
        let cfg = EngineConfig {
            router: RouterKind::RoundRobin,
            ..EngineConfig::default()
        };
        let mut sched =
            Scheduler::new(cfg, CostModel::default(), &[profile()], "p").unwrap();
        let picks: Vec<u32> = (1..=4)
            .map(|id| sched.admit(envelope(id, 0)).unwrap().chosen_worker)
            .collect();
        assert_eq!(picks, alloc::vec![1, 2, 1, 2]);
    }

    #[test]
    fn collect_returns_matching_record_once() {
        let mut sched = scheduler();
        sched.admit(envelope(7, 0)).unwrap();
        let c = sched.collect(7).unwrap();
        assert_eq!(c.record.request_id, 7);
        assert_eq!(c.record.gen_len, 12);
        assert!(matches!(
            sched.collect(7),
            Err(EngineError::AlreadyCollected(7))
        ));
    }

    #[test]
    fn collect_unknown_id_errors() {
        let mut sched = scheduler();
        assert!(matches!(
            sched.collect(404),
            Err(EngineError::UnknownRequest(404))
        ));
    }

    #[test]
    fn shutdown_blocks_admission_drains_and_is_idempotent() {
        let mut sched = scheduler();
        sched.admit(envelope(1, 0)).unwrap();
        sched.admit(envelope(2, 5)).unwrap();
        sched.shutdown();
        sched.shutdown(); // no-op
        assert!(matches!(sched.admit(envelope(3, 10)), Err(EngineError::ShutDown)));
        // in-flight requests drained and still collectable exactly once
        let mut ids = sched.uncollected();
        ids.sort_unstable();
        assert_eq!(ids, alloc::vec![1, 2]);
        assert!(sched.collect(1).is_ok());
        assert!(sched.collect(2).is_ok());
    }

    #[test]
    fn decisions_logged_one_per_admission() {
        let mut sched = scheduler();
        for id in 1..=9 {
            sched.admit(envelope(id, 0)).unwrap();
        }
        assert_eq!(sched.decisions_logged(), 9);
    }

    #[test]
    fn drain_property_every_admission_collectable_exactly_once() {
        let mut sched = scheduler();
        for id in 1..=20 {
            sched.admit(envelope(id, id * 3)).unwrap();
        }
        sched.shutdown();
        for id in 1..=20 {
            assert!(sched.collect(id).is_ok(), "id {id} not collectable");
        }
        for id in 1..=20 {
            assert!(matches!(
                sched.collect(id),
                Err(EngineError::AlreadyCollected(_))
            ));
        }
    }

    #[test]
    fn output_covers_all_admitted_requests() {
        let mut sched = scheduler();
        for id in 1..=6 {
            sched.admit(envelope(id, 0)).unwrap();
        }
        // collect half, leave half uncollected
        sched.collect(1).unwrap();
        sched.collect(2).unwrap();
        sched.shutdown();
        let out = sched.into_output();
        let ids: Vec<u64> = out.records.iter().map(|r| r.request_id).collect();
        assert_eq!(ids, alloc::vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(out.decisions.len(), 6);
    }
}
