//! Core library for StreamServe-style disaggregated LLM serving: metric
//! collection, multi-signal routing, adaptive speculation control, workload
//! synthesis, and a deterministic discrete-event engine that ties them
//! together.
//!
//! The crate is `no_std` + `alloc` so the control-plane algorithms and the
//! simulator can be embedded anywhere; all file and network I/O lives in the
//! companion `streamsim` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod engine;
pub mod metrics;
pub mod router;
pub mod scheduler;
pub mod speculation;
pub mod workload;

pub use engine::{CostModel, EngineConfig, RouterKind, SpeculationMode, TransferMode};
pub use metrics::{CompletionRecord, MetricsRegistry, WorkerMetricsSnapshot};
pub use router::{OverloadConfig, RouterConfig, RoutingDecision, RoutingWeights};
pub use speculation::{FlowState, SpecConfig, SpeculationPlan};
pub use workload::{TraceRow, WorkloadProfile};
