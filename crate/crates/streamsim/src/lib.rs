//! Experiment harness, reporting, trace I/O, and the live wire-protocol
//! gateway for the streamserve simulator.

pub mod experiment;
pub mod report;
pub mod serve;
pub mod traceio;

pub use experiment::{
    run_ablation, run_concurrency_sweep, run_experiment, run_fixed_depth_comparison,
    ArrivalMode, ExperimentSpec, WorkloadSource,
};
pub use report::{ReportRow, SeedStats};
