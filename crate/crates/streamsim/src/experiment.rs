//! Experiment execution: single runs across seeds, the component ablation
//! matrix, fixed-depth comparisons, and closed-loop concurrency sweeps.
//!
//! Runs are paired by construction: every configuration row of a matrix
//! executes the same per-seed traces (hash-checked), so differences between
//! rows come from the configuration alone. Seeds derive as `seed0 + i`
//! unless an explicit distinct list is given.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use streamserve_core::engine::{
    run, CostModel, Drive, EngineConfig, EngineMode, RouterKind, RunOutput, SpeculationMode,
};
use streamserve_core::workload::{
    builtin_profiles, format_trace, generate_mixed_trace, parse_trace, Arrival, TraceRow,
    WorkloadProfile,
};

use crate::report::{build_row, per_seed_csv, records_jsonl, summary_csv, ReportRow};

/// Where a run's requests come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadSource {
    /// A built-in (or table-supplied) profile name, or `mixed` for a
    /// uniform blend over the whole profile table.
    Profile { name: String },
    /// A pre-generated JSONL trace replayed identically for every seed.
    Trace { path: PathBuf },
}

/// How requests are offered to the engine, overriding the profile's own
/// arrival process.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalMode {
    /// Follow the workload profile's arrival process.
    #[default]
    Profile,
    /// Closed loop at a fixed concurrency.
    Closed { concurrency: u32 },
    /// Open loop with Poisson arrivals.
    Open { rate_per_s: f64 },
    /// Open loop with Poisson-timed arrival batches: clients tend to show
    /// up in clumps, which is the regime metric-aware routing exists for.
    BurstyOpen { rate_per_s: f64, batch: u32 },
    /// Every request submitted at t=0, replayed open-loop.
    Burst,
}

/// Everything one experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub label: String,
    pub engine: EngineConfig,
    pub cost: CostModel,
    pub workload: WorkloadSource,
    /// Profile table; empty means the four builtins.
    pub profiles: Vec<WorkloadProfile>,
    pub n_requests: u64,
    pub arrival: ArrivalMode,
    pub repetitions: u32,
    pub seed0: u64,
    /// Explicit seed list; must be distinct and overrides `repetitions`.
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            label: "run".to_string(),
            engine: EngineConfig::default(),
            cost: CostModel::default(),
            workload: WorkloadSource::Profile {
                name: "mixed".to_string(),
            },
            profiles: Vec::new(),
            n_requests: 80,
            arrival: ArrivalMode::Profile,
            repetitions: 1,
            seed0: 0,
            seeds: None,
            out_dir: None,
        }
    }
}

impl ExperimentSpec {
    pub fn seeds(&self) -> Result<Vec<u64>> {
        let seeds = match &self.seeds {
            Some(list) => {
                let distinct: BTreeSet<u64> = list.iter().copied().collect();
                if distinct.len() != list.len() {
                    bail!("seed list contains duplicates; seeds must be distinct");
                }
                list.clone()
            }
            None => (0..self.repetitions as u64).map(|i| self.seed0 + i).collect(),
        };
        if seeds.is_empty() {
            bail!("at least one repetition is required");
        }
        Ok(seeds)
    }

    pub fn profile_table(&self) -> Vec<WorkloadProfile> {
        if self.profiles.is_empty() {
            builtin_profiles()
        } else {
            self.profiles.clone()
        }
    }
}

/// One seed's input: the trace it replays and the trace content hash.
#[derive(Debug, Clone)]
pub struct SeedTrace {
    pub seed: u64,
    pub trace: Vec<TraceRow>,
    pub hash: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Materialize the per-seed traces for a spec.
pub fn resolve_seed_traces(spec: &ExperimentSpec) -> Result<Vec<SeedTrace>> {
    let seeds = spec.seeds()?;
    let table = spec.profile_table();
    match &spec.workload {
        WorkloadSource::Trace { path } => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading trace {}", path.display()))?;
            let trace = parse_trace(&text)?;
            let hash = sha256_hex(text.as_bytes());
            Ok(seeds
                .into_iter()
                .map(|seed| SeedTrace {
                    seed,
                    trace: trace.clone(),
                    hash: hash.clone(),
                })
                .collect())
        }
        WorkloadSource::Profile { name } => {
            if spec.n_requests == 0 {
                bail!("n_requests must be >= 1");
            }
            let arrival = generation_arrival(spec, &table, name)?;
            seeds
                .into_iter()
                .map(|seed| {
                    let trace = if name == "mixed" {
                        generate_mixed_trace(&table, arrival, spec.n_requests, seed)?
                    } else {
                        let mut profile = table
                            .iter()
                            .find(|p| p.name == *name)
                            .with_context(|| format!("unknown profile `{name}`"))?
                            .clone();
                        profile.arrival = arrival;
                        streamserve_core::workload::generate_trace(
                            &profile,
                            spec.n_requests,
                            seed,
                        )?
                    };
                    let trace = regroup_bursts(trace, spec.arrival);
                    let hash = sha256_hex(format_trace(&trace).as_bytes());
                    Ok(SeedTrace { seed, trace, hash })
                })
                .collect()
        }
    }
}

/// For bursty-open arrivals: collapse consecutive rows into batches that
/// share one arrival timestamp (the batch head's Poisson arrival time).
fn regroup_bursts(mut trace: Vec<TraceRow>, arrival: ArrivalMode) -> Vec<TraceRow> {
    let ArrivalMode::BurstyOpen { batch, .. } = arrival else {
        return trace;
    };
    let batch = batch.max(1) as usize;
    let mut head = 0;
    for (i, row) in trace.iter_mut().enumerate() {
        if i % batch == 0 {
            head = row.arrival_time_ms;
        }
        row.arrival_time_ms = head;
    }
    trace
}

/// The arrival process traces are generated with, after overrides.
fn generation_arrival(
    spec: &ExperimentSpec,
    table: &[WorkloadProfile],
    name: &str,
) -> Result<Arrival> {
    Ok(match spec.arrival {
        ArrivalMode::Closed { concurrency } => Arrival::Closed { concurrency },
        ArrivalMode::Open { rate_per_s } => Arrival::Open { rate_per_s },
        // batch times are Poisson at rate/batch; rows are regrouped after
        // generation
        ArrivalMode::BurstyOpen { rate_per_s, batch } => Arrival::Open {
            rate_per_s: rate_per_s / batch.max(1) as f64,
        },
        // closed placeholders: every arrival stamps 0
        ArrivalMode::Burst => Arrival::Closed { concurrency: 1 },
        ArrivalMode::Profile => {
            if name == "mixed" {
                table
                    .first()
                    .map(|p| p.arrival)
                    .unwrap_or(Arrival::Closed { concurrency: 16 })
            } else {
                table
                    .iter()
                    .find(|p| p.name == name)
                    .with_context(|| format!("unknown profile `{name}`"))?
                    .arrival
            }
        }
    })
}

/// Resolve how the engine is driven for this spec.
pub fn resolve_drive(spec: &ExperimentSpec, traces: &[SeedTrace]) -> Drive {
    match spec.arrival {
        ArrivalMode::Closed { concurrency } => return Drive::Closed { concurrency },
        ArrivalMode::Open { .. } | ArrivalMode::BurstyOpen { .. } | ArrivalMode::Burst => {
            return Drive::Open
        }
        ArrivalMode::Profile => {}
    }
    match &spec.workload {
        WorkloadSource::Profile { name } => {
            let table = spec.profile_table();
            let arrival = generation_arrival(spec, &table, name)
                .unwrap_or(Arrival::Closed { concurrency: 16 });
            match arrival {
                Arrival::Closed { concurrency } => Drive::Closed { concurrency },
                Arrival::Open { .. } => Drive::Open,
            }
        }
        WorkloadSource::Trace { .. } => {
            // a trace with real arrival timestamps replays open-loop;
            // all-zero arrivals replay as one burst
            let timed = traces
                .first()
                .map(|t| t.trace.iter().any(|r| r.arrival_time_ms > 0))
                .unwrap_or(false);
            if timed {
                Drive::Open
            } else {
                Drive::Closed { concurrency: 16 }
            }
        }
    }
}

/// Execute one engine configuration over every seed trace, in parallel.
/// Returns the report row plus each seed's full run output (seed order).
pub fn run_row(
    label: &str,
    engine: &EngineConfig,
    cost: &CostModel,
    profiles: &[WorkloadProfile],
    drive: Drive,
    seed_traces: &[SeedTrace],
) -> Result<(ReportRow, Vec<RunOutput>)> {
    let mut outputs: Vec<Option<Result<RunOutput>>> = Vec::new();
    outputs.resize_with(seed_traces.len(), || None);
    std::thread::scope(|scope| {
        for (slot, st) in outputs.iter_mut().zip(seed_traces.iter()) {
            let mut cfg = engine.clone();
            cfg.seed = st.seed;
            scope.spawn(move || {
                *slot = Some(
                    run(&cfg, cost, profiles, &st.trace, drive).map_err(anyhow::Error::from),
                );
            });
        }
    });
    let mut runs = Vec::with_capacity(seed_traces.len());
    for (slot, st) in outputs.into_iter().zip(seed_traces.iter()) {
        let out = slot
            .expect("thread filled slot")
            .with_context(|| format!("row `{label}` seed {}", st.seed))?;
        runs.push(out);
    }
    let per_seed: Vec<(u64, Vec<_>)> = seed_traces
        .iter()
        .zip(runs.iter())
        .map(|(st, out)| (st.seed, out.records.clone()))
        .collect();
    let row = build_row(label, &seed_traces[0].hash, &per_seed)?;
    Ok((row, runs))
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Write a matrix of rows (and their raw records) into `out_dir`.
pub fn write_artifacts(
    out_dir: &Path,
    rows: &[ReportRow],
    runs: &[(String, Vec<(u64, RunOutput)>)],
) -> Result<()> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output dir {}", out_dir.display()))?;
    fs::write(out_dir.join("report.csv"), summary_csv(rows))?;
    fs::write(out_dir.join("per_seed.csv"), per_seed_csv(rows))?;
    fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(rows)?,
    )?;
    for (label, seed_runs) in runs {
        for (seed, out) in seed_runs {
            let stem = format!("{}_{seed}", sanitize(label));
            fs::write(
                out_dir.join(format!("records_{stem}.jsonl")),
                records_jsonl(&out.records),
            )?;
            let mut decisions = String::new();
            for d in &out.decisions {
                decisions.push_str(&d.to_json_line());
                decisions.push('\n');
            }
            fs::write(out_dir.join(format!("decisions_{stem}.jsonl")), decisions)?;
            let mut adapts = String::new();
            for a in &out.adapt_log {
                adapts.push_str(&serde_json::to_string(a)?);
                adapts.push('\n');
            }
            fs::write(out_dir.join(format!("adapt_{stem}.jsonl")), adapts)?;
            fs::write(
                out_dir.join(format!("snapshots_{stem}.csv")),
                streamserve_core::metrics::snapshots_to_csv(&out.snapshots),
            )?;
            if let Some(events) = &out.events {
                let mut text = String::new();
                for e in events {
                    text.push_str(&serde_json::to_string(e)?);
                    text.push('\n');
                }
                fs::write(out_dir.join(format!("events_{stem}.jsonl")), text)?;
            }
        }
    }
    Ok(())
}

fn attach_runs(seed_traces: &[SeedTrace], runs: Vec<RunOutput>) -> Vec<(u64, RunOutput)> {
    seed_traces
        .iter()
        .map(|st| st.seed)
        .zip(runs)
        .collect()
}

/// Run a single experiment across its seeds.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ReportRow> {
    let seed_traces = resolve_seed_traces(spec)?;
    let drive = resolve_drive(spec, &seed_traces);
    let profiles = spec.profile_table();
    let (row, runs) = run_row(
        &spec.label,
        &spec.engine,
        &spec.cost,
        &profiles,
        drive,
        &seed_traces,
    )?;
    if let Some(dir) = &spec.out_dir {
        write_artifacts(
            dir,
            std::slice::from_ref(&row),
            &[(spec.label.clone(), attach_runs(&seed_traces, runs))],
        )?;
    }
    Ok(row)
}

/// The component ablation matrix: row labels and engine-config deltas.
///
/// The full configuration leads; `w/o FlowGuard` drops the metric-aware
/// router entirely, which at the engine level is round-robin placement.
pub fn ablation_rows(base: &EngineConfig) -> Vec<(String, EngineConfig)> {
    let d_base = base.spec_config.d_base;
    let mk = |label: &str, f: &dyn Fn(&mut EngineConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        (label.to_string(), cfg)
    };
    vec![
        mk("StreamServe (Full)", &|_| {}),
        mk("w/ Round-Robin", &|c| c.router = RouterKind::RoundRobin),
        mk("w/o SpecuStream", &|c| c.speculation = SpeculationMode::Off),
        mk("w/ Monolithic Engine", &|c| c.mode = EngineMode::Monolithic),
        mk("w/o NIXL (Std. P2P)", &|c| {
            c.transfer = streamserve_core::engine::TransferMode::Standard
        }),
        mk("w/o FlowGuard", &|c| c.router = RouterKind::RoundRobin),
        mk("w/o SpecuStream Adapt", &|c| {
            c.speculation = SpeculationMode::Fixed { depth: d_base }
        }),
        mk("w/o FlowGuard/Specu", &|c| {
            c.router = RouterKind::RoundRobin;
            c.speculation = SpeculationMode::Off;
        }),
    ]
}

/// Run the full component ablation over shared per-seed traces.
pub fn run_ablation(spec: &ExperimentSpec) -> Result<Vec<ReportRow>> {
    let seed_traces = resolve_seed_traces(spec)?;
    let drive = resolve_drive(spec, &seed_traces);
    let profiles = spec.profile_table();
    let mut rows = Vec::new();
    let mut all_runs = Vec::new();
    for (label, cfg) in ablation_rows(&spec.engine) {
        let (row, runs) = run_row(&label, &cfg, &spec.cost, &profiles, drive, &seed_traces)?;
        rows.push(row);
        all_runs.push((label, attach_runs(&seed_traces, runs)));
    }
    if let Some(dir) = &spec.out_dir {
        write_artifacts(dir, &rows, &all_runs)?;
    }
    Ok(rows)
}

/// Fixed-depth comparison: the adaptive controller against frozen depths.
pub fn run_fixed_depth_comparison(
    spec: &ExperimentSpec,
    depths: &[u32],
) -> Result<Vec<ReportRow>> {
    if depths.is_empty() {
        bail!("at least one fixed depth is required");
    }
    let seed_traces = resolve_seed_traces(spec)?;
    let drive = resolve_drive(spec, &seed_traces);
    let profiles = spec.profile_table();
    let mut configs = vec![("StreamServe (adaptive)".to_string(), spec.engine.clone())];
    for &d in depths {
        let mut cfg = spec.engine.clone();
        cfg.speculation = SpeculationMode::Fixed { depth: d };
        configs.push((format!("Fixed Spec (d={d})"), cfg));
    }
    let mut rows = Vec::new();
    let mut all_runs = Vec::new();
    for (label, cfg) in configs {
        let (row, runs) = run_row(&label, &cfg, &spec.cost, &profiles, drive, &seed_traces)?;
        rows.push(row);
        all_runs.push((label, attach_runs(&seed_traces, runs)));
    }
    if let Some(dir) = &spec.out_dir {
        write_artifacts(dir, &rows, &all_runs)?;
    }
    Ok(rows)
}

/// Closed-loop sweep over concurrency levels; traces are shared across
/// levels so the levels are paired.
pub fn run_concurrency_sweep(spec: &ExperimentSpec, levels: &[u32]) -> Result<Vec<ReportRow>> {
    if levels.is_empty() || levels.contains(&0) {
        bail!("concurrency levels must be nonempty and positive");
    }
    let seed_traces = resolve_seed_traces(spec)?;
    let profiles = spec.profile_table();
    let mut rows = Vec::new();
    let mut all_runs = Vec::new();
    for &level in levels {
        let label = format!("c={level}");
        let (row, runs) = run_row(
            &label,
            &spec.engine,
            &spec.cost,
            &profiles,
            Drive::Closed { concurrency: level },
            &seed_traces,
        )?;
        rows.push(row);
        all_runs.push((label, attach_runs(&seed_traces, runs)));
    }
    if let Some(dir) = &spec.out_dir {
        write_artifacts(dir, &rows, &all_runs)?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ExperimentSpec {
        ExperimentSpec {
            n_requests: 12,
            arrival: ArrivalMode::Closed { concurrency: 4 },
            repetitions: 2,
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn seeds_derive_from_seed0() {
        let spec = ExperimentSpec {
            seed0: 10,
            repetitions: 3,
            ..ExperimentSpec::default()
        };
        assert_eq!(spec.seeds().unwrap(), vec![10, 11, 12]);
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let spec = ExperimentSpec {
            seeds: Some(vec![1, 2, 1]),
            ..ExperimentSpec::default()
        };
        assert!(spec.seeds().is_err());
    }

    #[test]
    fn single_seed_single_request_percentiles_collapse() {
        let spec = ExperimentSpec {
            n_requests: 1,
            repetitions: 1,
            arrival: ArrivalMode::Closed { concurrency: 1 },
            ..ExperimentSpec::default()
        };
        let row = run_experiment(&spec).unwrap();
        assert_eq!(row.requests, 1);
        assert_eq!(row.p50_s, row.p99_s);
        assert_eq!(row.p50_s, row.mean_latency_s);
    }

    #[test]
    fn ablation_labels_and_pairing() {
        let rows = run_ablation(&tiny_spec()).unwrap();
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(
            labels,
            vec![
                "StreamServe (Full)",
                "w/ Round-Robin",
                "w/o SpecuStream",
                "w/ Monolithic Engine",
                "w/o NIXL (Std. P2P)",
                "w/o FlowGuard",
                "w/o SpecuStream Adapt",
                "w/o FlowGuard/Specu",
            ]
        );
        // paired design: identical trace hashes across rows
        let h = &rows[0].trace_hash;
        assert!(rows.iter().all(|r| &r.trace_hash == h));
    }

    #[test]
    fn sweep_produces_one_row_per_level() {
        let rows = run_concurrency_sweep(&tiny_spec(), &[1, 3]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].label, "c=1");
        assert_eq!(rows[1].label, "c=3");
    }

    #[test]
    fn reports_are_reproducible_byte_for_byte() {
        let spec = tiny_spec();
        let a = summary_csv(&[run_experiment(&spec).unwrap()]);
        let b = summary_csv(&[run_experiment(&spec).unwrap()]);
        assert_eq!(a, b);
    }
}
