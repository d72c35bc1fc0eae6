//! `streamsim` — run simulated serving experiments, ablations, concurrency
//! sweeps, trace generation, reporting, and the live gateway.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use streamserve_core::engine::{EngineConfig, RouterKind, SpeculationMode};
use streamserve_core::workload::{builtin_profiles, Arrival, WorkloadProfile};
use streamsim::experiment::{
    run_ablation, run_concurrency_sweep, run_experiment, run_fixed_depth_comparison,
    ExperimentSpec, WorkloadSource,
};
use streamsim::report::{build_row, parse_records_jsonl, summary_csv};
use streamsim::serve::{serve_stdio, serve_tcp, ServeOptions};
use streamsim::traceio::save_trace;

#[derive(Parser)]
#[command(name = "streamsim", version, about = "Disaggregated-serving simulator and experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment configuration across seeds.
    Run(ExperimentArgs),
    /// Run the component ablation matrix (or a fixed-depth comparison).
    Ablate(AblateArgs),
    /// Run a closed-loop concurrency sweep.
    Sweep(SweepArgs),
    /// Generate a workload trace file.
    GenTrace(GenTraceArgs),
    /// Serve the newline-delimited JSON protocol live.
    Serve(ServeArgs),
    /// Rebuild a report from a records JSONL file.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Experiment spec as JSON; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Workload profile name (alpaca|gsm8k|humaneval|sum|mixed).
    #[arg(long)]
    profile: Option<String>,
    /// Replay this trace file instead of generating one.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Requests per run.
    #[arg(long)]
    requests: Option<u64>,
    /// Closed-loop concurrency.
    #[arg(long, conflicts_with_all = ["burst", "open_rate"])]
    concurrency: Option<u32>,
    /// Submit every request at t=0 (batch replay).
    #[arg(long, conflicts_with = "open_rate")]
    burst: bool,
    /// Open-loop Poisson arrivals at this rate (requests/s).
    #[arg(long)]
    open_rate: Option<f64>,
    /// Cluster open-loop arrivals into batches of this size.
    #[arg(long, requires = "open_rate")]
    arrival_batch: Option<u32>,
    /// Base seed; repetition i runs with seed + i.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeds to run.
    #[arg(long)]
    reps: Option<u32>,
    /// Output directory (defaults to $STREAMSIM_OUT when set).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Row label in reports.
    #[arg(long)]
    label: Option<String>,
    /// Number of stream pairs.
    #[arg(long)]
    pairs: Option<u32>,
    /// Record a JSONL event log per run.
    #[arg(long)]
    event_log: bool,
    /// Route round-robin instead of metric-aware.
    #[arg(long)]
    round_robin: bool,
    /// Freeze speculation at a fixed depth (0 disables speculation).
    #[arg(long)]
    fixed_depth: Option<u32>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    base: ExperimentArgs,
    /// Run the fixed-depth comparison at these depths instead of the
    /// component matrix.
    #[arg(long, value_delimiter = ',')]
    fixed_depths: Option<Vec<u32>>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    base: ExperimentArgs,
    /// Concurrency levels, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,5,15,30")]
    levels: Vec<u32>,
}

#[derive(Args)]
struct GenTraceArgs {
    /// Workload profile name (alpaca|gsm8k|humaneval|sum|mixed).
    #[arg(long, default_value = "mixed")]
    profile: String,
    #[arg(long, default_value_t = 80)]
    requests: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generate open-loop Poisson arrivals at this rate (requests/s);
    /// omitted means closed-loop placeholders.
    #[arg(long)]
    open_rate: Option<f64>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out_file: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Listen on a TCP address (e.g. 127.0.0.1:7070).
    #[arg(long, conflicts_with = "stdio")]
    listen: Option<String>,
    /// Serve over stdin/stdout.
    #[arg(long)]
    stdio: bool,
    #[arg(long, default_value = "alpaca")]
    profile: String,
    #[arg(long, default_value_t = 2)]
    pairs: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Records JSONL file produced by a run.
    #[arg(long)]
    records: PathBuf,
    #[arg(long, default_value = "report")]
    label: String,
    /// Output directory; prints CSV to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_out_dir() -> Option<PathBuf> {
    std::env::var_os("STREAMSIM_OUT").map(PathBuf::from)
}

fn build_spec(args: &ExperimentArgs) -> Result<ExperimentSpec> {
    let mut spec = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => ExperimentSpec::default(),
    };
    if let Some(name) = &args.profile {
        spec.workload = WorkloadSource::Profile { name: name.clone() };
    }
    if let Some(path) = &args.trace {
        if !path.exists() {
            bail!("trace file {} does not exist", path.display());
        }
        spec.workload = WorkloadSource::Trace { path: path.clone() };
    }
    if let Some(n) = args.requests {
        spec.n_requests = n;
    }
    if let Some(c) = args.concurrency {
        spec.arrival = streamsim::experiment::ArrivalMode::Closed { concurrency: c };
    }
    if args.burst {
        spec.arrival = streamsim::experiment::ArrivalMode::Burst;
    }
    if let Some(rate) = args.open_rate {
        spec.arrival = match args.arrival_batch {
            Some(batch) if batch > 1 => streamsim::experiment::ArrivalMode::BurstyOpen {
                rate_per_s: rate,
                batch,
            },
            _ => streamsim::experiment::ArrivalMode::Open { rate_per_s: rate },
        };
    }
    if let Some(s) = args.seed {
        spec.seed0 = s;
    }
    if let Some(r) = args.reps {
        spec.repetitions = r;
    }
    if let Some(l) = &args.label {
        spec.label = l.clone();
    }
    if let Some(p) = args.pairs {
        spec.engine.n_pairs = p;
    }
    if args.event_log {
        spec.engine.event_log = true;
    }
    if args.round_robin {
        spec.engine.router = RouterKind::RoundRobin;
    }
    if let Some(d) = args.fixed_depth {
        spec.engine.speculation = if d == 0 {
            SpeculationMode::Off
        } else {
            SpeculationMode::Fixed { depth: d }
        };
    }
    spec.out_dir = args.out.clone().or_else(|| spec.out_dir.take()).or_else(default_out_dir);
    Ok(spec)
}

fn print_rows(rows: &[streamsim::ReportRow]) {
    print!("{}", summary_csv(rows));
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let spec = build_spec(&args)?;
            let row = run_experiment(&spec)?;
            print_rows(std::slice::from_ref(&row));
            if let Some(dir) = &spec.out_dir {
                eprintln!("artifacts written to {}", dir.display());
            }
        }
        Command::Ablate(args) => {
            let spec = build_spec(&args.base)?;
            let rows = match &args.fixed_depths {
                Some(depths) => run_fixed_depth_comparison(&spec, depths)?,
                None => run_ablation(&spec)?,
            };
            print_rows(&rows);
            if let Some(dir) = &spec.out_dir {
                eprintln!("artifacts written to {}", dir.display());
            }
        }
        Command::Sweep(args) => {
            let spec = build_spec(&args.base)?;
            let rows = run_concurrency_sweep(&spec, &args.levels)?;
            print_rows(&rows);
            if let Some(dir) = &spec.out_dir {
                eprintln!("artifacts written to {}", dir.display());
            }
        }
        Command::GenTrace(args) => {
            let table = builtin_profiles();
            let arrival = match args.open_rate {
                Some(rate) => Arrival::Open { rate_per_s: rate },
                None => Arrival::Closed { concurrency: 16 },
            };
            let rows = if args.profile == "mixed" {
                streamserve_core::workload::generate_mixed_trace(
                    &table,
                    arrival,
                    args.requests,
                    args.seed,
                )?
            } else {
                let mut profile: WorkloadProfile = table
                    .iter()
                    .find(|p| p.name == args.profile)
                    .cloned()
                    .with_context(|| format!("unknown profile `{}`", args.profile))?;
                if let Some(rate) = args.open_rate {
                    profile.arrival = Arrival::Open { rate_per_s: rate };
                }
                streamserve_core::workload::generate_trace(&profile, args.requests, args.seed)?
            };
            match &args.out_file {
                Some(path) => {
                    save_trace(path, &rows)?;
                    eprintln!("wrote {} rows to {}", rows.len(), path.display());
                }
                None => print!("{}", streamserve_core::workload::format_trace(&rows)),
            }
        }
        Command::Serve(args) => {
            let table = builtin_profiles();
            if !table.iter().any(|p| p.name == args.profile) {
                bail!("unknown profile `{}`", args.profile);
            }
            let opts = ServeOptions {
                engine: EngineConfig {
                    n_pairs: args.pairs,
                    seed: args.seed,
                    ..EngineConfig::default()
                },
                cost: Default::default(),
                profiles: table,
                default_profile: args.profile,
            };
            match (&args.listen, args.stdio) {
                (Some(addr), false) => serve_tcp(&opts, addr)?,
                (None, true) => serve_stdio(&opts)?,
                _ => bail!("choose exactly one of --listen <addr> or --stdio"),
            }
        }
        Command::Report(args) => {
            let text = std::fs::read_to_string(&args.records)
                .with_context(|| format!("reading {}", args.records.display()))?;
            let records = parse_records_jsonl(&text)?;
            let row = build_row(&args.label, "-", &[(0, records)])?;
            let csv = summary_csv(std::slice::from_ref(&row));
            match &args.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join("report.csv"), &csv)?;
                    std::fs::write(
                        dir.join("report.json"),
                        serde_json::to_string_pretty(&[row])?,
                    )?;
                    eprintln!("report written to {}", dir.display());
                }
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}
