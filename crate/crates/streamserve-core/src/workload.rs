//! Synthetic request traces with per-workload statistical character.
//!
//! The four built-in profiles stand in for the instruction-following,
//! math-reasoning, code-generation, and summarization benchmark suites:
//! prompt and output lengths are lognormal, prefix groups model shared
//! prompt prefixes, and each profile carries a base speculative acceptance
//! rate plus a volatility that drives an AR(1) acceptance process during
//! decode. All numeric defaults are simulator parameters chosen for their
//! qualitative ordering (summarization most regular and highest acceptance,
//! code generation most volatile), not measurements.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

/// How requests arrive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrival {
    /// Poisson arrivals at `rate_per_s` requests/second.
    Open { rate_per_s: f64 },
    /// Fixed number of concurrent clients, each issuing its next request on
    /// completion. Traces carry arrival placeholders of 0; the engine
    /// resolves actual admission times at run time.
    Closed { concurrency: u32 },
}

/// Statistical profile of one workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub name: String,
    /// Median prompt length, tokens.
    pub prompt_median: f64,
    /// Lognormal sigma of the prompt length.
    pub prompt_sigma: f64,
    /// Median generation length, tokens.
    pub gen_median: f64,
    pub gen_sigma: f64,
    /// Base speculative acceptance probability.
    pub base_acceptance: f64,
    /// Stationary standard deviation of the acceptance process.
    pub acceptance_volatility: f64,
    /// Number of distinct shared prefixes requests draw from.
    pub prefix_group_count: u32,
    pub arrival: Arrival,
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let positive = |name: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(WorkloadError::InvalidProfile {
                    profile: self.name.clone(),
                    reason: format!("{name} must be positive"),
                })
            }
        };
        positive("prompt_median", self.prompt_median)?;
        positive("prompt_sigma", self.prompt_sigma)?;
        positive("gen_median", self.gen_median)?;
        positive("gen_sigma", self.gen_sigma)?;
        if !(0.0..=1.0).contains(&self.base_acceptance) {
            return Err(WorkloadError::InvalidProfile {
                profile: self.name.clone(),
                reason: "base_acceptance must lie in [0, 1]".to_string(),
            });
        }
        if self.acceptance_volatility.is_nan() || self.acceptance_volatility < 0.0 {
            return Err(WorkloadError::InvalidProfile {
                profile: self.name.clone(),
                reason: "acceptance_volatility must be >= 0".to_string(),
            });
        }
        if self.prefix_group_count == 0 {
            return Err(WorkloadError::InvalidProfile {
                profile: self.name.clone(),
                reason: "prefix_group_count must be >= 1".to_string(),
            });
        }
        match self.arrival {
            Arrival::Open { rate_per_s } => positive("rate_per_s", rate_per_s)?,
            Arrival::Closed { concurrency } => {
                if concurrency == 0 {
                    return Err(WorkloadError::InvalidProfile {
                        profile: self.name.clone(),
                        reason: "concurrency must be >= 1".to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Look up one of the built-in profiles by name.
    pub fn builtin(name: &str) -> Option<WorkloadProfile> {
        builtin_profiles().into_iter().find(|p| p.name == name)
    }
}

/// The four built-in workload profiles.
pub fn builtin_profiles() -> Vec<WorkloadProfile> {
    let mk = |name: &str,
              prompt_median: f64,
              prompt_sigma: f64,
              gen_median: f64,
              gen_sigma: f64,
              base_acceptance: f64,
              acceptance_volatility: f64,
              prefix_group_count: u32| WorkloadProfile {
        name: name.to_string(),
        prompt_median,
        prompt_sigma,
        gen_median,
        gen_sigma,
        base_acceptance,
        acceptance_volatility,
        prefix_group_count,
        arrival: Arrival::Closed { concurrency: 16 },
    };
    alloc::vec![
        mk("alpaca", 120.0, 0.45, 60.0, 0.35, 0.70, 0.08, 2),
        mk("gsm8k", 180.0, 0.40, 150.0, 0.35, 0.72, 0.10, 2),
        mk("humaneval", 150.0, 0.50, 220.0, 0.40, 0.75, 0.15, 2),
        mk("sum", 600.0, 0.60, 90.0, 0.25, 0.85, 0.02, 1),
    ]
}

/// Find a profile by name in a table, or among the builtins.
pub fn resolve_profile<'a>(
    table: &'a [WorkloadProfile],
    name: &str,
) -> Option<&'a WorkloadProfile> {
    table.iter().find(|p| p.name == name)
}

/// Spacing between profiles' prefix-group id ranges in mixed traces.
pub const PROFILE_GROUP_STRIDE: u32 = 4_096;

/// One request descriptor. Serialized one-per-line in trace files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub request_id: u64,
    pub arrival_time_ms: u64,
    pub prompt_len: u32,
    pub max_new_tokens: u32,
    pub prefix_group: u32,
    pub profile_name: String,
}

/// Generate a seeded, reproducible trace from a single profile.
pub fn generate_trace(
    profile: &WorkloadProfile,
    n_requests: u64,
    seed: u64,
) -> Result<Vec<TraceRow>, WorkloadError> {
    generate_mixed_trace(core::slice::from_ref(profile), profile.arrival, n_requests, seed)
}

/// Generate a trace drawing each request's profile uniformly from `profiles`.
///
/// The arrival process is shared across the blend since closed-loop pacing
/// is a property of the run, not of any one profile.
pub fn generate_mixed_trace(
    profiles: &[WorkloadProfile],
    arrival: Arrival,
    n_requests: u64,
    seed: u64,
) -> Result<Vec<TraceRow>, WorkloadError> {
    if profiles.is_empty() {
        return Err(WorkloadError::NoProfiles);
    }
    if n_requests == 0 {
        return Err(WorkloadError::EmptyTrace);
    }
    for p in profiles {
        p.validate()?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_requests as usize);
    let mut clock_ms = 0u64;
    for id in 1..=n_requests {
        let (profile_idx, profile) = if profiles.len() == 1 {
            (0, &profiles[0])
        } else {
            let i = rng.gen_range(0..profiles.len());
            (i, &profiles[i])
        };
        let prompt_len = sample_lognormal_len(&mut rng, profile.prompt_median, profile.prompt_sigma);
        let max_new_tokens = sample_lognormal_len(&mut rng, profile.gen_median, profile.gen_sigma);
        // groups are namespaced per profile: distinct workloads never share
        // a prompt prefix
        let prefix_group =
            profile_idx as u32 * PROFILE_GROUP_STRIDE + rng.gen_range(0..profile.prefix_group_count);
        let arrival_time_ms = match arrival {
            Arrival::Closed { .. } => 0,
            Arrival::Open { rate_per_s } => {
                let exp = Exp::new(rate_per_s).map_err(|_| WorkloadError::InvalidProfile {
                    profile: profile.name.clone(),
                    reason: "invalid open arrival rate".to_string(),
                })?;
                let gap_s: f64 = exp.sample(&mut rng);
                clock_ms += libm::round(gap_s * 1000.0) as u64;
                clock_ms
            }
        };
        rows.push(TraceRow {
            request_id: id,
            arrival_time_ms,
            prompt_len,
            max_new_tokens,
            prefix_group,
            profile_name: profile.name.clone(),
        });
    }
    Ok(rows)
}

fn sample_lognormal_len(rng: &mut ChaCha8Rng, median: f64, sigma: f64) -> u32 {
    let mu = libm::log(median);
    let dist = LogNormal::new(mu, sigma).expect("validated parameters");
    let v: f64 = dist.sample(rng);
    libm::round(v).max(1.0) as u32
}

/// Render rows as JSONL, one row per line.
pub fn format_trace(rows: &[TraceRow]) -> String {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("row serializes"));
        out.push('\n');
    }
    out
}

/// Parse and validate a JSONL trace. Rows must carry positive lengths and
/// nondecreasing arrival times; violations name the offending line.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>, WorkloadError> {
    let mut rows = Vec::new();
    let mut last_arrival = 0u64;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: TraceRow =
            serde_json::from_str(line).map_err(|e| WorkloadError::Parse {
                line: line_no,
                reason: e.to_string(),
            })?;
        if row.prompt_len == 0 {
            return Err(WorkloadError::InvalidRow {
                line: line_no,
                reason: "prompt_len must be >= 1".to_string(),
            });
        }
        if row.max_new_tokens == 0 {
            return Err(WorkloadError::InvalidRow {
                line: line_no,
                reason: "max_new_tokens must be >= 1".to_string(),
            });
        }
        if !rows.is_empty() && row.arrival_time_ms < last_arrival {
            return Err(WorkloadError::NonMonotonicArrival { line: line_no });
        }
        last_arrival = row.arrival_time_ms;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(WorkloadError::EmptyTrace);
    }
    Ok(rows)
}

/// AR(1) acceptance-rate process around a profile's base rate.
///
/// The innovation variance is scaled so `volatility` is the *stationary*
/// standard deviation; realized values are clamped into `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AcceptanceProcess {
    base: f64,
    innovation_sd: f64,
    persistence: f64,
    current: f64,
}

impl AcceptanceProcess {
    const PERSISTENCE: f64 = 0.9;

    pub fn new(base: f64, volatility: f64) -> Self {
        let persistence = Self::PERSISTENCE;
        let innovation_sd = volatility * libm::sqrt(1.0 - persistence * persistence);
        Self {
            base,
            innovation_sd,
            persistence,
            current: base,
        }
    }

    pub fn for_profile(profile: &WorkloadProfile) -> Self {
        Self::new(profile.base_acceptance, profile.acceptance_volatility)
    }

    pub fn current(&self) -> f64 {
        self.current
    }

    /// Advance one step and return the new acceptance probability.
    pub fn step<R: Rng>(&mut self, rng: &mut R) -> f64 {
        let eps: f64 = StandardNormal.sample(rng);
        let next = self.base
            + self.persistence * (self.current - self.base)
            + self.innovation_sd * eps;
        self.current = next.clamp(0.0, 1.0);
        self.current
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadError {
    InvalidProfile { profile: String, reason: String },
    NoProfiles,
    EmptyTrace,
    Parse { line: usize, reason: String },
    InvalidRow { line: usize, reason: String },
    NonMonotonicArrival { line: usize },
}

impl fmt::Display for WorkloadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorkloadError::InvalidProfile { profile, reason } => {
                write!(f, "invalid profile `{profile}`: {reason}")
            }
            WorkloadError::NoProfiles => write!(f, "no workload profiles supplied"),
            WorkloadError::EmptyTrace => write!(f, "trace contains no rows"),
            WorkloadError::Parse { line, reason } => {
                write!(f, "trace line {line}: parse error: {reason}")
            }
            WorkloadError::InvalidRow { line, reason } => {
                write!(f, "trace line {line}: {reason}")
            }
            WorkloadError::NonMonotonicArrival { line } => {
                write!(f, "trace line {line}: arrival times must be nondecreasing")
            }
        }
    }
}

impl core::error::Error for WorkloadError {}
