//! Report assembly: per-seed statistics, pooled percentile rows, and the
//! versioned CSV/JSON renderings experiments emit.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use streamserve_core::metrics::{percentile, CompletionRecord};

/// Bumped whenever a CSV column changes meaning or order.
pub const SCHEMA_VERSION: u32 = 1;

/// Latency/throughput statistics for one (config, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub seed: u64,
    pub requests: u64,
    pub mean_latency_s: f64,
    pub p50_s: f64,
    pub p90_s: f64,
    pub p95_s: f64,
    pub p99_s: f64,
    pub mean_throughput_tps: f64,
    pub mean_tpot_s: f64,
}

/// One configuration's report line: pooled percentiles over every request
/// from every seed, plus the per-seed breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub schema_version: u32,
    pub label: String,
    pub requests: u64,
    pub mean_latency_s: f64,
    pub p50_s: f64,
    pub p90_s: f64,
    pub p95_s: f64,
    pub p99_s: f64,
    pub mean_throughput_tps: f64,
    pub mean_tpot_s: f64,
    /// SHA-256 over the (first-seed) trace bytes; rows from a paired design
    /// share it.
    pub trace_hash: String,
    pub per_seed: Vec<SeedStats>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0u64;
    for x in xs {
        sum += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Summarize one seed's records.
pub fn seed_stats(seed: u64, records: &[CompletionRecord]) -> Result<SeedStats> {
    if records.is_empty() {
        bail!("seed {seed}: no completion records to summarize");
    }
    let latencies: Vec<f64> = records.iter().map(|r| r.latency_s).collect();
    Ok(SeedStats {
        seed,
        requests: records.len() as u64,
        mean_latency_s: mean(latencies.iter().copied()),
        p50_s: percentile(&latencies, 50.0)?,
        p90_s: percentile(&latencies, 90.0)?,
        p95_s: percentile(&latencies, 95.0)?,
        p99_s: percentile(&latencies, 99.0)?,
        mean_throughput_tps: mean(records.iter().map(|r| r.throughput_tps)),
        mean_tpot_s: mean(records.iter().map(|r| r.tpot_s)),
    })
}

/// Build a row from per-seed record sets; percentiles pool every request.
pub fn build_row(
    label: &str,
    trace_hash: &str,
    per_seed_records: &[(u64, Vec<CompletionRecord>)],
) -> Result<ReportRow> {
    if per_seed_records.is_empty() {
        bail!("row `{label}`: no runs to report");
    }
    let mut pooled_latencies = Vec::new();
    let mut per_seed = Vec::with_capacity(per_seed_records.len());
    for (seed, records) in per_seed_records {
        per_seed.push(seed_stats(*seed, records)?);
        pooled_latencies.extend(records.iter().map(|r| r.latency_s));
    }
    let all = per_seed_records.iter().flat_map(|(_, rs)| rs.iter());
    let row = ReportRow {
        schema_version: SCHEMA_VERSION,
        label: label.to_string(),
        requests: pooled_latencies.len() as u64,
        mean_latency_s: mean(all.clone().map(|r| r.latency_s)),
        p50_s: percentile(&pooled_latencies, 50.0)?,
        p90_s: percentile(&pooled_latencies, 90.0)?,
        p95_s: percentile(&pooled_latencies, 95.0)?,
        p99_s: percentile(&pooled_latencies, 99.0)?,
        mean_throughput_tps: mean(all.clone().map(|r| r.throughput_tps)),
        mean_tpot_s: mean(all.clone().map(|r| r.tpot_s)),
        trace_hash: trace_hash.to_string(),
        per_seed,
    };
    debug_assert!(row.p50_s <= row.p90_s && row.p90_s <= row.p95_s && row.p95_s <= row.p99_s);
    Ok(row)
}

pub const SUMMARY_HEADER: &str = "schema_version,label,seeds,requests,mean_latency_s,p50_s,p90_s,p95_s,p99_s,mean_throughput_tps,mean_tpot_s,trace_hash";
pub const PER_SEED_HEADER: &str = "schema_version,label,seed,requests,mean_latency_s,p50_s,p90_s,p95_s,p99_s,mean_throughput_tps,mean_tpot_s";

/// Render the summary CSV (one line per row). Fixed six-decimal formatting
/// keeps re-runs byte-identical.
pub fn summary_csv(rows: &[ReportRow]) -> String {
    use std::fmt::Write;
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.schema_version,
            r.label,
            r.per_seed.len(),
            r.requests,
            r.mean_latency_s,
            r.p50_s,
            r.p90_s,
            r.p95_s,
            r.p99_s,
            r.mean_throughput_tps,
            r.mean_tpot_s,
            r.trace_hash
        );
    }
    out
}

/// Render the per-seed CSV.
pub fn per_seed_csv(rows: &[ReportRow]) -> String {
    use std::fmt::Write;
    let mut out = String::from(PER_SEED_HEADER);
    out.push('\n');
    for r in rows {
        for s in &r.per_seed {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.schema_version,
                r.label,
                s.seed,
                s.requests,
                s.mean_latency_s,
                s.p50_s,
                s.p90_s,
                s.p95_s,
                s.p99_s,
                s.mean_throughput_tps,
                s.mean_tpot_s
            );
        }
    }
    out
}

/// Parse a records JSONL file (one `CompletionRecord` per line).
pub fn parse_records_jsonl(text: &str) -> Result<Vec<CompletionRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CompletionRecord = serde_json::from_str(line)
            .with_context(|| format!("records line {}", i + 1))?;
        records.push(rec);
    }
    if records.is_empty() {
        bail!("records file contains no rows");
    }
    Ok(records)
}

/// Render records as JSONL.
pub fn records_jsonl(records: &[CompletionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: u64, latency_s: f64) -> CompletionRecord {
        let end = (latency_s * 1000.0) as u64;
        CompletionRecord {
            request_id: id,
            worker_id: 1,
            t_start_ms: 0,
            t_end_ms: end,
            prefill_finish_ms: 1,
            transfer_finish_ms: Some(2),
            decode_start_ms: 2,
            token_emit_times_ms: vec![end],
            prompt_len: 10,
            gen_len: 1,
            latency_s,
            tpot_s: latency_s,
            throughput_tps: 11.0 / latency_s,
        }
    }

    #[test]
    fn single_record_row_has_equal_percentiles() {
        let row = build_row("one", "h", &[(1, vec![record(1, 0.25)])]).unwrap();
        assert_eq!(row.p50_s, 0.25);
        assert_eq!(row.p90_s, 0.25);
        assert_eq!(row.p95_s, 0.25);
        assert_eq!(row.p99_s, 0.25);
        assert_eq!(row.mean_latency_s, 0.25);
    }

    #[test]
    fn percentiles_are_ordered() {
        let records: Vec<CompletionRecord> =
            (1..=200).map(|i| record(i, i as f64 / 100.0)).collect();
        let row = build_row("many", "h", &[(1, records)]).unwrap();
        assert!(row.p50_s <= row.p90_s);
        assert!(row.p90_s <= row.p95_s);
        assert!(row.p95_s <= row.p99_s);
    }

    #[test]
    fn csv_rendering_is_stable() {
        let rows = vec![build_row("a", "h", &[(1, vec![record(1, 0.5)])]).unwrap()];
        let a = summary_csv(&rows);
        let b = summary_csv(&rows);
        assert_eq!(a, b);
        assert!(a.starts_with(SUMMARY_HEADER));
        assert!(a.contains(",a,1,1,0.500000,"));
    }

    #[test]
    fn records_round_trip() {
        let records: Vec<CompletionRecord> = (1..=5).map(|i| record(i, 0.1 * i as f64)).collect();
        let text = records_jsonl(&records);
        let back = parse_records_jsonl(&text).unwrap();
        assert_eq!(records, back);
    }
}
