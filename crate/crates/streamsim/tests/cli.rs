//! End-to-end CLI checks: trace generation, runs, reports, the ablation
//! matrix, and the stdio wire protocol.

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

fn streamsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streamsim"))
}

#[test]
fn gen_trace_run_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("trace.jsonl");

    let status = streamsim()
        .args(["gen-trace", "--profile", "gsm8k", "--requests", "30", "--seed", "3"])
        .arg("--out-file")
        .arg(&trace_path)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&trace_path).unwrap();
    assert_eq!(text.lines().count(), 30);

    let out_dir = dir.path().join("run");
    let output = streamsim()
        .args(["run", "--label", "smoke", "--reps", "2", "--seed", "5", "--concurrency", "8"])
        .arg("--trace")
        .arg(&trace_path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let csv = String::from_utf8(output.stdout).unwrap();
    assert!(csv.starts_with("schema_version,label,"));
    assert!(csv.contains(",smoke,2,60,"));
    assert!(out_dir.join("report.csv").exists());
    assert!(out_dir.join("report.json").exists());
    assert!(out_dir.join("per_seed.csv").exists());
    assert!(out_dir.join("records_smoke_5.jsonl").exists());
    assert!(out_dir.join("decisions_smoke_6.jsonl").exists());
    assert!(out_dir.join("snapshots_smoke_5.csv").exists());

    // rebuild a report from the raw records
    let report = streamsim()
        .args(["report", "--label", "rebuilt"])
        .arg("--records")
        .arg(out_dir.join("records_smoke_5.jsonl"))
        .output()
        .unwrap();
    assert!(report.status.success());
    let report_csv = String::from_utf8(report.stdout).unwrap();
    assert!(report_csv.contains(",rebuilt,1,30,"));
}

#[test]
fn default_run_emits_ordered_percentiles() {
    // default config: 80 requests of the mixed profile
    let output = streamsim()
        .args(["run", "--seed", "11"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let csv = String::from_utf8(output.stdout).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let cols: Vec<&str> = row.split(',').collect();
    let (p50, p90, p95, p99): (f64, f64, f64, f64) = (
        cols[5].parse().unwrap(),
        cols[6].parse().unwrap(),
        cols[7].parse().unwrap(),
        cols[8].parse().unwrap(),
    );
    assert!(p50 <= p90 && p90 <= p95 && p95 <= p99);
    assert_eq!(cols[3], "80");
}

#[test]
fn ablate_emits_eight_labeled_rows_full_first() {
    let output = streamsim()
        .args(["ablate", "--requests", "16", "--concurrency", "8", "--reps", "1", "--seed", "2"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let csv = String::from_utf8(output.stdout).unwrap();
    let labels: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
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
}

#[test]
fn ablate_fixed_depths_compares_adaptive_against_frozen() {
    let output = streamsim()
        .args([
            "ablate", "--requests", "16", "--concurrency", "8", "--reps", "1", "--seed", "2",
            "--fixed-depths", "3,5,7",
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let csv = String::from_utf8(output.stdout).unwrap();
    let labels: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(
        labels,
        vec![
            "StreamServe (adaptive)",
            "Fixed Spec (d=3)",
            "Fixed Spec (d=5)",
            "Fixed Spec (d=7)",
        ]
    );
}

#[test]
fn sweep_levels_flag_shapes_rows() {
    let output = streamsim()
        .args(["sweep", "--requests", "12", "--reps", "1", "--seed", "4", "--levels", "1,4"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let csv = String::from_utf8(output.stdout).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(labels, vec!["c=1", "c=4"]);
}

#[test]
fn serve_stdio_answers_wire_requests() {
    let mut child = streamsim()
        .args(["serve", "--stdio", "--pairs", "1", "--profile", "alpaca"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    {
        let stdin = child.stdin.as_mut().unwrap();
        writeln!(
            stdin,
            "{{\"op\":\"generate\",\"id\":1,\"prompt_tokens\":40,\"max_new_tokens\":6,\"prefix_group\":0}}"
        )
        .unwrap();
        writeln!(
            stdin,
            "{{\"op\":\"generate\",\"id\":2,\"prompt_tokens\":20,\"max_new_tokens\":3,\"prefix_group\":1}}"
        )
        .unwrap();
    }
    drop(child.stdin.take()); // EOF lets the gateway drain and exit
    let stdout = BufReader::new(child.stdout.take().unwrap());
    let mut ids = Vec::new();
    for line in stdout.lines() {
        let line = line.unwrap();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert!(v.get("latency_s").is_some(), "unexpected line {line}");
        assert_eq!(v["worker"], 1);
        ids.push(v["id"].as_u64().unwrap());
    }
    ids.sort_unstable();
    assert_eq!(ids, vec![1, 2]);
    let status = child.wait().unwrap();
    assert!(status.success());
}
