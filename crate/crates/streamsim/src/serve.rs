//! Live gateway: the newline-delimited JSON request protocol over stdin/
//! stdout or a TCP socket.
//!
//! Requests: `{"op":"generate","id":1,"prompt_tokens":64,"max_new_tokens":32,"prefix_group":3}`
//! Responses: `{"id":1,"latency_s":..,"tpot_s":..,"throughput_tps":..,"worker":1,"depth_trace":[..]}`
//!
//! Wall-clock pacing maps elapsed real milliseconds onto the engine's
//! virtual clock; immediate pacing admits everything at the current virtual
//! instant and drains, which is the zero-jitter reference the simulation
//! equivalence property runs against.

use std::io::{BufRead, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use streamserve_core::engine::{Completion, CostModel, EngineConfig};
use streamserve_core::scheduler::{RequestEnvelope, Scheduler};
use streamserve_core::workload::WorkloadProfile;

#[derive(Debug, Clone, Deserialize)]
pub struct WireRequest {
    pub op: String,
    pub id: u64,
    pub prompt_tokens: u32,
    pub max_new_tokens: u32,
    #[serde(default)]
    pub prefix_group: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: u64,
    pub latency_s: f64,
    pub tpot_s: f64,
    pub throughput_tps: f64,
    pub worker: u32,
    pub depth_trace: Vec<u32>,
}

#[derive(Debug, Clone, Serialize)]
struct WireError<'a> {
    id: Option<u64>,
    error: &'a str,
}

impl WireResponse {
    fn from_completion(c: &Completion) -> Self {
        Self {
            id: c.record.request_id,
            latency_s: c.record.latency_s,
            tpot_s: c.record.tpot_s,
            throughput_tps: c.record.throughput_tps,
            worker: c.record.worker_id,
            depth_trace: c.depth_trace.clone(),
        }
    }
}

fn parse_request(line: &str) -> Result<WireRequest, String> {
    let req: WireRequest = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if req.op != "generate" {
        return Err(format!("unsupported op `{}`", req.op));
    }
    Ok(req)
}

fn envelope(req: &WireRequest, submit_time_ms: u64, profile: &str) -> RequestEnvelope {
    RequestEnvelope {
        request_id: req.id,
        prompt_len: req.prompt_tokens,
        max_new_tokens: req.max_new_tokens,
        prefix_group: req.prefix_group,
        submit_time_ms,
        profile_name: Some(profile.to_string()),
    }
}

/// Gateway options shared by all transports.
#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub engine: EngineConfig,
    pub cost: CostModel,
    pub profiles: Vec<WorkloadProfile>,
    pub default_profile: String,
}

/// Zero-jitter gateway: admit every request line at the current virtual
/// time in input order, then drain and answer in completion order.
pub fn serve_immediate<R: BufRead, W: Write>(
    opts: &ServeOptions,
    input: R,
    mut output: W,
) -> Result<()> {
    let mut sched = Scheduler::new(
        opts.engine.clone(),
        opts.cost,
        &opts.profiles,
        &opts.default_profile,
    )?;
    let mut admitted = Vec::new();
    for line in input.lines() {
        let line = line.context("reading request line")?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_request(&line) {
            Ok(req) => {
                let env = envelope(&req, sched.now_ms(), &opts.default_profile);
                match sched.admit(env) {
                    Ok(_) => admitted.push(req.id),
                    Err(e) => writeln!(
                        output,
                        "{}",
                        serde_json::to_string(&WireError {
                            id: Some(req.id),
                            error: &e.to_string()
                        })?
                    )?,
                }
            }
            Err(msg) => writeln!(
                output,
                "{}",
                serde_json::to_string(&WireError {
                    id: None,
                    error: &msg
                })?
            )?,
        }
    }
    sched.shutdown();
    let mut done: Vec<Completion> = Vec::new();
    for id in admitted {
        done.push(sched.collect(id)?);
    }
    done.sort_by_key(|c| (c.record.t_end_ms, c.record.request_id));
    for c in &done {
        writeln!(output, "{}", serde_json::to_string(&WireResponse::from_completion(c))?)?;
    }
    output.flush()?;
    Ok(())
}

enum Incoming {
    Line(u64, String),
    Eof,
}

/// Wall-clock gateway core: requests arrive on a channel tagged with a
/// connection id, responses go out through `respond`.
fn serve_paced(
    opts: &ServeOptions,
    rx: mpsc::Receiver<Incoming>,
    mut respond: impl FnMut(u64, String) -> Result<()>,
) -> Result<()> {
    let mut sched = Scheduler::new(
        opts.engine.clone(),
        opts.cost,
        &opts.profiles,
        &opts.default_profile,
    )?;
    let start = Instant::now();
    let mut owner: std::collections::HashMap<u64, u64> = std::collections::HashMap::new();
    let mut open = true;
    while open || !owner.is_empty() {
        let now_ms = start.elapsed().as_millis() as u64;
        sched.advance_to_ms(now_ms);
        for id in sched.poll_ready() {
            if let Some(conn) = owner.remove(&id) {
                let c = sched.collect(id)?;
                respond(conn, serde_json::to_string(&WireResponse::from_completion(&c))?)?;
            }
        }
        if !open {
            // no new input; push virtual time forward to finish the rest
            if !owner.is_empty() {
                std::thread::sleep(Duration::from_millis(1));
            }
            continue;
        }
        match rx.recv_timeout(Duration::from_millis(1)) {
            Ok(Incoming::Line(conn, line)) => {
                if line.trim().is_empty() {
                    continue;
                }
                match parse_request(&line) {
                    Ok(req) => {
                        let submit = start.elapsed().as_millis() as u64;
                        match sched.admit(envelope(&req, submit, &opts.default_profile)) {
                            Ok(_) => {
                                owner.insert(req.id, conn);
                            }
                            Err(e) => respond(
                                conn,
                                serde_json::to_string(&WireError {
                                    id: Some(req.id),
                                    error: &e.to_string(),
                                })?,
                            )?,
                        }
                    }
                    Err(msg) => respond(
                        conn,
                        serde_json::to_string(&WireError {
                            id: None,
                            error: &msg,
                        })?,
                    )?,
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Ok(Incoming::Eof) | Err(mpsc::RecvTimeoutError::Disconnected) => open = false,
        }
    }
    sched.shutdown();
    Ok(())
}

/// Serve the protocol over stdin/stdout, paced by the wall clock.
pub fn serve_stdio(opts: &ServeOptions) -> Result<()> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let stdin = std::io::stdin();
        for line in stdin.lock().lines() {
            match line {
                Ok(l) => {
                    if tx.send(Incoming::Line(0, l)).is_err() {
                        return;
                    }
                }
                Err(_) => break,
            }
        }
        let _ = tx.send(Incoming::Eof);
    });
    let stdout = std::io::stdout();
    serve_paced(opts, rx, move |_conn, line| {
        let mut out = stdout.lock();
        writeln!(out, "{line}")?;
        out.flush()?;
        Ok(())
    })
}

/// Serve the protocol over TCP; one line-oriented connection per client.
pub fn serve_tcp(opts: &ServeOptions, addr: &str) -> Result<()> {
    let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    eprintln!("streamsim: listening on {}", listener.local_addr()?);
    let (tx, rx) = mpsc::channel::<Incoming>();
    let writers: std::sync::Arc<std::sync::Mutex<std::collections::HashMap<u64, TcpStream>>> =
        Default::default();
    {
        let writers = writers.clone();
        std::thread::spawn(move || {
            let mut next_conn = 1u64;
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let conn = next_conn;
                next_conn += 1;
                if let Ok(w) = stream.try_clone() {
                    writers.lock().unwrap().insert(conn, w);
                }
                let tx = tx.clone();
                std::thread::spawn(move || {
                    let reader = std::io::BufReader::new(stream);
                    for line in reader.lines() {
                        match line {
                            Ok(l) => {
                                if tx.send(Incoming::Line(conn, l)).is_err() {
                                    return;
                                }
                            }
                            Err(_) => break,
                        }
                    }
                });
            }
        });
    }
    serve_paced(opts, rx, move |conn, line| {
        if let Some(stream) = writers.lock().unwrap().get_mut(&conn) {
            writeln!(stream, "{line}")?;
        }
        Ok(())
    })
}
