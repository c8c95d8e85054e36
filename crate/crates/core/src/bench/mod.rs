//! Closed-loop workload runs, parameter sweeps and CSV output.
//!
//! Every client performs `ops_per_client` acquire/release pairs back to back
//! on uniformly random items; each request is SHARED with probability
//! `shared_fraction`. A client's request stream depends only on the seed and
//! the client's index, so two runs with the same spec issue identical
//! requests even though their timing differs.
//!
//! Throughput counts granted acquisitions per second of wall time. A run is
//! reported only after its trace passes the checker.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checker::{self, trace_channel, TraceEvent, TraceOp, Outcome, TraceSink, Violation};
use crate::client_lm::{ClientSession, SessionConfig};
use crate::locktable::{LockTable, MAX_CLIENTS};
use crate::server_lm::{Frontend, ServerConfig, SrLockClient, SrLockServer, TcpLockClient, TcpLockServer};
use crate::verbs::Node;
use crate::{Design, LockClient, LockMode};

mod worker;

pub use worker::{run_worker, WorkerArgs};

pub const CSV_HEADER: &str =
    "design,transport,n_clients,n_items,contention_rate,shared_fraction,total_locks,elapsed_s,throughput_lps,seed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransportKind {
    /// Clients are threads of this process.
    InProc,
    /// Clients are separate processes talking over loopback TCP.
    Tcp,
}

impl TransportKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransportKind::InProc => "inproc",
            TransportKind::Tcp => "tcp",
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inproc" => Ok(TransportKind::InProc),
            "tcp" => Ok(TransportKind::Tcp),
            other => Err(format!("unknown transport `{other}`")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("client {client}: {msg}")]
    Client { client: u32, msg: String },
    #[error("worker process failed: {0}")]
    Worker(String),
    #[error("trace failed the checker with {} violation(s); first: {}", .0.len(), .0[0])]
    UnsafeTrace(Vec<Violation>),
    #[error("metrics mismatch: {0}")]
    Metrics(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub design: Design,
    pub transport: TransportKind,
    pub n_clients: u32,
    pub n_items: u32,
    pub ops_per_client: u64,
    pub shared_fraction: f64,
    pub rng_seed: u64,
    pub backoff: Duration,
    pub max_retries: Option<u64>,
    /// Simulated server CPU per message, TCP frontend.
    pub per_message_cost: Duration,
    /// Simulated server CPU per message, SEND/RECV frontend (default a tenth
    /// of `per_message_cost`).
    pub sr_message_cost: Option<Duration>,
    pub worker_limit: usize,
    /// One-way latency injected into every verb.
    pub latency: Duration,
    /// Executable that understands the `worker` subcommand; defaults to the
    /// current executable. Only used by the TCP transport.
    pub worker_exe: Option<PathBuf>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            design: Design::ClientCentric,
            transport: TransportKind::InProc,
            n_clients: 8,
            n_items: 100,
            ops_per_client: 1000,
            shared_fraction: 0.5,
            rng_seed: 1,
            backoff: Duration::ZERO,
            max_retries: None,
            per_message_cost: Duration::ZERO,
            sr_message_cost: None,
            worker_limit: 4,
            latency: Duration::ZERO,
            worker_exe: None,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidSpec(m.to_string()));
        if self.n_clients == 0 {
            return bad("n_clients must be at least 1");
        }
        if self.n_clients > MAX_CLIENTS {
            return bad("n_clients exceeds the supported client limit");
        }
        if self.n_items == 0 {
            return bad("n_items must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return bad("shared_fraction must lie in [0, 1]");
        }
        if self.worker_limit == 0 {
            return bad("worker_limit must be at least 1");
        }
        Ok(())
    }

    pub fn server_config(&self) -> ServerConfig {
        ServerConfig {
            n_items: self.n_items,
            frontend: if self.design == Design::ServerTcp {
                Frontend::Tcp
            } else {
                Frontend::SendRecv
            },
            per_message_cost: self.per_message_cost,
            sr_message_cost: self.sr_message_cost,
            worker_limit: self.worker_limit,
        }
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            backoff: self.backoff,
            max_retries: self.max_retries,
        }
    }

    pub fn contention_rate(&self) -> f64 {
        1.0 - self.n_items as f64 / self.n_clients as f64
    }
}

/// `1 - n_items / n_clients`. Negative when items outnumber clients.
pub fn contention_rate(n_items: u32, n_clients: u32) -> Result<f64, BenchError> {
    if n_clients == 0 {
        return Err(BenchError::InvalidSpec("contention rate needs at least one client".into()));
    }
    Ok(1.0 - n_items as f64 / n_clients as f64)
}

/// The (item, mode) sequence client `index` issues.
pub fn request_stream(seed: u64, index: u32, n_items: u32, shared_fraction: f64, ops: u64) -> Vec<(u32, LockMode)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    (0..ops)
        .map(|_| {
            let item = rng.gen_range(0..n_items);
            let mode = if rng.gen_bool(shared_fraction) {
                LockMode::Shared
            } else {
                LockMode::Exclusive
            };
            (item, mode)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LatencyStats {
    pub count: u64,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub max_us: f64,
}

impl LatencyStats {
    pub fn from_nanos(samples: &mut [u64]) -> LatencyStats {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        samples.sort_unstable();
        let n = samples.len();
        let pct = |p: f64| samples[((n as f64 * p).ceil() as usize).clamp(1, n) - 1] as f64 / 1e3;
        LatencyStats {
            count: n as u64,
            mean_us: samples.iter().map(|&s| s as f64).sum::<f64>() / n as f64 / 1e3,
            p50_us: pct(0.50),
            p99_us: pct(0.99),
            max_us: samples[n - 1] as f64 / 1e3,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ClientStats {
    pub client_id: u32,
    pub granted: u64,
    pub timeouts: u64,
    pub latency: LatencyStats,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub total_locks_granted: u64,
    pub timeouts: u64,
    pub elapsed: Duration,
    pub throughput: f64,
    pub per_client: Vec<ClientStats>,
    pub contention_rate: f64,
    /// Client-centric only: lock words not back at zero after the run.
    pub dirty_words: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: RunResult,
    pub trace: Vec<TraceEvent>,
}

/// Drives one client through its stream. When `sink` is given, the client
/// records its own trace events (client-centric design); server designs
/// record on the server.
pub fn run_client<C: LockClient>(
    client: &mut C,
    stream: &[(u32, LockMode)],
    sink: Option<&TraceSink>,
) -> Result<ClientStats, BenchError> {
    let id = client.client_id();
    let err = |e: C::Error| BenchError::Client { client: id, msg: e.to_string() };
    let record = |item, op, mode, outcome| {
        if let Some(s) = sink {
            s.record(id, item, op, mode, outcome);
        }
    };
    let mut latencies = Vec::with_capacity(stream.len());
    let mut stats = ClientStats {
        client_id: id,
        ..Default::default()
    };
    for &(item, mode) in stream {
        record(item, TraceOp::Acquire, mode, Outcome::Req);
        let t0 = Instant::now();
        match client.lock(item, mode) {
            Ok(()) => {}
            Err(e) if C::is_timeout(&e) => {
                record(item, TraceOp::Acquire, mode, Outcome::Timeout);
                if mode == LockMode::Shared {
                    // the session already undid its count increment
                    record(item, TraceOp::Release, mode, Outcome::Ack);
                }
                stats.timeouts += 1;
                continue;
            }
            Err(e) => return Err(err(e)),
        }
        latencies.push(t0.elapsed().as_nanos() as u64);
        record(item, TraceOp::Acquire, mode, Outcome::Grant);
        stats.granted += 1;
        record(item, TraceOp::Release, mode, Outcome::Req);
        client.unlock(item, mode).map_err(err)?;
        record(item, TraceOp::Release, mode, Outcome::Ack);
    }
    stats.latency = LatencyStats::from_nanos(&mut latencies);
    Ok(stats)
}

fn drive_threads<C: LockClient + 'static>(
    clients: Vec<C>,
    spec: &WorkloadSpec,
    sink: Option<TraceSink>,
) -> Result<(Vec<ClientStats>, Duration), BenchError> {
    let barrier = Arc::new(Barrier::new(clients.len() + 1));
    let handles: Vec<_> = clients
        .into_iter()
        .enumerate()
        .map(|(k, mut c)| {
            let stream = request_stream(spec.rng_seed, k as u32, spec.n_items, spec.shared_fraction, spec.ops_per_client);
            let barrier = Arc::clone(&barrier);
            let sink = sink.clone();
            thread::spawn(move || {
                barrier.wait();
                let t0 = Instant::now();
                let r = run_client(&mut c, &stream, sink.as_ref());
                r.map(|s| (s, t0, Instant::now()))
            })
        })
        .collect();
    barrier.wait();
    // on few cores the clients may finish before this thread runs again, so
    // the clients time themselves
    let mut start: Option<Instant> = None;
    let mut end: Option<Instant> = None;
    let mut stats = Vec::with_capacity(handles.len());
    let mut first_err = None;
    for h in handles {
        match h.join() {
            Ok(Ok((s, t0, t1))) => {
                start = Some(start.map_or(t0, |v| v.min(t0)));
                end = Some(end.map_or(t1, |v| v.max(t1)));
                stats.push(s);
            }
            Ok(Err(e)) => {
                first_err.get_or_insert(e);
            }
            Err(_) => {
                first_err.get_or_insert(BenchError::Worker("client thread panicked".into()));
            }
        }
    }
    let elapsed = match (start, end) {
        (Some(a), Some(b)) => b - a,
        _ => Duration::ZERO,
    };
    match first_err {
        Some(e) => Err(e),
        None => Ok((stats, elapsed)),
    }
}

fn run_inproc(spec: &WorkloadSpec) -> Result<(Vec<ClientStats>, Duration, Vec<TraceEvent>, usize), BenchError> {
    let (sink, collector) = trace_channel();
    let n = spec.n_clients;
    match spec.design {
        Design::ClientCentric => {
            let node = Node::new();
            let table = LockTable::create(&node, spec.n_items).map_err(|e| BenchError::InvalidSpec(e.to_string()))?;
            let clients = (0..n)
                .map(|_| {
                    let qp = node.connect_local(spec.latency).map_err(|e| BenchError::InvalidSpec(e.to_string()))?;
                    ClientSession::from_connection(qp, spec.n_items, spec.session_config())
                        .map_err(|e| BenchError::InvalidSpec(e.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let (stats, elapsed) = drive_threads(clients, spec, Some(sink))?;
            let dirty = table.words().iter().filter(|w| !w.is_unlocked()).count();
            Ok((stats, elapsed, collector.drain(), dirty))
        }
        Design::ServerSr => {
            let node = Node::new();
            let server = SrLockServer::start(spec.server_config(), Arc::clone(&node), Some(sink))?;
            let clients = (0..n)
                .map(|_| {
                    node.connect_local(spec.latency)
                        .map(SrLockClient::new)
                        .map_err(|e| BenchError::InvalidSpec(e.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let out = drive_threads(clients, spec, None);
            drop(server);
            let (stats, elapsed) = out?;
            Ok((stats, elapsed, collector.drain(), 0))
        }
        Design::ServerTcp => {
            let server = TcpLockServer::start(spec.server_config(), "127.0.0.1:0", Some(sink))?;
            let clients = (0..n)
                .map(|_| TcpLockClient::connect(server.local_addr()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| BenchError::Worker(e.to_string()))?;
            let out = drive_threads(clients, spec, None);
            drop(server);
            let (stats, elapsed) = out?;
            Ok((stats, elapsed, collector.drain(), 0))
        }
    }
}

/// Runs one workload and validates its trace.
pub fn run_workload(spec: &WorkloadSpec) -> Result<RunOutput, BenchError> {
    spec.validate()?;
    let (per_client, elapsed, trace, dirty_words) = match spec.transport {
        TransportKind::InProc => run_inproc(spec)?,
        TransportKind::Tcp => worker::run_multiprocess(spec)?,
    };

    let violations = checker::check_all(&trace, Some(spec.design));
    if !violations.is_empty() {
        return Err(BenchError::UnsafeTrace(violations));
    }
    let total: u64 = per_client.iter().map(|c| c.granted).sum();
    let grants = trace.iter().filter(|e| e.is(TraceOp::Acquire, Outcome::Grant)).count() as u64;
    if grants != total {
        return Err(BenchError::Metrics(format!(
            "clients report {total} grants, trace holds {grants}"
        )));
    }
    let secs = elapsed.as_secs_f64();
    let result = RunResult {
        total_locks_granted: total,
        timeouts: per_client.iter().map(|c| c.timeouts).sum(),
        elapsed,
        throughput: if secs > 0.0 { total as f64 / secs } else { 0.0 },
        per_client,
        contention_rate: spec.contention_rate(),
        dirty_words,
    };
    Ok(RunOutput { result, trace })
}

/// One sweep point. Failed runs keep their parameters and the error text.
#[derive(Debug)]
pub struct SweepRow {
    pub spec: WorkloadSpec,
    pub outcome: Result<RunOutput, String>,
}

impl SweepRow {
    pub fn throughput(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|o| o.result.throughput)
    }

    pub fn to_csv(&self) -> String {
        let s = &self.spec;
        let (total, elapsed, tput) = match &self.outcome {
            Ok(o) => (
                o.result.total_locks_granted.to_string(),
                format!("{:.6}", o.result.elapsed.as_secs_f64()),
                format!("{:.1}", o.result.throughput),
            ),
            Err(_) => ("0".to_string(), "failed".to_string(), "failed".to_string()),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            s.design,
            s.transport,
            s.n_clients,
            s.n_items,
            s.contention_rate(),
            s.shared_fraction,
            total,
            elapsed,
            tput,
            s.rng_seed
        )
    }
}

fn sweep(base: &WorkloadSpec, points: &[u32], set: impl Fn(&mut WorkloadSpec, u32)) -> Result<Vec<SweepRow>, BenchError> {
    if points.is_empty() {
        return Err(BenchError::InvalidSpec("sweep needs at least one point".into()));
    }
    Ok(points
        .iter()
        .map(|&p| {
            let mut spec = base.clone();
            set(&mut spec, p);
            let outcome = run_workload(&spec).map_err(|e| e.to_string());
            SweepRow { spec, outcome }
        })
        .collect())
}

/// Throughput versus number of clients, item count held fixed.
pub fn sweep_clients(base: &WorkloadSpec, client_counts: &[u32]) -> Result<Vec<SweepRow>, BenchError> {
    sweep(base, client_counts, |s, n| s.n_clients = n)
}

/// Throughput versus contention rate, client count held fixed.
pub fn sweep_contention(base: &WorkloadSpec, item_counts: &[u32]) -> Result<Vec<SweepRow>, BenchError> {
    sweep(base, item_counts, |s, n| s.n_items = n)
}

pub fn write_csv<W: std::io::Write>(mut w: W, rows: &[SweepRow], header: bool) -> std::io::Result<()> {
    if header {
        writeln!(w, "{CSV_HEADER}")?;
    }
    for r in rows {
        writeln!(w, "{}", r.to_csv())?;
    }
    w.flush()
}
