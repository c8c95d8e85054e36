//! Multi-process runs: each client is a child process running the hidden
//! `worker` subcommand and talking to this process over loopback TCP.
//!
//! Line protocol on the child's stdio:
//!
//! ```text
//! child  -> READY <client_id>
//! parent -> GO
//! child  -> T <trace event>        (client-centric only, zero or more)
//! child  -> DONE <granted> <timeouts> <finish_ns> <count> <mean_us> <p50_us> <p99_us> <max_us>
//! ```
//!
//! Timestamps come from the host-wide monotonic clock, so events recorded in
//! different processes can be merged into one trace.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

use crate::checker::{now_ns, sort_events, trace_channel, TraceEvent};
use crate::client_lm::{ClientSession, SessionConfig};
use crate::locktable::LockTable;
use crate::server_lm::{SrLockClient, SrLockServer, TcpLockClient, TcpLockServer};
use crate::verbs::{Node, QueuePair, TcpAgent};
use crate::{Design, LockClient};

use super::{request_stream, run_client, BenchError, ClientStats, LatencyStats, WorkloadSpec};

/// Parameters of one worker process.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerArgs {
    pub design: Design,
    pub connect: String,
    pub index: u32,
    pub n_items: u32,
    pub ops: u64,
    pub shared_fraction: f64,
    pub seed: u64,
    pub backoff: Duration,
    pub max_retries: Option<u64>,
    pub latency: Duration,
}

impl WorkerArgs {
    /// Command-line arguments following the `worker` subcommand name.
    pub fn to_args(&self) -> Vec<String> {
        let mut v = vec![
            "--design".into(),
            self.design.to_string(),
            "--connect".into(),
            self.connect.clone(),
            "--index".into(),
            self.index.to_string(),
            "--items".into(),
            self.n_items.to_string(),
            "--ops".into(),
            self.ops.to_string(),
            "--shared-fraction".into(),
            self.shared_fraction.to_string(),
            "--seed".into(),
            self.seed.to_string(),
            "--backoff-ns".into(),
            self.backoff.as_nanos().to_string(),
            "--latency-ns".into(),
            self.latency.as_nanos().to_string(),
        ];
        if let Some(r) = self.max_retries {
            v.push("--max-retries".into());
            v.push(r.to_string());
        }
        v
    }
}

fn client_err(index: u32, e: impl std::fmt::Display) -> BenchError {
    BenchError::Client {
        client: index,
        msg: e.to_string(),
    }
}

fn serve_client<C: LockClient>(
    mut client: C,
    args: &WorkerArgs,
    record: bool,
    input: &mut impl BufRead,
    out: &mut impl Write,
) -> Result<(), BenchError> {
    let stream = request_stream(args.seed, args.index, args.n_items, args.shared_fraction, args.ops);
    writeln!(out, "READY {}", client.client_id())?;
    out.flush()?;
    let mut line = String::new();
    input.read_line(&mut line)?;
    if line.trim() != "GO" {
        return Err(BenchError::Worker(format!("expected GO, got {:?}", line.trim())));
    }
    let (sink, collector) = trace_channel();
    let stats = run_client(&mut client, &stream, record.then_some(&sink))?;
    let finish = now_ns();
    drop(sink);
    for ev in collector.drain() {
        writeln!(out, "T {ev}")?;
    }
    let l = stats.latency;
    writeln!(
        out,
        "DONE {} {} {} {} {} {} {} {}",
        stats.granted, stats.timeouts, finish, l.count, l.mean_us, l.p50_us, l.p99_us, l.max_us
    )?;
    out.flush()?;
    Ok(())
}

/// Body of the `worker` subcommand.
pub fn run_worker(args: &WorkerArgs, input: &mut impl BufRead, out: &mut impl Write) -> Result<(), BenchError> {
    let i = args.index;
    match args.design {
        Design::ClientCentric => {
            let qp = QueuePair::connect_tcp(args.connect.as_str(), args.latency).map_err(|e| client_err(i, e))?;
            let cfg = SessionConfig {
                backoff: args.backoff,
                max_retries: args.max_retries,
            };
            let session = ClientSession::from_connection(qp, args.n_items, cfg).map_err(|e| client_err(i, e))?;
            serve_client(session, args, true, input, out)
        }
        Design::ServerSr => {
            let qp = QueuePair::connect_tcp(args.connect.as_str(), args.latency).map_err(|e| client_err(i, e))?;
            serve_client(SrLockClient::new(qp), args, false, input, out)
        }
        Design::ServerTcp => {
            let client = TcpLockClient::connect(args.connect.as_str()).map_err(|e| client_err(i, e))?;
            serve_client(client, args, false, input, out)
        }
    }
}

struct WorkerProc {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl WorkerProc {
    fn next_line(&mut self) -> Result<String, BenchError> {
        let mut line = String::new();
        if self.stdout.read_line(&mut line)? == 0 {
            let status = self.child.wait()?;
            return Err(BenchError::Worker(format!("worker exited early ({status})")));
        }
        Ok(line.trim_end().to_string())
    }
}

/// Kills any worker still running when a run bails out.
struct Workers(Vec<WorkerProc>);

impl Drop for Workers {
    fn drop(&mut self) {
        for w in &mut self.0 {
            if !matches!(w.child.try_wait(), Ok(Some(_))) {
                let _ = w.child.kill();
                let _ = w.child.wait();
            }
        }
    }
}

fn parse_done(fields: &[&str], client_id: u32) -> Option<(ClientStats, u64)> {
    if fields.len() != 8 {
        return None;
    }
    let u = |k: usize| fields[k].parse::<u64>().ok();
    let f = |k: usize| fields[k].parse::<f64>().ok();
    Some((
        ClientStats {
            client_id,
            granted: u(0)?,
            timeouts: u(1)?,
            latency: LatencyStats {
                count: u(3)?,
                mean_us: f(4)?,
                p50_us: f(5)?,
                p99_us: f(6)?,
                max_us: f(7)?,
            },
        },
        u(2)?,
    ))
}

fn worker_exe(spec: &WorkloadSpec) -> Result<PathBuf, BenchError> {
    match &spec.worker_exe {
        Some(p) => Ok(p.clone()),
        None => Ok(std::env::current_exe()?),
    }
}

enum Host {
    Table(LockTable, TcpAgent),
    Sr(SrLockServer, TcpAgent),
    Tcp(TcpLockServer),
}

pub(super) fn run_multiprocess(
    spec: &WorkloadSpec,
) -> Result<(Vec<ClientStats>, Duration, Vec<TraceEvent>, usize), BenchError> {
    let exe = worker_exe(spec)?;
    let (sink, collector) = trace_channel();
    let host = match spec.design {
        Design::ClientCentric => {
            let node = Node::new();
            let table = LockTable::create(&node, spec.n_items).map_err(|e| BenchError::InvalidSpec(e.to_string()))?;
            let agent = TcpAgent::start(node, "127.0.0.1:0")?;
            drop(sink);
            Host::Table(table, agent)
        }
        Design::ServerSr => {
            let node = Node::new();
            let server = SrLockServer::start(spec.server_config(), Arc::clone(&node), Some(sink))?;
            Host::Sr(server, TcpAgent::start(node, "127.0.0.1:0")?)
        }
        Design::ServerTcp => Host::Tcp(TcpLockServer::start(spec.server_config(), "127.0.0.1:0", Some(sink))?),
    };
    let addr = match &host {
        Host::Table(_, a) | Host::Sr(_, a) => a.local_addr(),
        Host::Tcp(s) => s.local_addr(),
    };

    let mut workers = Workers(Vec::new());
    let mut ids = Vec::new();
    for index in 0..spec.n_clients {
        let args = WorkerArgs {
            design: spec.design,
            connect: addr.to_string(),
            index,
            n_items: spec.n_items,
            ops: spec.ops_per_client,
            shared_fraction: spec.shared_fraction,
            seed: spec.rng_seed,
            backoff: spec.backoff,
            max_retries: spec.max_retries,
            latency: spec.latency,
        };
        let mut child = Command::new(&exe)
            .arg("worker")
            .args(args.to_args())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BenchError::Worker(format!("cannot spawn {}: {e}", exe.display())))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        workers.0.push(WorkerProc { child, stdin, stdout });
    }
    // connect everyone before starting the clock
    for w in &mut workers.0 {
        let line = w.next_line()?;
        let id = line
            .strip_prefix("READY ")
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or_else(|| BenchError::Worker(format!("bad handshake line {line:?}")))?;
        ids.push(id);
    }
    let start = now_ns();
    for w in &mut workers.0 {
        writeln!(w.stdin, "GO")?;
        w.stdin.flush()?;
    }

    let mut stats = Vec::with_capacity(ids.len());
    let mut events = Vec::new();
    let mut finish = start;
    for (w, &id) in workers.0.iter_mut().zip(&ids) {
        loop {
            let line = w.next_line()?;
            if let Some(ev) = line.strip_prefix("T ") {
                events.push(
                    ev.parse::<TraceEvent>()
                        .map_err(|e| BenchError::Worker(format!("bad trace line from client {id}: {e}")))?,
                );
            } else if let Some(rest) = line.strip_prefix("DONE ") {
                let fields: Vec<&str> = rest.split(' ').collect();
                let (s, fin) = parse_done(&fields, id)
                    .ok_or_else(|| BenchError::Worker(format!("bad summary line {line:?}")))?;
                finish = finish.max(fin);
                stats.push(s);
                break;
            } else {
                return Err(BenchError::Worker(format!("unexpected line {line:?}")));
            }
        }
        let status = w.child.wait()?;
        if !status.success() {
            return Err(BenchError::Worker(format!("client {id} exited with {status}")));
        }
    }
    let elapsed = Duration::from_nanos(finish - start);

    let dirty = match host {
        Host::Table(table, mut agent) => {
            agent.shutdown();
            table.words().iter().filter(|w| !w.is_unlocked()).count()
        }
        Host::Sr(mut server, mut agent) => {
            agent.shutdown();
            server.shutdown();
            0
        }
        Host::Tcp(mut server) => {
            server.shutdown();
            0
        }
    };
    events.extend(collector.drain());
    sort_events(&mut events);
    Ok((stats, elapsed, events, dirty))
}
