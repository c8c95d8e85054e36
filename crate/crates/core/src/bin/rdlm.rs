use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use rdlm::bench::{self, run_worker, TransportKind, WorkerArgs, WorkloadSpec};
use rdlm::checker::{check_all, read_trace, sort_events, trace_channel, write_trace, TraceEvent};
use rdlm::locktable::LockTable;
use rdlm::server_lm::{SrLockServer, TcpLockServer};
use rdlm::verbs::{Node, TcpAgent};
use rdlm::Design;

#[derive(Parser)]
#[command(name = "rdlm", version, about = "Lock managers over emulated RDMA verbs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Host a lock table (client-centric) or run a lock server until stdin closes.
    Server(ServerArgs),
    /// Run a workload or a sweep and report throughput.
    Bench(BenchArgs),
    /// Validate a trace file; exits non-zero when violations are found.
    Check(CheckArgs),
    #[command(hide = true)]
    Worker(WorkerCli),
}

#[derive(Args)]
struct ServerArgs {
    #[arg(long, default_value = "client-centric")]
    design: Design,
    #[arg(long, default_value_t = 100)]
    items: u32,
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    #[arg(long, default_value_t = 0)]
    per_message_cost_us: u64,
    #[arg(long)]
    sr_message_cost_us: Option<u64>,
    #[arg(long, default_value_t = 4)]
    worker_limit: usize,
    /// Write the server-side trace here on exit (server designs).
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "client-centric")]
    design: Design,
    #[arg(long, default_value = "inproc")]
    transport: TransportKind,
    #[arg(long, default_value_t = 8)]
    clients: u32,
    #[arg(long, default_value_t = 100)]
    items: u32,
    #[arg(long, default_value_t = 1000)]
    ops: u64,
    #[arg(long, default_value_t = 0.5)]
    shared_fraction: f64,
    #[arg(long, default_value_t = 0)]
    backoff_us: u64,
    /// Retries after the first attempt; unlimited when omitted.
    #[arg(long)]
    max_retries: Option<u64>,
    #[arg(long, default_value_t = 0)]
    per_message_cost_us: u64,
    /// Defaults to a tenth of --per-message-cost-us.
    #[arg(long)]
    sr_message_cost_us: Option<u64>,
    #[arg(long, default_value_t = 4)]
    worker_limit: usize,
    /// One-way latency added to every verb.
    #[arg(long, default_value_t = 0)]
    latency_us: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Comma-separated client counts to sweep.
    #[arg(long, value_delimiter = ',', conflicts_with = "sweep_items")]
    sweep_clients: Option<Vec<u32>>,
    /// Comma-separated item counts to sweep.
    #[arg(long, value_delimiter = ',')]
    sweep_items: Option<Vec<u32>>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the merged trace of a single run here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    path: PathBuf,
    /// Enables the FIFO check for server designs.
    #[arg(long)]
    design: Option<Design>,
}

#[derive(Args)]
struct WorkerCli {
    #[arg(long)]
    design: Design,
    #[arg(long)]
    connect: String,
    #[arg(long)]
    index: u32,
    #[arg(long)]
    items: u32,
    #[arg(long)]
    ops: u64,
    #[arg(long)]
    shared_fraction: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    backoff_ns: u64,
    #[arg(long)]
    max_retries: Option<u64>,
    #[arg(long, default_value_t = 0)]
    latency_ns: u64,
}

fn us(v: u64) -> Duration {
    Duration::from_micros(v)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Server(a) => server(a),
        Cmd::Bench(a) => bench_cmd(a),
        Cmd::Check(a) => check(a),
        Cmd::Worker(a) => {
            let args = WorkerArgs {
                design: a.design,
                connect: a.connect,
                index: a.index,
                n_items: a.items,
                ops: a.ops,
                shared_fraction: a.shared_fraction,
                seed: a.seed,
                backoff: Duration::from_nanos(a.backoff_ns),
                max_retries: a.max_retries,
                latency: Duration::from_nanos(a.latency_ns),
            };
            let stdin = io::stdin();
            let mut out = BufWriter::new(io::stdout().lock());
            run_worker(&args, &mut stdin.lock(), &mut out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn wait_for_stdin_eof() {
    let mut sink = Vec::new();
    let _ = io::stdin().read_to_end(&mut sink);
}

fn server(a: ServerArgs) -> Result<ExitCode> {
    let spec = WorkloadSpec {
        design: a.design,
        n_items: a.items,
        per_message_cost: us(a.per_message_cost_us),
        sr_message_cost: a.sr_message_cost_us.map(us),
        worker_limit: a.worker_limit,
        ..WorkloadSpec::default()
    };
    spec.validate()?;
    let (sink, collector) = trace_channel();
    match a.design {
        Design::ClientCentric => {
            let node = Node::new();
            let table = LockTable::create(&node, a.items)?;
            let agent = TcpAgent::start(node, a.listen.as_str())?;
            println!("lock table with {} items at {}", table.item_count(), agent.local_addr());
            io::stdout().flush()?;
            wait_for_stdin_eof();
            let held = table.words().iter().filter(|w| !w.is_unlocked()).count();
            println!("{held} lock word(s) still set");
        }
        Design::ServerSr => {
            let node = Node::new();
            let _server = SrLockServer::start(spec.server_config(), Arc::clone(&node), Some(sink))?;
            let agent = TcpAgent::start(node, a.listen.as_str())?;
            println!("SEND/RECV lock server at {}", agent.local_addr());
            io::stdout().flush()?;
            wait_for_stdin_eof();
        }
        Design::ServerTcp => {
            let server = TcpLockServer::start(spec.server_config(), a.listen.as_str(), Some(sink))?;
            println!("TCP lock server at {}", server.local_addr());
            io::stdout().flush()?;
            wait_for_stdin_eof();
        }
    }
    if let Some(path) = a.trace {
        let events = collector.drain();
        write_trace(BufWriter::new(File::create(&path)?), &events)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn bench_cmd(a: BenchArgs) -> Result<ExitCode> {
    let spec = WorkloadSpec {
        design: a.design,
        transport: a.transport,
        n_clients: a.clients,
        n_items: a.items,
        ops_per_client: a.ops,
        shared_fraction: a.shared_fraction,
        rng_seed: a.seed,
        backoff: us(a.backoff_us),
        max_retries: a.max_retries,
        per_message_cost: us(a.per_message_cost_us),
        sr_message_cost: a.sr_message_cost_us.map(us),
        worker_limit: a.worker_limit,
        latency: us(a.latency_us),
        worker_exe: None,
    };
    let rows = match (&a.sweep_clients, &a.sweep_items) {
        (Some(counts), _) => bench::sweep_clients(&spec, counts)?,
        (None, Some(items)) => bench::sweep_contention(&spec, items)?,
        (None, None) => {
            let out = bench::run_workload(&spec)?;
            let r = &out.result;
            eprintln!(
                "{} {}: {} clients, {} items, {} locks in {:.3} s = {:.0} locks/s ({} timeouts)",
                spec.design,
                spec.transport,
                spec.n_clients,
                spec.n_items,
                r.total_locks_granted,
                r.elapsed.as_secs_f64(),
                r.throughput,
                r.timeouts
            );
            if let Some(path) = &a.trace {
                write_trace(BufWriter::new(File::create(path)?), &out.trace)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            vec![bench::SweepRow { spec, outcome: Ok(out) }]
        }
    };
    if a.trace.is_some() && rows.len() > 1 {
        eprintln!("--trace is ignored for sweeps");
    }
    match &a.csv {
        Some(path) => bench::write_csv(BufWriter::new(File::create(path)?), &rows, true)?,
        None => bench::write_csv(io::stdout().lock(), &rows, true)?,
    }
    let failed: Vec<_> = rows.iter().filter_map(|r| r.outcome.as_ref().err()).collect();
    for f in &failed {
        eprintln!("run failed: {f}");
    }
    Ok(if failed.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn check(a: CheckArgs) -> Result<ExitCode> {
    let file = File::open(&a.path).with_context(|| format!("opening {}", a.path.display()))?;
    let mut events: Vec<TraceEvent> = read_trace(BufReader::new(file))?;
    sort_events(&mut events);
    let violations = check_all(&events, a.design);
    for v in &violations {
        println!("{v}");
    }
    eprintln!("{} events, {} violation(s)", events.len(), violations.len());
    Ok(if violations.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
