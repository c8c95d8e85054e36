//! Trace events and the line-oriented trace file format:
//! `timestamp_ns,client_id,item_id,op,mode,outcome`.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam_channel::{Receiver, Sender};

use crate::LockMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceOp {
    Acquire,
    Release,
}

impl TraceOp {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceOp::Acquire => "ACQ",
            TraceOp::Release => "REL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Req,
    Grant,
    Ack,
    Timeout,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Req => "REQ",
            Outcome::Grant => "GRANT",
            Outcome::Ack => "ACK",
            Outcome::Timeout => "TIMEOUT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    pub timestamp_ns: u64,
    pub client_id: u32,
    pub item_id: u32,
    pub op: TraceOp,
    pub mode: LockMode,
    pub outcome: Outcome,
}

impl TraceEvent {
    pub fn new(timestamp_ns: u64, client_id: u32, item_id: u32, op: TraceOp, mode: LockMode, outcome: Outcome) -> Self {
        TraceEvent {
            timestamp_ns,
            client_id,
            item_id,
            op,
            mode,
            outcome,
        }
    }

    pub fn is(&self, op: TraceOp, outcome: Outcome) -> bool {
        self.op == op && self.outcome == outcome
    }
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.timestamp_ns,
            self.client_id,
            self.item_id,
            self.op.as_str(),
            self.mode.as_str(),
            self.outcome.as_str()
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceParseError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FromStr for TraceEvent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = s.trim().split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(format!("expected 6 fields, found {}", fields.len()));
        }
        let num = |i: usize, name: &str| -> Result<u64, String> {
            fields[i].parse::<u64>().map_err(|e| format!("bad {name} `{}`: {e}", fields[i]))
        };
        let timestamp_ns = num(0, "timestamp")?;
        let client_id = u32::try_from(num(1, "client_id")?).map_err(|e| e.to_string())?;
        let item_id = u32::try_from(num(2, "item_id")?).map_err(|e| e.to_string())?;
        let op = match fields[3] {
            "ACQ" => TraceOp::Acquire,
            "REL" => TraceOp::Release,
            other => return Err(format!("bad op `{other}`")),
        };
        let mode = fields[4].parse::<LockMode>()?;
        let outcome = match fields[5] {
            "REQ" => Outcome::Req,
            "GRANT" => Outcome::Grant,
            "ACK" => Outcome::Ack,
            "TIMEOUT" => Outcome::Timeout,
            other => return Err(format!("bad outcome `{other}`")),
        };
        Ok(TraceEvent::new(timestamp_ns, client_id, item_id, op, mode, outcome))
    }
}

/// Parses a trace. Blank lines and lines starting with `#` are skipped.
pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceEvent>, TraceParseError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let ev = t.parse().map_err(|msg| TraceParseError::Malformed { line: i + 1, msg })?;
        out.push(ev);
    }
    Ok(out)
}

pub fn write_trace<W: Write>(mut w: W, events: &[TraceEvent]) -> io::Result<()> {
    for e in events {
        writeln!(w, "{e}")?;
    }
    w.flush()
}

fn clock_monotonic_ns() -> u64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid out-pointer; CLOCK_MONOTONIC is always available on Linux.
    unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

static LAST_STAMP: AtomicU64 = AtomicU64::new(0);

/// Host-wide monotonic timestamp in nanoseconds, strictly increasing within
/// this process. CLOCK_MONOTONIC is shared by all processes on a host, so
/// traces from client processes on the same machine can be merged.
pub fn now_ns() -> u64 {
    let t = clock_monotonic_ns();
    let prev = LAST_STAMP
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |last| Some(t.max(last + 1)))
        .unwrap();
    t.max(prev + 1)
}

/// Append-only, cloneable handle that lock managers record events into.
#[derive(Clone, Debug)]
pub struct TraceSink(Sender<TraceEvent>);

impl TraceSink {
    pub fn record(&self, client_id: u32, item_id: u32, op: TraceOp, mode: LockMode, outcome: Outcome) {
        let _ = self
            .0
            .send(TraceEvent::new(now_ns(), client_id, item_id, op, mode, outcome));
    }
}

/// Collecting side of a [`TraceSink`].
#[derive(Debug)]
pub struct TraceCollector(Receiver<TraceEvent>);

impl TraceCollector {
    /// Everything recorded so far, in timestamp order.
    pub fn drain(&self) -> Vec<TraceEvent> {
        let mut events: Vec<TraceEvent> = self.0.try_iter().collect();
        sort_events(&mut events);
        events
    }
}

pub fn trace_channel() -> (TraceSink, TraceCollector) {
    let (tx, rx) = crossbeam_channel::unbounded();
    (TraceSink(tx), TraceCollector(rx))
}

/// Stable sort by timestamp, preserving recording order for equal stamps.
pub fn sort_events(events: &mut [TraceEvent]) {
    events.sort_by_key(|e| e.timestamp_ns);
}
