//! Offline safety checks over recorded lock traces.
//!
//! Hold intervals run from an `ACQ GRANT` to the holder's next `REL REQ` (or
//! `REL ACK` when no request was logged). Two intervals on one item overlap
//! when each starts strictly before the other ends, so a release and a grant
//! carrying the same timestamp do not conflict.

use std::collections::HashMap;
use std::fmt;

use crate::{Design, LockMode};

pub mod model;
pub mod trace;

pub use trace::{
    now_ns, read_trace, sort_events, trace_channel, write_trace, Outcome, TraceCollector, TraceEvent,
    TraceOp, TraceParseError, TraceSink,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    DoubleExclusive,
    SharedExclusiveOverlap,
    FifoViolation,
    Conservation,
    OrphanEvent,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::DoubleExclusive => "DOUBLE_EXCLUSIVE",
            ViolationKind::SharedExclusiveOverlap => "SHARED_EXCLUSIVE_OVERLAP",
            ViolationKind::FifoViolation => "FIFO_VIOLATION",
            ViolationKind::Conservation => "CONSERVATION",
            ViolationKind::OrphanEvent => "ORPHAN_EVENT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub events: Vec<TraceEvent>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.as_str(), self.detail)?;
        for e in &self.events {
            write!(f, " [{e}]")?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckError {
    #[error("FIFO order is only defined for server-centric traces, not {0}")]
    NotApplicable(Design),
}

struct Interval {
    start: u64,
    end: u64,
    mode: LockMode,
    grant: TraceEvent,
}

/// Flags every pair of overlapping incompatible hold intervals.
pub fn check_safety(trace: &[TraceEvent]) -> Vec<Violation> {
    let mut open: HashMap<(u32, u32), TraceEvent> = HashMap::new();
    let mut per_item: HashMap<u32, Vec<Interval>> = HashMap::new();
    for e in trace {
        let key = (e.client_id, e.item_id);
        match (e.op, e.outcome) {
            (TraceOp::Acquire, Outcome::Grant) => {
                if let Some(prev) = open.insert(key, *e) {
                    // re-grant without release; close the old interval here
                    per_item.entry(e.item_id).or_default().push(Interval {
                        start: prev.timestamp_ns,
                        end: e.timestamp_ns,
                        mode: prev.mode,
                        grant: prev,
                    });
                }
            }
            (TraceOp::Release, Outcome::Req) | (TraceOp::Release, Outcome::Ack) => {
                if let Some(g) = open.remove(&key) {
                    per_item.entry(e.item_id).or_default().push(Interval {
                        start: g.timestamp_ns,
                        end: e.timestamp_ns,
                        mode: g.mode,
                        grant: g,
                    });
                }
            }
            _ => {}
        }
    }
    for (_, g) in open {
        per_item.entry(g.item_id).or_default().push(Interval {
            start: g.timestamp_ns,
            end: u64::MAX,
            mode: g.mode,
            grant: g,
        });
    }

    let mut items: Vec<_> = per_item.into_iter().collect();
    items.sort_by_key(|(item, _)| *item);
    let mut out = Vec::new();
    for (item, mut intervals) in items {
        intervals.sort_by_key(|iv| (iv.start, iv.grant.client_id));
        let mut active: Vec<&Interval> = Vec::new();
        for iv in &intervals {
            active.retain(|a| a.end > iv.start);
            for a in &active {
                if a.mode == LockMode::Shared && iv.mode == LockMode::Shared {
                    continue;
                }
                let kind = if a.mode == LockMode::Exclusive && iv.mode == LockMode::Exclusive {
                    ViolationKind::DoubleExclusive
                } else {
                    ViolationKind::SharedExclusiveOverlap
                };
                out.push(Violation {
                    kind,
                    events: vec![a.grant, iv.grant],
                    detail: format!(
                        "item {item}: client {} ({}) and client {} ({}) hold simultaneously",
                        a.grant.client_id, a.mode, iv.grant.client_id, iv.mode
                    ),
                });
            }
            active.push(iv);
        }
    }
    out
}

/// Checks that grants follow request order per item, allowing a run of
/// consecutive SHARED requests to be granted as a batch.
pub fn check_fifo(trace: &[TraceEvent], design: Design) -> Result<Vec<Violation>, CheckError> {
    if !design.is_server() {
        return Err(CheckError::NotApplicable(design));
    }
    let mut pending: HashMap<u32, Vec<TraceEvent>> = HashMap::new();
    let mut out = Vec::new();
    for e in trace.iter().filter(|e| e.op == TraceOp::Acquire) {
        let queue = pending.entry(e.item_id).or_default();
        match e.outcome {
            Outcome::Req => queue.push(*e),
            Outcome::Grant => {
                let Some(pos) = queue.iter().position(|r| r.client_id == e.client_id) else {
                    out.push(Violation {
                        kind: ViolationKind::OrphanEvent,
                        events: vec![*e],
                        detail: format!("item {}: grant to client {} without a pending request", e.item_id, e.client_id),
                    });
                    continue;
                };
                let req = queue.remove(pos);
                let blocker = queue[..pos]
                    .iter()
                    .find(|r| !(r.mode == LockMode::Shared && req.mode == LockMode::Shared));
                if let Some(b) = blocker {
                    out.push(Violation {
                        kind: ViolationKind::FifoViolation,
                        events: vec![*b, *e],
                        detail: format!(
                            "item {}: client {} granted ahead of earlier {} request from client {}",
                            e.item_id, e.client_id, b.mode, b.client_id
                        ),
                    });
                }
            }
            Outcome::Timeout => {
                if let Some(pos) = queue.iter().position(|r| r.client_id == e.client_id) {
                    queue.remove(pos);
                }
            }
            Outcome::Ack => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HoldState {
    Idle,
    Requested(LockMode),
    Held(LockMode),
    Releasing,
    /// Shared acquire gave up; its count increment must be rolled back.
    TimedOut,
}

/// Replays each (client, item) life cycle and flags events that do not fit
/// it, plus holds or requests left open at the end of the trace.
pub fn check_conservation(trace: &[TraceEvent]) -> Vec<Violation> {
    let mut state: HashMap<(u32, u32), (HoldState, TraceEvent)> = HashMap::new();
    let mut out = Vec::new();
    for e in trace {
        let key = (e.client_id, e.item_id);
        let cur = state.get(&key).map(|(s, _)| *s).unwrap_or(HoldState::Idle);
        let next = match (cur, e.op, e.outcome) {
            (HoldState::Idle, TraceOp::Acquire, Outcome::Req) => Some(HoldState::Requested(e.mode)),
            (HoldState::Requested(m), TraceOp::Acquire, Outcome::Grant) if m == e.mode => Some(HoldState::Held(m)),
            (HoldState::Requested(LockMode::Shared), TraceOp::Acquire, Outcome::Timeout) => Some(HoldState::TimedOut),
            (HoldState::Requested(LockMode::Exclusive), TraceOp::Acquire, Outcome::Timeout) => Some(HoldState::Idle),
            (HoldState::Held(m), TraceOp::Release, Outcome::Req) if m == e.mode => Some(HoldState::Releasing),
            (HoldState::Held(m), TraceOp::Release, Outcome::Ack) if m == e.mode => Some(HoldState::Idle),
            (HoldState::Releasing, TraceOp::Release, Outcome::Ack) => Some(HoldState::Idle),
            (HoldState::TimedOut, TraceOp::Release, Outcome::Ack) if e.mode == LockMode::Shared => {
                Some(HoldState::Idle)
            }
            _ => None,
        };
        match next {
            Some(s) => {
                state.insert(key, (s, *e));
            }
            None => {
                let prev = state.get(&key).map(|(_, ev)| *ev);
                out.push(Violation {
                    kind: ViolationKind::OrphanEvent,
                    events: prev.into_iter().chain(std::iter::once(*e)).collect(),
                    detail: format!(
                        "client {} item {}: {} {} {} does not follow {:?}",
                        e.client_id,
                        e.item_id,
                        e.op.as_str(),
                        e.mode,
                        e.outcome.as_str(),
                        cur
                    ),
                });
            }
        }
    }
    let mut leftovers: Vec<_> = state
        .into_iter()
        .filter(|(_, (s, _))| *s != HoldState::Idle)
        .collect();
    leftovers.sort_by_key(|((c, i), _)| (*i, *c));
    for ((client, item), (s, last)) in leftovers {
        let what = match s {
            HoldState::Held(_) | HoldState::Releasing => "lock still held at end of trace",
            HoldState::Requested(_) => "request still pending at end of trace",
            HoldState::TimedOut => "timed-out shared request never rolled back",
            HoldState::Idle => unreachable!(),
        };
        out.push(Violation {
            kind: ViolationKind::Conservation,
            events: vec![last],
            detail: format!("client {client} item {item}: {what}"),
        });
    }
    out
}

/// Safety and conservation, plus FIFO order for server-centric designs.
pub fn check_all(trace: &[TraceEvent], design: Option<Design>) -> Vec<Violation> {
    let mut v = check_safety(trace);
    if let Some(d) = design.filter(|d| d.is_server()) {
        v.extend(check_fifo(trace, d).expect("server design"));
    }
    v.extend(check_conservation(trace));
    v
}
