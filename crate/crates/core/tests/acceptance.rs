//! Acceptance criteria. Runs sequentially (timing-sensitive criteria must not
//! share the CPU with each other) and prints one PASS/FAIL line each.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdlm::bench::{run_workload, sweep_clients, TransportKind, WorkloadSpec};
use rdlm::checker::model::{explore, ModelOp};
use rdlm::locktable::{LockWord, DECREMENT};
use rdlm::server_lm::upper_bound_throughput;
use rdlm::verbs::Node;
use rdlm::{Design, LockMode};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

const RUNS: u64 = 10;
const REQUIRED: usize = 9;

fn safety_suite(transport: TransportKind, n_clients: u32) -> Outcome {
    let mut runs = 0;
    for design in Design::ALL {
        for seed in 1..=50 {
            let spec = WorkloadSpec {
                design,
                transport,
                n_clients,
                n_items: 4,
                ops_per_client: 500,
                shared_fraction: 0.5,
                rng_seed: seed,
                worker_exe: Some(PathBuf::from(env!("CARGO_BIN_EXE_rdlm"))),
                ..WorkloadSpec::default()
            };
            let out = run_workload(&spec).map_err(|e| format!("{design} seed {seed}: {e}"))?;
            let expected = n_clients as u64 * 500;
            if out.result.total_locks_granted != expected {
                return Err(format!(
                    "{design} seed {seed}: {} grants, expected {expected}",
                    out.result.total_locks_granted
                ));
            }
            if out.result.dirty_words != 0 {
                return Err(format!("{design} seed {seed}: {} lock words left set", out.result.dirty_words));
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} runs, zero violations"))
}

#[derive(Clone, Copy, Debug)]
enum AtomicOp {
    FetchAdd { old: u64 },
    Cas { expected: u64, new: u64, old: u64 },
    HalfWrite { tag: u32 },
}

/// Rebuilds one sequential history from the values the atomics returned.
///
/// Every write and successful CAS installs a fresh tag in the upper half and
/// keeps the lower half; FA adds one to the lower half. Hence no word value
/// ever repeats, the op that reported old value `s` is the unique successor
/// of `s`, and the only transitions that report nothing are half-writes.
///
/// The history therefore splits into segments: the initial value and each
/// observed write's first value, each followed by its chain of reported
/// transitions. Segments are glued by writes, which keep the lower half, and
/// the lower half never decreases, so the order is forced up to writes whose
/// segments add nothing to the lower half.
fn replay(ops: &[AtomicOp], final_word: u64) -> Result<String, String> {
    const LO: u64 = 0xffff_ffff;
    let mut forced: HashMap<u64, u64> = HashMap::new();
    let mut observed: HashSet<u64> = HashSet::new();
    let mut writes: HashSet<u64> = HashSet::new();
    let (mut fa, mut cas_ok, mut cas_fail) = (0u64, 0u64, 0u64);
    for op in ops {
        match *op {
            AtomicOp::FetchAdd { old } => {
                fa += 1;
                observed.insert(old);
                if forced.insert(old, old.wrapping_add(1)).is_some() {
                    return Err(format!("two transitions out of {old:#x}"));
                }
            }
            AtomicOp::Cas { expected, new, old } => {
                observed.insert(old);
                if old == expected {
                    cas_ok += 1;
                    if forced.insert(old, new).is_some() {
                        return Err(format!("CAS succeeded twice from {old:#x}"));
                    }
                } else {
                    cas_fail += 1;
                }
            }
            AtomicOp::HalfWrite { tag } => {
                writes.insert(tag as u64);
            }
        }
    }
    observed.insert(final_word);

    // first value of every observed write epoch
    let mut starts: HashMap<u64, u64> = HashMap::new();
    for &v in &observed {
        if writes.contains(&(v >> 32)) {
            let e = starts.entry(v >> 32).or_insert(v);
            *e = (*e).min(v);
        }
    }
    struct Segment {
        start: u64,
        tail: u64,
    }
    let mut in_segment: HashSet<u64> = HashSet::new();
    let mut segment = |start: u64| -> Result<Segment, String> {
        let mut s = start;
        loop {
            if !in_segment.insert(s) {
                return Err(format!("value {s:#x} reached twice"));
            }
            match forced.get(&s) {
                Some(&n) => s = n,
                None => return Ok(Segment { start, tail: s }),
            }
        }
    };
    let first = segment(0)?;
    let mut groups: HashMap<u64, Vec<Segment>> = HashMap::new();
    for &start in starts.values() {
        let seg = segment(start)?;
        groups.entry(start & LO).or_default().push(seg);
    }
    if in_segment.len() != forced.len() + 1 + starts.len() {
        return Err("some reported transitions are not reachable from any segment".into());
    }
    if let Some(orphan) = observed.iter().find(|v| !in_segment.contains(v)) {
        return Err(format!("value {orphan:#x} was observed but is not in the history"));
    }

    let flat = |g: &Segment| g.tail & LO == g.start & LO;
    let mut order = vec![first];
    let mut lo = 0;
    loop {
        let last = order.last().unwrap();
        if !flat(last) {
            if groups.get(&lo).is_some_and(|g| !g.is_empty()) {
                return Err(format!("write segment at lower half {lo} cannot fit"));
            }
            lo = last.tail & LO;
        }
        let Some(mut group) = groups.remove(&lo) else { break };
        let (mut flats, rising): (Vec<_>, Vec<_>) = group.drain(..).partition(flat);
        if rising.len() > 1 {
            return Err(format!("two segments leave lower half {lo}"));
        }
        flats.sort_by_key(|g| g.tail == final_word);
        order.extend(flats);
        match rising.into_iter().next() {
            Some(r) => order.push(r),
            None => break,
        }
    }
    if !groups.is_empty() {
        return Err(format!("{} write segment(s) unreachable", groups.len()));
    }
    let end = order.last().unwrap().tail;
    if end != final_word {
        return Err(format!("history ends at {end:#x}, word holds {final_word:#x}"));
    }
    if final_word & LO != fa {
        return Err(format!("lower half {} != {fa} fetch-adds", final_word & LO));
    }
    Ok(format!(
        "{} ops ({fa} FA, {cas_ok} CAS ok, {cas_fail} CAS failed, {} writes) replay to {final_word:#x}",
        ops.len(),
        writes.len()
    ))
}

fn atomics_linearizability() -> Outcome {
    const ACTORS: u32 = 8;
    const TOTAL: u32 = 10_000;
    let node = Node::new();
    let mr = node.register_region(8).map_err(|e| e.to_string())?;
    node.export(&mr);
    let remote = mr.remote();
    let handles: Vec<_> = (1..=ACTORS)
        .map(|actor| {
            let qp = node.connect_local(Duration::ZERO).expect("connect");
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(actor as u64);
                let mut seen = 0u64;
                let mut log = Vec::new();
                for k in 1..=TOTAL / ACTORS {
                    let tag = actor << 20 | k;
                    let r = rng.gen_range(0..10);
                    if r < 4 {
                        let old = qp.fetch_add(&remote, 0, 1).old_value().expect("FA completes");
                        seen = old + 1;
                        log.push(AtomicOp::FetchAdd { old });
                    } else if r < 8 {
                        let new = (tag as u64) << 32 | (seen & 0xffff_ffff);
                        let old = qp.compare_swap(&remote, 0, seen, new).old_value().expect("CAS completes");
                        log.push(AtomicOp::Cas { expected: seen, new, old });
                        seen = if old == seen { new } else { old };
                    } else {
                        let c = qp.write(&remote, 4, &tag.to_le_bytes());
                        assert!(c.is_success());
                        log.push(AtomicOp::HalfWrite { tag });
                    }
                    if rng.gen_bool(0.3) {
                        thread::yield_now();
                    }
                }
                log
            })
        })
        .collect();
    let mut ops = Vec::new();
    for h in handles {
        ops.extend(h.join().map_err(|_| "actor panicked".to_string())?);
    }
    let final_word = mr.load_u64(0).map_err(|s| s.to_string())?;
    let verdict = replay(&ops, final_word)?;
    // the oracle must reject a lost update and a wrong final value
    if replay(&ops, final_word + 1).is_ok() {
        return Err("oracle accepted a wrong final word".into());
    }
    let mut doubled = ops.clone();
    let dup = ops.iter().find(|o| matches!(o, AtomicOp::Cas { expected, old, .. } if expected == old));
    doubled.push(*dup.ok_or("no successful CAS")?);
    if replay(&doubled, final_word).is_ok() {
        return Err("oracle accepted a duplicated CAS".into());
    }
    Ok(verdict)
}

fn codec_bridges() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DEC);
    for _ in 0..100_000 {
        let (owner, count): (u32, u32) = (rng.gen(), rng.gen());
        let w = LockWord::encode(owner, count);
        let bytes = w.raw().to_le_bytes();
        if w.decode() != (owner, count)
            || bytes[0..4] != count.to_le_bytes()
            || bytes[4..8] != owner.to_le_bytes()
        {
            return Err(format!("round trip failed for ({owner}, {count})"));
        }
    }
    // the identities through the verbs themselves
    let node = Node::new();
    let mr = node.register_region(8).map_err(|e| e.to_string())?;
    node.export(&mr);
    let qp = node.connect_local(Duration::ZERO).map_err(|e| e.to_string())?;
    let remote = mr.remote();
    for _ in 0..10_000 {
        let owner: u32 = rng.gen();
        let count: u32 = rng.gen_range(1..u32::MAX);
        let w = LockWord::encode(owner, count).raw();
        mr.store_u64(0, w).map_err(|s| s.to_string())?;
        qp.fetch_add(&remote, 0, 1);
        let up = LockWord::from_raw(mr.load_u64(0).unwrap()).decode();
        qp.fetch_add(&remote, 0, DECREMENT);
        qp.fetch_add(&remote, 0, DECREMENT);
        let down = LockWord::from_raw(mr.load_u64(0).unwrap()).decode();
        if up != (owner, count + 1) || down != (owner, count - 1) {
            return Err(format!("bridge failed for ({owner}, {count}): {up:?} {down:?}"));
        }
    }
    Ok("1e5 round trips, 1e4 FA(+1)/FA(2^64-1) bridges exact".into())
}

fn cost_spec(design: Design, n_clients: u32, seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        design,
        n_clients,
        n_items: 100,
        ops_per_client: 60,
        rng_seed: seed,
        per_message_cost: Duration::from_micros(20),
        sr_message_cost: Some(Duration::from_micros(2)),
        worker_limit: 4,
        ..WorkloadSpec::default()
    }
}

fn throughputs(base: &WorkloadSpec, counts: &[u32]) -> Result<Vec<f64>, String> {
    let rows = sweep_clients(base, counts).map_err(|e| e.to_string())?;
    rows.iter()
        .map(|r| r.outcome.as_ref().map(|o| o.result.throughput).map_err(|e| e.clone()))
        .collect()
}

fn server_frontend_shape() -> Outcome {
    let counts = [1, 2, 4, 8, 16];
    let mut good = 0;
    let mut notes = Vec::new();
    for seed in 1..=RUNS {
        let tcp = throughputs(&cost_spec(Design::ServerTcp, 1, seed), &counts)?;
        let sr = throughputs(&cost_spec(Design::ServerSr, 1, seed), &counts)?;
        let above = (2..5).all(|k| sr[k] > tcp[k]);
        let plateau = (tcp[4] - tcp[3]).abs() <= 0.25 * tcp[3];
        if above && plateau {
            good += 1;
        }
        notes.push(format!("tcp@8={:.0} tcp@16={:.0} sr@16={:.0}", tcp[3], tcp[4], sr[4]));
    }
    let msg = format!("{good}/{RUNS} runs with SR > TCP at >=4 clients and a TCP plateau; last: {}", notes.last().unwrap());
    if good >= REQUIRED {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn client_centric_beats_send_recv() -> Outcome {
    let mut good = 0;
    let mut last = String::new();
    for seed in 1..=RUNS {
        let cc = throughputs(&cost_spec(Design::ClientCentric, 1, seed), &[8, 16])?;
        let sr = throughputs(&cost_spec(Design::ServerSr, 1, seed), &[8, 16])?;
        if cc[0] > sr[0] && cc[1] > sr[1] {
            good += 1;
        }
        last = format!("cc@16={:.0} sr@16={:.0}", cc[1], sr[1]);
    }
    let msg = format!("{good}/{RUNS} runs with client-centric > SR at 8 and 16 clients; last: {last}");
    if good >= REQUIRED {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn contention_trend() -> Outcome {
    let mut good = 0;
    let mut last = String::new();
    for seed in 1..=RUNS {
        let at = |items| {
            let spec = WorkloadSpec {
                design: Design::ClientCentric,
                n_clients: 16,
                n_items: items,
                ops_per_client: 200,
                rng_seed: seed,
                latency: Duration::from_micros(2),
                ..WorkloadSpec::default()
            };
            run_workload(&spec).map(|o| o.result.throughput).map_err(|e| e.to_string())
        };
        let (hot, cold) = (at(2)?, at(16)?);
        if hot < cold {
            good += 1;
        }
        last = format!("CR 0.875: {hot:.0}, CR 0: {cold:.0}");
    }
    let msg = format!("{good}/{RUNS} runs with lower throughput at CR 0.875; last: {last}");
    if good >= REQUIRED {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn upper_bound() -> Outcome {
    let v = upper_bound_throughput(40.0, 3e9, 1e4, 1.0).map_err(|e| e.to_string())?;
    if v == 1.2e7 {
        Ok(format!("{v:e} locks/s"))
    } else {
        Err(format!("got {v:e}"))
    }
}

fn model_check() -> Outcome {
    let mut total = 0;
    for a in [LockMode::Shared, LockMode::Exclusive] {
        for b in [LockMode::Shared, LockMode::Exclusive] {
            let programs = vec![vec![ModelOp { item: 0, mode: a }], vec![ModelOp { item: 0, mode: b }]];
            let r = explore(&programs, 1);
            if !r.is_clean() || r.terminal_states == 0 {
                return Err(format!(
                    "{a}/{b}: {} unsafe, {} dirty terminals, {} stuck",
                    r.unsafe_states.len(),
                    r.dirty_terminals.len(),
                    r.stuck_states
                ));
            }
            total += r.states;
        }
    }
    Ok(format!("4 mode pairs, {total} states, all safe and clean"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("safety suite (in-process)", || safety_suite(TransportKind::InProc, 8)),
        ("atomics linearizability", atomics_linearizability),
        ("codec and arithmetic bridges", codec_bridges),
        ("server frontend throughput shape", server_frontend_shape),
        ("client-centric beats SEND/RECV", client_centric_beats_send_recv),
        ("contention trend", contention_trend),
        ("upper-bound formula", upper_bound),
        ("exhaustive model check", model_check),
        ("transport equivalence (4 processes)", || safety_suite(TransportKind::Tcp, 4)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = f();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1} s): {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

