use std::collections::HashMap;
use std::time::Duration;

use proptest::prelude::*;

use rdlm::checker::{check_safety, Outcome, TraceEvent, TraceOp, ViolationKind};
use rdlm::client_lm::{ClientError, ClientSession, SessionConfig};
use rdlm::locktable::LockTable;
use rdlm::server_lm::{ItemQueue, LockRequest};
use rdlm::verbs::Node;
use rdlm::{LockClient, LockMode};

fn mode() -> impl Strategy<Value = LockMode> {
    prop_oneof![Just(LockMode::Shared), Just(LockMode::Exclusive)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Single-threaded sessions that never retry behave exactly like the
    /// word-level rules: EXCLUSIVE needs a zero word, SHARED needs no owner.
    #[test]
    fn sessions_follow_word_rules(steps in prop::collection::vec((0usize..3, 0u32..2, mode(), any::<bool>()), 1..80)) {
        let node = Node::new();
        let table = LockTable::create(&node, 2).unwrap();
        let cfg = SessionConfig { backoff: Duration::ZERO, max_retries: Some(0) };
        let mut sessions: Vec<ClientSession> = (0..3)
            .map(|_| ClientSession::from_connection(node.connect_local(Duration::ZERO).unwrap(), 2, cfg).unwrap())
            .collect();
        // model: (owner, count) per item and what each session holds
        let mut words = [(0u32, 0u32); 2];
        let mut held: HashMap<(usize, u32), LockMode> = HashMap::new();
        for (who, item, m, release) in steps {
            let s = &mut sessions[who];
            let id = s.client_id();
            let w = &mut words[item as usize];
            if release {
                let r = s.unlock(item, m);
                match held.get(&(who, item)) {
                    Some(&hm) if hm == m => {
                        prop_assert!(r.is_ok());
                        held.remove(&(who, item));
                        match m {
                            LockMode::Exclusive => w.0 = 0,
                            LockMode::Shared => w.1 -= 1,
                        }
                    }
                    _ => {
                        let not_held = matches!(r, Err(ClientError::NotHeld { .. }));
                        prop_assert!(not_held);
                    }
                }
            } else {
                let r = s.lock(item, m);
                #[allow(clippy::map_entry)]
                if held.contains_key(&(who, item)) {
                    let already = matches!(r, Err(ClientError::AlreadyHeld(_)));
                    prop_assert!(already);
                } else {
                    let ok = match m {
                        LockMode::Exclusive => *w == (0, 0),
                        LockMode::Shared => w.0 == 0,
                    };
                    prop_assert_eq!(r.is_ok(), ok, "acquire {:?} by {} on {:?}", m, id, *w);
                    if ok {
                        held.insert((who, item), m);
                        match m {
                            LockMode::Exclusive => w.0 = id,
                            LockMode::Shared => w.1 += 1,
                        }
                    }
                }
            }
            let actual: Vec<(u32, u32)> = table.words().iter().map(|w| w.decode()).collect();
            prop_assert_eq!(actual, words.to_vec());
        }
    }

    /// The server queue only ever holds compatible grants, never leaves a
    /// grantable request at the head, and grants in arrival order.
    #[test]
    fn item_queue_is_fifo_and_compatible(steps in prop::collection::vec((1u32..6, mode(), any::<bool>()), 1..120)) {
        let mut q = ItemQueue::new(0);
        let mut next_id = 0u64;
        let mut grant_order = Vec::new();
        let mut holders: Vec<u32> = Vec::new();
        for (client, m, release) in steps {
            let granted = if release {
                match q.release(client) {
                    Ok((_, g)) => { holders.retain(|&c| c != client); g }
                    Err(_) => { prop_assert!(!holders.contains(&client)); continue; }
                }
            } else {
                next_id += 1;
                match q.acquire(LockRequest::acquire(client, 0, m, next_id)) {
                    Ok(g) => g,
                    Err(_) => continue,
                }
            };
            for g in &granted {
                grant_order.push(g.request_id);
                holders.push(g.client_id);
            }
            let modes: Vec<LockMode> = q.granted().map(|(_, m)| m).collect();
            let x = modes.iter().filter(|&&m| m == LockMode::Exclusive).count();
            prop_assert!(x == 0 || modes.len() == 1, "incompatible holders {:?}", modes);
            if let Some(head) = q.pending().next() {
                let blocked = match head.mode {
                    LockMode::Exclusive => !modes.is_empty(),
                    LockMode::Shared => x > 0,
                };
                prop_assert!(blocked, "head {:?} left waiting with holders {:?}", head, modes);
            }
        }
        prop_assert!(grant_order.windows(2).all(|w| w[0] < w[1]), "grants out of order: {:?}", grant_order);
        // draining the holders grants everything still queued
        let mut rounds = 0;
        loop {
            let first = q.granted().next();
            let Some((c, _)) = first else { break };
            q.release(c).unwrap();
            rounds += 1;
            prop_assert!(rounds < 1000);
        }
        prop_assert_eq!(q.pending().count(), 0);
    }

    /// check_safety flags a trace iff a brute-force pairwise scan finds two
    /// incompatible holds whose open intervals intersect.
    #[test]
    fn safety_check_matches_pairwise_oracle(holds in prop::collection::vec((1u32..5, 0u32..2, mode(), 0u64..40, 1u64..10), 1..12)) {
        // one hold per (client, item): drop later duplicates
        let mut seen = std::collections::HashSet::new();
        let holds: Vec<_> = holds.into_iter().filter(|h| seen.insert((h.0, h.1))).collect();
        let mut trace = Vec::new();
        for &(c, item, m, start, len) in &holds {
            // timestamps are unique: ten slots per tick, offset by client
            let t = |x: u64, k: u64| x * 100 + k * 10 + c as u64;
            trace.push(TraceEvent::new(t(start, 0), c, item, TraceOp::Acquire, m, Outcome::Req));
            trace.push(TraceEvent::new(t(start, 1), c, item, TraceOp::Acquire, m, Outcome::Grant));
            trace.push(TraceEvent::new(t(start + len, 2), c, item, TraceOp::Release, m, Outcome::Req));
            trace.push(TraceEvent::new(t(start + len, 3), c, item, TraceOp::Release, m, Outcome::Ack));
        }
        trace.sort_by_key(|e| e.timestamp_ns);
        let mut expect = false;
        for (i, a) in holds.iter().enumerate() {
            for b in &holds[i + 1..] {
                let incompatible = a.2 == LockMode::Exclusive || b.2 == LockMode::Exclusive;
                let (a0, a1) = (a.3 * 100 + 10 + a.0 as u64, (a.3 + a.4) * 100 + 20 + a.0 as u64);
                let (b0, b1) = (b.3 * 100 + 10 + b.0 as u64, (b.3 + b.4) * 100 + 20 + b.0 as u64);
                if a.1 == b.1 && incompatible && a0 < b1 && b0 < a1 {
                    expect = true;
                }
            }
        }
        let found = check_safety(&trace)
            .iter()
            .any(|v| matches!(v.kind, ViolationKind::DoubleExclusive | ViolationKind::SharedExclusiveOverlap));
        prop_assert_eq!(found, expect);
    }
}
