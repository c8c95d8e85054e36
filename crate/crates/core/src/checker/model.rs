//! Exhaustive state-space exploration of the one-sided lock protocol.
//!
//! Each client runs a fixed program of acquire/release pairs. Every verb is
//! one atomic step on a lock word, so the reachable states are all
//! interleavings of those steps. The model keeps its own `(owner, count)`
//! representation and does not reuse the runtime client code.

use std::collections::{HashMap, VecDeque};

use crate::LockMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// About to issue the first verb of the current acquire.
    Start,
    /// Shared request counted; re-reading the owner half.
    Polling,
    Held,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pc {
    pub step: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelState {
    /// Per item: (exclusive owner, shared count).
    pub words: Vec<(u32, u32)>,
    pub pcs: Vec<Pc>,
}

/// One lock/unlock pair in a client's program.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelOp {
    pub item: usize,
    pub mode: LockMode,
}

#[derive(Debug, Default)]
pub struct ModelReport {
    pub states: usize,
    pub transitions: usize,
    pub terminal_states: usize,
    pub unsafe_states: Vec<ModelState>,
    /// Terminal states whose lock words are not all zero.
    pub dirty_terminals: Vec<ModelState>,
    /// States from which no terminal state is reachable.
    pub stuck_states: usize,
}

impl ModelReport {
    pub fn is_clean(&self) -> bool {
        self.unsafe_states.is_empty() && self.dirty_terminals.is_empty() && self.stuck_states == 0
    }
}

fn is_done(pc: &Pc, program: &[ModelOp]) -> bool {
    pc.step >= program.len()
}

fn successor(state: &ModelState, client: usize, programs: &[Vec<ModelOp>]) -> Option<ModelState> {
    let program = &programs[client];
    let pc = state.pcs[client];
    if is_done(&pc, program) {
        return None;
    }
    let op = program[pc.step];
    let id = client as u32 + 1;
    let mut next = state.clone();
    let (owner, count) = state.words[op.item];
    let (word, new_pc) = match (op.mode, pc.phase) {
        // CAS (0|0) -> (id|0)
        (LockMode::Exclusive, Phase::Start) => {
            if (owner, count) == (0, 0) {
                ((id, 0), Pc { phase: Phase::Held, ..pc })
            } else {
                ((owner, count), pc)
            }
        }
        // WRITE 0 to the owner half
        (LockMode::Exclusive, Phase::Held) => ((0, count), Pc { step: pc.step + 1, phase: Phase::Start }),
        // FA +1, granted iff the old owner half was 0
        (LockMode::Shared, Phase::Start) => {
            let phase = if owner == 0 { Phase::Held } else { Phase::Polling };
            ((owner, count + 1), Pc { phase, ..pc })
        }
        // READ of the owner half
        (LockMode::Shared, Phase::Polling) => {
            let phase = if owner == 0 { Phase::Held } else { Phase::Polling };
            ((owner, count), Pc { phase, ..pc })
        }
        // FA -1
        (LockMode::Shared, Phase::Held) => ((owner, count - 1), Pc { step: pc.step + 1, phase: Phase::Start }),
        (LockMode::Exclusive, Phase::Polling) => unreachable!("exclusive acquirers never poll"),
    };
    next.words[op.item] = word;
    next.pcs[client] = new_pc;
    Some(next)
}

fn is_safe(state: &ModelState, programs: &[Vec<ModelOp>]) -> bool {
    (0..state.words.len()).all(|item| {
        let mut excl = 0;
        let mut shared = 0;
        for (c, pc) in state.pcs.iter().enumerate() {
            if pc.phase != Phase::Held || is_done(pc, &programs[c]) {
                continue;
            }
            let op = programs[c][pc.step];
            if op.item != item {
                continue;
            }
            match op.mode {
                LockMode::Exclusive => excl += 1,
                LockMode::Shared => shared += 1,
            }
        }
        excl <= 1 && (excl == 0 || shared == 0)
    })
}

/// Breadth-first exploration of every interleaving of `programs` over
/// `items` lock words that start at zero.
pub fn explore(programs: &[Vec<ModelOp>], items: usize) -> ModelReport {
    let init = ModelState {
        words: vec![(0, 0); items],
        pcs: vec![Pc { step: 0, phase: Phase::Start }; programs.len()],
    };
    let mut index: HashMap<ModelState, usize> = HashMap::new();
    let mut states: Vec<ModelState> = Vec::new();
    let mut preds: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();
    let mut report = ModelReport::default();

    index.insert(init.clone(), 0);
    states.push(init);
    preds.push(Vec::new());
    queue.push_back(0usize);

    let mut terminals = Vec::new();
    while let Some(i) = queue.pop_front() {
        let state = states[i].clone();
        if !is_safe(&state, programs) {
            report.unsafe_states.push(state.clone());
        }
        let mut any = false;
        for c in 0..programs.len() {
            let Some(next) = successor(&state, c, programs) else { continue };
            any = true;
            report.transitions += 1;
            let j = match index.get(&next) {
                Some(&j) => j,
                None => {
                    let j = states.len();
                    index.insert(next.clone(), j);
                    states.push(next);
                    preds.push(Vec::new());
                    queue.push_back(j);
                    j
                }
            };
            preds[j].push(i);
        }
        if !any {
            terminals.push(i);
            if state.words.iter().any(|w| *w != (0, 0)) {
                report.dirty_terminals.push(state);
            }
        }
    }

    // backward reachability from terminal states
    let mut can_finish = vec![false; states.len()];
    let mut stack = terminals.clone();
    for &t in &terminals {
        can_finish[t] = true;
    }
    while let Some(j) = stack.pop() {
        for &p in &preds[j] {
            if !can_finish[p] {
                can_finish[p] = true;
                stack.push(p);
            }
        }
    }

    report.states = states.len();
    report.terminal_states = terminals.len();
    report.stuck_states = can_finish.iter().filter(|f| !**f).count();
    report
}
