//! Linearizability checker for single-key histories.
//!
//! Every operation touches one key, so the history is strictly serializable
//! exactly when each key's sub-history is linearizable; keys are checked
//! independently. Each key is searched with the Wing-Gong backtracking
//! algorithm in Lowe's formulation: a linked list of call and return entries
//! in time order, where any call before the first remaining return may be
//! linearized next. Visited `(linearized set, register state)` pairs are
//! memoized. The sequential model is a register with compare-and-set,
//! initially absent.
//!
//! Operations whose outcome is unknown (`Indeterminate`, or still `Pending`)
//! have no return entry: they may be linearized at any point after their
//! invocation, or never. Failed operations and unanswered reads are ignored.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use bytes::Bytes;
use fixedbitset::FixedBitSet;
use thiserror::Error;

use crate::history::{History, OpKind, Operation, Outcome};
use bizur::SimTime;

pub const DEFAULT_BUDGET: u64 = 10_000_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Verdict {
    /// Per key, operation ids in a legal linearization order.
    Linearizable { witness: Vec<(Bytes, Vec<usize>)> },
    Violation(Violation),
}

impl Verdict {
    pub fn is_linearizable(&self) -> bool {
        matches!(self, Verdict::Linearizable { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub key: Bytes,
    /// Shortest prefix of the key's history, by time, that is already not
    /// linearizable. Operations still running at the cut are `Pending`.
    pub prefix: Vec<Operation>,
    /// The prefix in history text form.
    pub log: String,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum CheckError {
    #[error("search budget of {budget} states exceeded on key {key:?}")]
    BudgetExceeded { key: Bytes, budget: u64 },
}

pub fn check(history: &History) -> Result<Verdict, CheckError> {
    check_with_budget(history, DEFAULT_BUDGET)
}

pub fn check_with_budget(history: &History, budget: u64) -> Result<Verdict, CheckError> {
    let mut witness = Vec::new();
    for (key, ops) in history.by_key() {
        match check_key(&ops, budget) {
            Ok(Some(order)) => witness.push((key, order)),
            Ok(None) => {
                let prefix = minimal_prefix(&ops, budget);
                let log = History::from_ops(prefix.clone()).to_text();
                return Ok(Verdict::Violation(Violation { key, prefix, log }));
            }
            Err(SearchError::Budget) => return Err(CheckError::BudgetExceeded { key, budget }),
        }
    }
    Ok(Verdict::Linearizable { witness })
}

#[derive(Debug)]
enum SearchError {
    Budget,
}

/// Applies `op` to register state `state` if its recorded outcome is
/// consistent with running there. Returns the new state.
pub(crate) fn step(state: &Option<Bytes>, op: &Operation) -> Option<Option<Bytes>> {
    let uncertain = op.outcome.is_uncertain();
    match (&op.kind, &op.outcome) {
        (OpKind::Get { .. }, Outcome::Value(v)) => (state == v).then(|| state.clone()),
        (OpKind::Get { .. }, _) => Some(state.clone()),
        (OpKind::Set { value, .. }, _) => Some(Some(value.clone())),
        (OpKind::Delete { .. }, _) => Some(None),
        (OpKind::CasSet { expected, value, .. }, outcome) => cas(state, expected, Some(value.clone()), outcome, uncertain),
        (OpKind::CasDelete { expected, .. }, outcome) => cas(state, expected, None, outcome, uncertain),
    }
}

fn cas(
    state: &Option<Bytes>,
    expected: &Option<Bytes>,
    new: Option<Bytes>,
    outcome: &Outcome,
    uncertain: bool,
) -> Option<Option<Bytes>> {
    let matches = state == expected;
    if uncertain {
        return Some(if matches { new } else { state.clone() });
    }
    match outcome {
        Outcome::Ok => matches.then_some(new),
        Outcome::CasMismatch(current) => (!matches && state == current).then(|| state.clone()),
        _ => None,
    }
}

/// Operations that constrain the search: failed operations never happened
/// and reads without an answer say nothing.
fn relevant<'a>(ops: &[&'a Operation]) -> Vec<&'a Operation> {
    ops.iter()
        .copied()
        .filter(|op| match op.outcome {
            Outcome::Failed => false,
            Outcome::Pending | Outcome::Indeterminate => !op.kind.is_read(),
            _ => true,
        })
        .collect()
}

const NIL: usize = usize::MAX;

/// Searches one key's operations. `Ok(Some(order))` is a witness,
/// `Ok(None)` means no linearization exists.
fn check_key(all: &[&Operation], budget: u64) -> Result<Option<Vec<usize>>, SearchError> {
    let ops = relevant(all);
    let n = ops.len();
    // Entries 1..: (time, 0 = call / 1 = return, op index). Calls sort before
    // returns at equal times, which treats touching operations as concurrent.
    let mut entries: Vec<(SimTime, u8, usize)> = Vec::with_capacity(2 * n);
    let mut determinate = 0usize;
    for (i, op) in ops.iter().enumerate() {
        entries.push((op.invoked_at, 0, i));
        if !op.outcome.is_uncertain() {
            determinate += 1;
            entries.push((op.completed_at.expect("completed op without time"), 1, i));
        }
    }
    entries.sort();
    let m = entries.len();
    // index 0 is the list head
    let mut next = vec![NIL; m + 1];
    let mut prev = vec![NIL; m + 1];
    let mut call_of = vec![NIL; n];
    let mut ret_of = vec![NIL; n];
    for (j, &(_, kind, i)) in entries.iter().enumerate() {
        let e = j + 1;
        prev[e] = j;
        next[j] = e;
        if kind == 0 {
            call_of[i] = e;
        } else {
            ret_of[i] = e;
        }
    }
    let entry_op = |e: usize| entries[e - 1].2;
    let is_call = |e: usize| entries[e - 1].1 == 0;

    let mut values: HashMap<Option<Bytes>, u32> = HashMap::new();
    values.insert(None, 0);
    let mut intern = |v: &Option<Bytes>| {
        let len = values.len() as u32;
        *values.entry(v.clone()).or_insert(len)
    };

    let mut seen: HashSet<(FixedBitSet, u32)> = HashSet::new();
    let mut linearized = FixedBitSet::with_capacity(n);
    let mut state: Option<Bytes> = None;
    let mut stack: Vec<(usize, Option<Bytes>)> = Vec::new();
    let mut remaining = determinate;
    let mut cursor = next[0];
    let mut explored = 0u64;

    fn unlink(next: &mut [usize], prev: &mut [usize], e: usize) {
        next[prev[e]] = next[e];
        if next[e] != NIL {
            prev[next[e]] = prev[e];
        }
    }
    fn relink(next: &mut [usize], prev: &mut [usize], e: usize) {
        next[prev[e]] = e;
        if next[e] != NIL {
            prev[next[e]] = e;
        }
    }

    loop {
        if remaining == 0 {
            return Ok(Some(stack.iter().map(|(i, _)| ops[*i].id).collect()));
        }
        explored += 1;
        if explored > budget {
            return Err(SearchError::Budget);
        }
        if cursor != NIL && is_call(cursor) {
            let i = entry_op(cursor);
            if let Some(new_state) = step(&state, ops[i]) {
                let mut bits = linearized.clone();
                bits.insert(i);
                if seen.insert((bits, intern(&new_state))) {
                    linearized.insert(i);
                    stack.push((i, std::mem::replace(&mut state, new_state)));
                    unlink(&mut next, &mut prev, call_of[i]);
                    if ret_of[i] != NIL {
                        unlink(&mut next, &mut prev, ret_of[i]);
                        remaining -= 1;
                    }
                    cursor = next[0];
                    continue;
                }
            }
            cursor = next[cursor];
            continue;
        }
        // A return entry (or the end): nothing before it can go next.
        let Some((i, old)) = stack.pop() else {
            return Ok(None);
        };
        state = old;
        linearized.set(i, false);
        if ret_of[i] != NIL {
            relink(&mut next, &mut prev, ret_of[i]);
            remaining += 1;
        }
        relink(&mut next, &mut prev, call_of[i]);
        cursor = next[call_of[i]];
    }
}

/// The key's history cut at `t`: operations invoked after `t` are dropped,
/// responses after `t` are not yet known.
fn cut(ops: &[&Operation], t: SimTime) -> Vec<Operation> {
    ops.iter()
        .filter(|op| op.invoked_at <= t)
        .map(|op| {
            let mut op = (*op).clone();
            if op.completed_at.is_some_and(|c| c > t) {
                op.completed_at = None;
                op.outcome = Outcome::Pending;
            }
            op
        })
        .collect()
}

/// Bisects over event times for the shortest non-linearizable prefix.
fn minimal_prefix(ops: &[&Operation], budget: u64) -> Vec<Operation> {
    let mut times: Vec<SimTime> = ops
        .iter()
        .flat_map(|op| std::iter::once(op.invoked_at).chain(op.completed_at))
        .collect();
    times.sort();
    times.dedup();
    let fails = |t: SimTime| {
        let c = cut(ops, t);
        let refs: Vec<&Operation> = c.iter().collect();
        matches!(check_key(&refs, budget), Ok(None))
    };
    // the full history fails; find the first time at which the cut fails
    let (mut lo, mut hi) = (0usize, times.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if fails(times[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    cut(ops, times[lo])
}

/// Exhaustive oracle: tries every subset of the uncertain operations and
/// every order consistent with real time. Exponential; for tiny histories.
pub fn brute_force_linearizable(all: &[&Operation]) -> bool {
    let ops = relevant(all);
    let optional: Vec<usize> = (0..ops.len()).filter(|&i| ops[i].outcome.is_uncertain()).collect();
    let required: Vec<usize> = (0..ops.len()).filter(|&i| !ops[i].outcome.is_uncertain()).collect();
    for mask in 0u32..(1 << optional.len()) {
        let mut chosen = required.clone();
        chosen.extend(
            optional
                .iter()
                .enumerate()
                .filter(|(b, _)| mask & (1 << b) != 0)
                .map(|(_, i)| *i),
        );
        if permutations_ok(&ops, &mut chosen, 0) {
            return true;
        }
    }
    false
}

fn permutations_ok(ops: &[&Operation], order: &mut Vec<usize>, k: usize) -> bool {
    if k == order.len() {
        return respects_real_time(ops, order) && replays(ops, order);
    }
    for j in k..order.len() {
        order.swap(k, j);
        if permutations_ok(ops, order, k + 1) {
            order.swap(k, j);
            return true;
        }
        order.swap(k, j);
    }
    false
}

fn respects_real_time(ops: &[&Operation], order: &[usize]) -> bool {
    for (x, &a) in order.iter().enumerate() {
        for &b in &order[x + 1..] {
            // b is placed after a, so b must not have returned before a began
            if let (Some(done), false) = (ops[b].completed_at, ops[b].outcome.is_uncertain()) {
                if done < ops[a].invoked_at {
                    return false;
                }
            }
        }
    }
    true
}

fn replays(ops: &[&Operation], order: &[usize]) -> bool {
    let mut state = None;
    for &i in order {
        match step(&state, ops[i]) {
            Some(s) => state = s,
            None => return false,
        }
    }
    true
}

/// Human-readable summary of a verdict.
pub fn describe(verdict: &Verdict) -> String {
    match verdict {
        Verdict::Linearizable { witness } => {
            let ops: usize = witness.iter().map(|(_, w)| w.len()).sum();
            format!("linearizable ({} keys, {ops} operations linearized)", witness.len())
        }
        Verdict::Violation(v) => {
            let mut s = String::new();
            let _ = writeln!(
                s,
                "violation on key x{} ({} operations in minimal prefix)",
                hex::encode(&v.key),
                v.prefix.len()
            );
            s.push_str(&v.log);
            s
        }
    }
}
