//! Invocation/response history of client operations.
//!
//! Text form, one event per line in time order:
//!
//! ```text
//! <time_us> c<client> invoke <op> <key> [<arg> ...]
//! <time_us> c<client> respond <op> <key> <result>
//! ```
//!
//! `op` is one of `get set del cas casdel`. Keys and values are written as
//! `x` followed by lowercase hex, an absent value as `~`. Arguments are the
//! value for `set`, expected then new value for `cas`, expected for `casdel`.
//! Results are `value <v>`, `absent`, `ok`, `mismatch <v|~>`, `indeterminate`
//! or `failed`. An operation without a respond line was still outstanding.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use bizur::client::SubmitError;
use bizur::{ClientId, KvRequest, KvResponse, SimTime};
use bytes::Bytes;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Get { key: Bytes },
    Set { key: Bytes, value: Bytes },
    Delete { key: Bytes },
    CasSet { key: Bytes, expected: Option<Bytes>, value: Bytes },
    CasDelete { key: Bytes, expected: Option<Bytes> },
}

impl OpKind {
    /// `None` for requests that do not target a single key.
    pub fn from_request(request: &KvRequest) -> Option<OpKind> {
        Some(match request.clone() {
            KvRequest::Get { key } => OpKind::Get { key },
            KvRequest::Set { key, value } => OpKind::Set { key, value },
            KvRequest::Delete { key } => OpKind::Delete { key },
            KvRequest::CasSet { key, expected, value } => OpKind::CasSet { key, expected, value },
            KvRequest::CasDelete { key, expected } => OpKind::CasDelete { key, expected },
            KvRequest::IterateKeys => return None,
        })
    }

    pub fn key(&self) -> &Bytes {
        match self {
            OpKind::Get { key }
            | OpKind::Set { key, .. }
            | OpKind::Delete { key }
            | OpKind::CasSet { key, .. }
            | OpKind::CasDelete { key, .. } => key,
        }
    }

    pub fn is_read(&self) -> bool {
        matches!(self, OpKind::Get { .. })
    }

    fn name(&self) -> &'static str {
        match self {
            OpKind::Get { .. } => "get",
            OpKind::Set { .. } => "set",
            OpKind::Delete { .. } => "del",
            OpKind::CasSet { .. } => "cas",
            OpKind::CasDelete { .. } => "casdel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Outcome {
    /// No response yet.
    Pending,
    /// Result of a get.
    Value(Option<Bytes>),
    Ok,
    CasMismatch(Option<Bytes>),
    /// The client gave up without learning whether the operation applied.
    Indeterminate,
    /// The operation definitely did not apply.
    Failed,
}

impl Outcome {
    pub fn from_result(result: &Result<KvResponse, SubmitError>) -> Outcome {
        match result {
            Ok(KvResponse::Value(v)) => Outcome::Value(Some(v.clone())),
            Ok(KvResponse::Absent) => Outcome::Value(None),
            Ok(KvResponse::Ok) => Outcome::Ok,
            Ok(KvResponse::CasMismatch(c)) => Outcome::CasMismatch(c.clone()),
            Ok(KvResponse::NotALeader { maybe_applied: true, .. })
            | Ok(KvResponse::ReconfigRedirect { maybe_applied: true, .. })
            | Err(SubmitError::Indeterminate) => Outcome::Indeterminate,
            Ok(_) | Err(SubmitError::RetriesExhausted) => Outcome::Failed,
        }
    }

    /// May have taken effect without the client knowing.
    pub fn is_uncertain(&self) -> bool {
        matches!(self, Outcome::Pending | Outcome::Indeterminate)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Operation {
    pub id: usize,
    pub client: ClientId,
    pub kind: OpKind,
    pub invoked_at: SimTime,
    pub completed_at: Option<SimTime>,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct History {
    ops: Vec<Operation>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("history line {line}: {reason}")]
pub struct ParseError {
    pub line: usize,
    pub reason: String,
}

fn fmt_bytes(b: &Bytes) -> String {
    format!("x{}", hex::encode(b))
}

fn fmt_opt(b: &Option<Bytes>) -> String {
    b.as_ref().map_or_else(|| "~".to_string(), fmt_bytes)
}

impl History {
    pub fn new() -> Self {
        History::default()
    }

    pub fn invoke(&mut self, client: ClientId, kind: OpKind, at: SimTime) -> usize {
        let id = self.ops.len();
        self.ops.push(Operation {
            id,
            client,
            kind,
            invoked_at: at,
            completed_at: None,
            outcome: Outcome::Pending,
        });
        id
    }

    pub fn complete(&mut self, id: usize, at: SimTime, outcome: Outcome) {
        let op = &mut self.ops[id];
        debug_assert_eq!(op.outcome, Outcome::Pending);
        op.completed_at = Some(at);
        op.outcome = outcome;
    }

    pub fn ops(&self) -> &[Operation] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Builds a history from complete operation records, renumbering ids.
    pub fn from_ops(ops: Vec<Operation>) -> Self {
        let ops = ops
            .into_iter()
            .enumerate()
            .map(|(id, op)| Operation { id, ..op })
            .collect();
        History { ops }
    }

    /// Operations grouped by key, each group in id order.
    pub fn by_key(&self) -> BTreeMap<Bytes, Vec<&Operation>> {
        let mut out: BTreeMap<Bytes, Vec<&Operation>> = BTreeMap::new();
        for op in &self.ops {
            out.entry(op.kind.key().clone()).or_default().push(op);
        }
        out
    }

    pub fn to_text(&self) -> String {
        // at equal times: earlier ops respond, then invokes, then zero-length responds
        let mut events: Vec<(SimTime, u8, usize)> = Vec::with_capacity(self.ops.len() * 2);
        for op in &self.ops {
            events.push((op.invoked_at, 1, op.id));
            if let (Some(t), false) = (op.completed_at, op.outcome == Outcome::Pending) {
                events.push((t, if t == op.invoked_at { 2 } else { 0 }, op.id));
            }
        }
        events.sort();
        let mut out = String::new();
        for (t, kind, id) in events {
            let op = &self.ops[id];
            let key = fmt_bytes(op.kind.key());
            let name = op.kind.name();
            if kind == 1 {
                let args = match &op.kind {
                    OpKind::Get { .. } | OpKind::Delete { .. } => String::new(),
                    OpKind::Set { value, .. } => format!(" {}", fmt_bytes(value)),
                    OpKind::CasSet { expected, value, .. } => {
                        format!(" {} {}", fmt_opt(expected), fmt_bytes(value))
                    }
                    OpKind::CasDelete { expected, .. } => format!(" {}", fmt_opt(expected)),
                };
                let _ = writeln!(out, "{} {} invoke {name} {key}{args}", t.as_micros(), op.client);
            } else {
                let result = match &op.outcome {
                    Outcome::Value(Some(v)) => format!("value {}", fmt_bytes(v)),
                    Outcome::Value(None) => "absent".to_string(),
                    Outcome::Ok => "ok".to_string(),
                    Outcome::CasMismatch(c) => format!("mismatch {}", fmt_opt(c)),
                    Outcome::Indeterminate => "indeterminate".to_string(),
                    Outcome::Failed => "failed".to_string(),
                    Outcome::Pending => unreachable!(),
                };
                let _ = writeln!(out, "{} {} respond {name} {key} {result}", t.as_micros(), op.client);
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<History, ParseError> {
        let mut history = History::new();
        let mut open: BTreeMap<ClientId, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |reason: &str| ParseError {
                line,
                reason: reason.to_string(),
            };
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = raw.split_whitespace().collect();
            if f.len() < 5 {
                return Err(err("expected at least 5 fields"));
            }
            let t = SimTime(f[0].parse().map_err(|_| err("bad time"))?);
            let client = f[1]
                .strip_prefix('c')
                .and_then(|c| c.parse().ok())
                .map(ClientId)
                .ok_or_else(|| err("bad client"))?;
            let key = parse_bytes(f[4]).ok_or_else(|| err("bad key"))?;
            let args = &f[5..];
            match f[2] {
                "invoke" => {
                    if open.contains_key(&client) {
                        return Err(err("client already has an outstanding operation"));
                    }
                    let kind = match (f[3], args) {
                        ("get", []) => OpKind::Get { key },
                        ("del", []) => OpKind::Delete { key },
                        ("set", [v]) => OpKind::Set {
                            key,
                            value: parse_bytes(v).ok_or_else(|| err("bad value"))?,
                        },
                        ("cas", [e, v]) => OpKind::CasSet {
                            key,
                            expected: parse_opt(e).ok_or_else(|| err("bad expected value"))?,
                            value: parse_bytes(v).ok_or_else(|| err("bad value"))?,
                        },
                        ("casdel", [e]) => OpKind::CasDelete {
                            key,
                            expected: parse_opt(e).ok_or_else(|| err("bad expected value"))?,
                        },
                        _ => return Err(err("unknown operation or wrong argument count")),
                    };
                    let id = history.invoke(client, kind, t);
                    open.insert(client, id);
                }
                "respond" => {
                    let id = open
                        .remove(&client)
                        .ok_or_else(|| err("response without invocation"))?;
                    let op = &history.ops[id];
                    if op.kind.name() != f[3] || op.kind.key() != &key {
                        return Err(err("response does not match the invocation"));
                    }
                    if t < op.invoked_at {
                        return Err(err("response precedes invocation"));
                    }
                    let outcome = match args {
                        ["value", v] => Outcome::Value(Some(parse_bytes(v).ok_or_else(|| err("bad value"))?)),
                        ["absent"] => Outcome::Value(None),
                        ["ok"] => Outcome::Ok,
                        ["mismatch", v] => {
                            Outcome::CasMismatch(parse_opt(v).ok_or_else(|| err("bad value"))?)
                        }
                        ["indeterminate"] => Outcome::Indeterminate,
                        ["failed"] => Outcome::Failed,
                        _ => return Err(err("unknown result")),
                    };
                    history.complete(id, t, outcome);
                }
                _ => return Err(err("expected invoke or respond")),
            }
        }
        Ok(history)
    }
}

fn parse_bytes(s: &str) -> Option<Bytes> {
    hex::decode(s.strip_prefix('x')?).ok().map(Bytes::from)
}

fn parse_opt(s: &str) -> Option<Option<Bytes>> {
    if s == "~" {
        Some(None)
    } else {
        parse_bytes(s).map(Some)
    }
}
