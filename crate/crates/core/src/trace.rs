//! Simulation traces: one record per handler step, log persistence,
//! transfer step, lock event, user outcome and fault, plus per-transaction
//! abstract-state projections used by conformance replay.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::DecodeError;
use crate::state_machine::TxnContext;
use crate::types::{
    fmt_opt, fmt_set, parse_num, parse_opt, parse_set, Fields, LogEntry, LogStreamId, Message, MessageKind,
    PartitionId, Time, TwoPcState, TxnId, UserOutcome, VoteStatus,
};

/// The abstract variables of one node for one transaction. Votes and acks
/// keep only non-default entries (a vote other than UNKNOWN, an ack of
/// `true`), so maps that differ only in defaulted keys compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NodeProjection {
    pub state: TwoPcState,
    pub parent: Option<LogStreamId>,
    pub children: BTreeSet<LogStreamId>,
    pub interm: BTreeSet<LogStreamId>,
    pub votes: BTreeMap<LogStreamId, VoteStatus>,
    pub acks: BTreeSet<LogStreamId>,
}

impl NodeProjection {
    /// A node that holds no context: RUNNING with nothing recorded.
    pub fn absent() -> Self {
        NodeProjection {
            state: TwoPcState::Running,
            parent: None,
            children: BTreeSet::new(),
            interm: BTreeSet::new(),
            votes: BTreeMap::new(),
            acks: BTreeSet::new(),
        }
    }

    pub fn of(ctx: &TxnContext) -> Self {
        NodeProjection {
            state: ctx.state,
            parent: ctx.parent,
            children: ctx.children.clone(),
            interm: ctx.interm_children.clone(),
            votes: ctx.votes.iter().filter(|(_, v)| **v != VoteStatus::Unknown).map(|(k, v)| (*k, *v)).collect(),
            acks: ctx.acks.iter().filter(|(_, a)| **a).map(|(k, _)| *k).collect(),
        }
    }
}

impl fmt::Display for NodeProjection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let votes = if self.votes.is_empty() {
            "-".to_string()
        } else {
            self.votes.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(",")
        };
        write!(
            f,
            "{};{};{};{};{};{}",
            self.state,
            fmt_opt(&self.parent),
            fmt_set(&self.children),
            fmt_set(&self.interm),
            votes,
            fmt_set(&self.acks)
        )
    }
}

impl FromStr for NodeProjection {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, DecodeError> {
        let parts: Vec<&str> = s.split(';').collect();
        let [state, parent, children, interm, votes, acks] = parts[..] else {
            return Err(DecodeError::BadValue("node", s.to_string()));
        };
        let votes = if votes == "-" {
            BTreeMap::new()
        } else {
            votes
                .split(',')
                .map(|kv| {
                    let (k, v) = kv.split_once(':').ok_or_else(|| DecodeError::BadValue("votes", kv.to_string()))?;
                    Ok((k.parse()?, v.parse()?))
                })
                .collect::<Result<_, DecodeError>>()?
        };
        Ok(NodeProjection {
            state: state.parse()?,
            parent: parse_opt(parent)?,
            children: parse_set(children)?,
            interm: parse_set(interm)?,
            votes,
            acks: parse_set(acks)?,
        })
    }
}

/// Abstract state of one transaction over every stream of the world.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Projection {
    pub txn: TxnId,
    pub root: LogStreamId,
    /// Indexed by stream id.
    pub nodes: Vec<NodeProjection>,
    /// Every protocol message ever sent for the transaction.
    pub msgs: BTreeSet<Message>,
}

fn msg_token(m: &Message) -> String {
    let code = match m.kind {
        MessageKind::PrepareReq => "Q",
        MessageKind::PrepareResp(VoteStatus::Ok) => "Y",
        MessageKind::PrepareResp(VoteStatus::No) => "N",
        MessageKind::PrepareResp(VoteStatus::PrepareUnknown) => "U",
        MessageKind::PrepareResp(VoteStatus::Unknown) => "W",
        MessageKind::Commit => "C",
        MessageKind::Abort => "A",
        MessageKind::Ack => "K",
        MessageKind::Release => "R",
    };
    format!("{code}{}>{}", m.src, m.dst)
}

fn parse_msg_token(tok: &str, txn: TxnId) -> Result<Message, DecodeError> {
    let bad = || DecodeError::BadValue("msgs", tok.to_string());
    let mut chars = tok.chars();
    let kind = match chars.next().ok_or_else(bad)? {
        'Q' => MessageKind::PrepareReq,
        'Y' => MessageKind::PrepareResp(VoteStatus::Ok),
        'N' => MessageKind::PrepareResp(VoteStatus::No),
        'U' => MessageKind::PrepareResp(VoteStatus::PrepareUnknown),
        'W' => MessageKind::PrepareResp(VoteStatus::Unknown),
        'C' => MessageKind::Commit,
        'A' => MessageKind::Abort,
        'K' => MessageKind::Ack,
        'R' => MessageKind::Release,
        _ => return Err(bad()),
    };
    let (src, dst) = chars.as_str().split_once('>').ok_or_else(bad)?;
    let (src, dst): (LogStreamId, LogStreamId) = (src.parse()?, dst.parse()?);
    if src == dst {
        return Err(bad());
    }
    Ok(Message { kind, src, dst, txn })
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "proj txn={} root={} n={}", self.txn, self.root, self.nodes.len())?;
        for (i, n) in self.nodes.iter().enumerate() {
            write!(f, " s{i}={n}")?;
        }
        let msgs: Vec<String> = self.msgs.iter().map(msg_token).collect();
        write!(f, " msgs={}", if msgs.is_empty() { "-".to_string() } else { msgs.join(",") })
    }
}

impl FromStr for Projection {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, DecodeError> {
        let body = s.strip_prefix("proj ").ok_or_else(|| DecodeError::Malformed(s.to_string()))?;
        let fields = Fields::parse(body)?;
        let txn = TxnId(parse_num(fields.get("txn")?, "txn")?);
        let root = fields.get("root")?.parse()?;
        let n: usize = parse_num(fields.get("n")?, "n")?;
        let mut nodes = Vec::with_capacity(n);
        for (i, (key, value)) in fields.pairs().iter().skip(3).take(n).enumerate() {
            if *key != format!("s{i}") {
                return Err(DecodeError::MissingField("s<i>"));
            }
            nodes.push(value.parse()?);
        }
        if nodes.len() != n {
            return Err(DecodeError::MissingField("s<i>"));
        }
        let raw = fields.get("msgs")?;
        let msgs = if raw == "-" {
            BTreeSet::new()
        } else {
            raw.split(',').map(|t| parse_msg_token(t, txn)).collect::<Result<_, _>>()?
        };
        Ok(Projection { txn, root, nodes, msgs })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceRecord {
    Handler {
        time: Time,
        stream: LogStreamId,
        txn: TxnId,
        handler: &'static str,
        input: String,
        before: TwoPcState,
        after: TwoPcState,
        outputs: Vec<String>,
    },
    Log {
        time: Time,
        stream: LogStreamId,
        entry: LogEntry,
    },
    Transfer {
        time: Time,
        index: usize,
        partition: PartitionId,
        src: LogStreamId,
        dst: LogStreamId,
        step: String,
    },
    Lock {
        time: Time,
        stream: LogStreamId,
        scope: String,
        holder: usize,
        acquired: bool,
    },
    Outcome {
        time: Time,
        txn: TxnId,
        outcome: UserOutcome,
        delivered: bool,
    },
    Fault {
        time: Time,
        detail: String,
    },
    Proj(Projection),
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceRecord::Handler { time, stream, txn, handler, input, before, after, outputs } => write!(
                f,
                "t={time} handler stream={stream} txn={txn} name={handler} input=[{input}] before={before} after={after} out=[{}]",
                outputs.join("; ")
            ),
            TraceRecord::Log { time, stream, entry } => write!(f, "t={time} log stream={stream} {entry}"),
            TraceRecord::Transfer { time, index, partition, src, dst, step } => write!(
                f,
                "t={time} transfer idx={index} partition={partition} src={src} dst={dst} step={step}"
            ),
            TraceRecord::Lock { time, stream, scope, holder, acquired } => write!(
                f,
                "t={time} lock stream={stream} scope={scope} holder={holder} op={}",
                if *acquired { "acquire" } else { "release" }
            ),
            TraceRecord::Outcome { time, txn, outcome, delivered } => write!(
                f,
                "t={time} outcome txn={txn} result={outcome} delivered={delivered}"
            ),
            TraceRecord::Fault { time, detail } => write!(f, "t={time} fault {detail}"),
            TraceRecord::Proj(p) => write!(f, "{p}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }

    /// SHA-256 of the rendered trace, lowercase hex.
    pub fn hash(&self) -> String {
        hash_text(&self.render())
    }

    pub fn projections(&self) -> impl Iterator<Item = &Projection> {
        self.records.iter().filter_map(|r| match r {
            TraceRecord::Proj(p) => Some(p),
            _ => None,
        })
    }

    pub fn handlers(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| matches!(r, TraceRecord::Handler { .. }))
    }
}

pub fn hash_text(text: &str) -> String {
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

/// Extracts the projection lines of a rendered trace, in order.
pub fn parse_projections(text: &str) -> Result<Vec<Projection>, DecodeError> {
    text.lines().filter(|l| l.starts_with("proj ")).map(str::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_node(n: u32) -> impl Strategy<Value = NodeProjection> {
        let id = move || (0..n).prop_map(LogStreamId);
        (
            prop::sample::select(TwoPcState::ALL.to_vec()),
            prop::option::of(id()),
            prop::collection::btree_set(id(), 0..3),
            prop::collection::btree_set(id(), 0..3),
            prop::collection::btree_map(
                id(),
                prop::sample::select(vec![VoteStatus::Ok, VoteStatus::No, VoteStatus::PrepareUnknown]),
                0..3,
            ),
            prop::collection::btree_set(id(), 0..3),
        )
            .prop_map(|(state, parent, children, interm, votes, acks)| NodeProjection {
                state,
                parent,
                children,
                interm,
                votes,
                acks,
            })
    }

    fn arb_projection() -> impl Strategy<Value = Projection> {
        (2u32..5).prop_flat_map(|n| {
            let msg = (0u8..9, 0..n, 1..n).prop_map(move |(k, s, off)| {
                let d = (s + off) % n;
                {
                    let kind = match k {
                        0 => MessageKind::PrepareReq,
                        1 => MessageKind::PrepareResp(VoteStatus::Ok),
                        2 => MessageKind::PrepareResp(VoteStatus::No),
                        3 => MessageKind::PrepareResp(VoteStatus::PrepareUnknown),
                        4 => MessageKind::PrepareResp(VoteStatus::Unknown),
                        5 => MessageKind::Commit,
                        6 => MessageKind::Abort,
                        7 => MessageKind::Ack,
                        _ => MessageKind::Release,
                    };
                    Message { kind, src: LogStreamId(s), dst: LogStreamId(d), txn: TxnId(3) }
                }
            });
            (prop::collection::vec(arb_node(n), n as usize), prop::collection::btree_set(msg, 0..6), 0..n)
                .prop_map(|(nodes, msgs, root)| Projection { txn: TxnId(3), root: LogStreamId(root), nodes, msgs })
        })
    }

    proptest! {
        #[test]
        fn projection_round_trips(p in arb_projection()) {
            let text = p.to_string();
            prop_assert_eq!(text.parse::<Projection>().unwrap(), p);
        }
    }

    #[test]
    fn projection_ignores_default_entries() {
        let mut ctx = TxnContext::root(TxnId(1), LogStreamId(0), [LogStreamId(1)].into());
        let a = NodeProjection::of(&ctx);
        ctx.votes.clear();
        ctx.acks.clear();
        assert_eq!(NodeProjection::of(&ctx), a);
        assert_eq!(a.children, [LogStreamId(1)].into());
    }

    #[test]
    fn hash_is_stable_hex() {
        let t = Trace::default();
        assert_eq!(t.hash(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(parse_projections("t=0 fault x\n").unwrap(), vec![]);
    }
}
