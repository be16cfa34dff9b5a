//! Identifiers, protocol enumerations, messages and replicated log entries.
//!
//! Every type here is a plain value. The `Display` impls produce the
//! canonical one-line `key=value` encoding used in trace files, and the
//! matching `FromStr` impls parse it back.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DecodeError;

/// A replicated log stream. Log streams are the 2PC participants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogStreamId(pub u32);

impl LogStreamId {
    /// Reserved identifier standing in for the user/scheduler that issues
    /// commit requests and receives outcomes.
    pub const SCHEDULER: LogStreamId = LogStreamId(u32::MAX);
}

impl fmt::Display for LogStreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::SCHEDULER {
            f.write_str("user")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for LogStreamId {
    type Err = DecodeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "user" {
            return Ok(Self::SCHEDULER);
        }
        s.parse().map(LogStreamId).map_err(|_| DecodeError::BadValue("stream", s.to_string()))
    }
}

/// A partition (tablet): the unit of data placement and of transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartitionId(pub u32);

impl fmt::Display for PartitionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TxnId(pub u64);

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Simulated time in ticks.
pub type Time = u64;

/// Value of the global logical counter, bumped once per simulator event.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TwoPcState {
    Running,
    Prepare,
    Commit,
    Abort,
    Tombstone,
}

impl TwoPcState {
    pub const ALL: [TwoPcState; 5] =
        [TwoPcState::Running, TwoPcState::Prepare, TwoPcState::Commit, TwoPcState::Abort, TwoPcState::Tombstone];

    pub fn is_decided(self) -> bool {
        matches!(self, TwoPcState::Commit | TwoPcState::Abort)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TwoPcState::Running => "RUNNING",
            TwoPcState::Prepare => "PREPARE",
            TwoPcState::Commit => "COMMIT",
            TwoPcState::Abort => "ABORT",
            TwoPcState::Tombstone => "TOMBSTONE",
        }
    }
}

impl fmt::Display for TwoPcState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TwoPcState {
    type Err = DecodeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| DecodeError::BadValue("state", s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VoteStatus {
    Unknown,
    Ok,
    No,
    PrepareUnknown,
}

impl VoteStatus {
    pub const ALL: [VoteStatus; 4] = [VoteStatus::Unknown, VoteStatus::Ok, VoteStatus::No, VoteStatus::PrepareUnknown];

    /// `true` for votes that force an abort decision.
    pub fn is_negative(self) -> bool {
        matches!(self, VoteStatus::No | VoteStatus::PrepareUnknown)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VoteStatus::Unknown => "UNKNOWN",
            VoteStatus::Ok => "OK",
            VoteStatus::No => "NO",
            VoteStatus::PrepareUnknown => "PREPARE_UNKNOWN",
        }
    }
}

impl fmt::Display for VoteStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VoteStatus {
    type Err = DecodeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| DecodeError::BadValue("status", s.to_string()))
    }
}

/// Outcome reported to the user for a commit request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UserOutcome {
    Committed,
    Aborted,
    TransUnknown,
}

impl UserOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            UserOutcome::Committed => "COMMITTED",
            UserOutcome::Aborted => "ABORTED",
            UserOutcome::TransUnknown => "TRANS_UNKNOWN",
        }
    }
}

impl fmt::Display for UserOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UserOutcome {
    type Err = DecodeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [UserOutcome::Committed, UserOutcome::Aborted, UserOutcome::TransUnknown]
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| DecodeError::BadValue("outcome", s.to_string()))
    }
}

/// Kind of a protocol message. Variant order is part of the message
/// ordering key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    PrepareReq,
    PrepareResp(VoteStatus),
    Commit,
    Abort,
    Ack,
    Release,
}

impl MessageKind {
    pub fn name(self) -> &'static str {
        match self {
            MessageKind::PrepareReq => "PrepareReq",
            MessageKind::PrepareResp(_) => "PrepareResp",
            MessageKind::Commit => "Commit",
            MessageKind::Abort => "Abort",
            MessageKind::Ack => "Ack",
            MessageKind::Release => "Release",
        }
    }

    fn rank(self) -> u8 {
        match self {
            MessageKind::PrepareReq => 0,
            MessageKind::PrepareResp(_) => 1,
            MessageKind::Commit => 2,
            MessageKind::Abort => 3,
            MessageKind::Ack => 4,
            MessageKind::Release => 5,
        }
    }
}

/// A typed protocol message between two log streams (or a stream and the
/// user pseudo-stream).
///
/// The derived ordering is lexicographic over (kind, status, src, dst, txn)
/// and is the total order used for canonical hashing and for breaking ties
/// between same-time events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub src: LogStreamId,
    pub dst: LogStreamId,
    pub txn: TxnId,
}

/// Total-order key of a message; see [`Message`].
pub type MessageKey = (u8, u8, u32, u32, u64);

impl Message {
    pub fn new(kind: MessageKind, src: LogStreamId, dst: LogStreamId, txn: TxnId) -> Self {
        debug_assert_ne!(src, dst, "message to self");
        Message { kind, src, dst, txn }
    }

    pub fn ordering_key(&self) -> MessageKey {
        let status = match self.kind {
            MessageKind::PrepareResp(s) => s as u8,
            _ => 0,
        };
        (self.kind.rank(), status, self.src.0, self.dst.0, self.txn.0)
    }
}

impl fmt::Display for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "kind={}", self.kind.name())?;
        if let MessageKind::PrepareResp(status) = self.kind {
            write!(f, " status={status}")?;
        }
        write!(f, " src={} dst={} txn={}", self.src, self.dst, self.txn)
    }
}

impl FromStr for Message {
    type Err = DecodeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields = Fields::parse(s)?;
        let kind = match fields.get("kind")? {
            "PrepareReq" => MessageKind::PrepareReq,
            "PrepareResp" => MessageKind::PrepareResp(fields.get("status")?.parse()?),
            "Commit" => MessageKind::Commit,
            "Abort" => MessageKind::Abort,
            "Ack" => MessageKind::Ack,
            "Release" => MessageKind::Release,
            other => return Err(DecodeError::BadValue("kind", other.to_string())),
        };
        let src = fields.get("src")?.parse()?;
        let dst = fields.get("dst")?.parse()?;
        let txn = TxnId(parse_num(fields.get("txn")?, "txn")?);
        Ok(Message { kind, src, dst, txn })
    }
}

/// State of one transaction captured into a transfer's migration set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MigratedContext {
    pub txn: TxnId,
    /// 2PC state of the source context when it was collected.
    pub state: TwoPcState,
    /// Sequence numbers of the transaction's 2PC log entries on the source
    /// stream that precede the transfer-out entry.
    pub log_seqs: Vec<u64>,
}

impl fmt::Display for MigratedContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:", self.txn, self.state)?;
        if self.log_seqs.is_empty() {
            f.write_str("-")
        } else {
            let parts: Vec<String> = self.log_seqs.iter().map(u64::to_string).collect();
            f.write_str(&parts.join("/"))
        }
    }
}

impl FromStr for MigratedContext {
    type Err = DecodeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut it = s.split(':');
        let (Some(txn), Some(state), Some(seqs), None) = (it.next(), it.next(), it.next(), it.next()) else {
            return Err(DecodeError::BadValue("ctx", s.to_string()));
        };
        let log_seqs = if seqs == "-" {
            Vec::new()
        } else {
            seqs.split('/').map(|x| parse_num(x, "ctx")).collect::<Result<_, _>>()?
        };
        Ok(MigratedContext { txn: TxnId(parse_num(txn, "ctx")?), state: state.parse()?, log_seqs })
    }
}

/// Payload of a replicated log entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LogEntryKind {
    Prepare {
        parent: Option<LogStreamId>,
        participants: BTreeSet<LogStreamId>,
        incr_parts: BTreeSet<LogStreamId>,
        status: VoteStatus,
    },
    Commit {
        parent: Option<LogStreamId>,
        participants: BTreeSet<LogStreamId>,
        incr_parts: BTreeSet<LogStreamId>,
    },
    Abort {
        parent: Option<LogStreamId>,
        participants: BTreeSet<LogStreamId>,
        incr_parts: BTreeSet<LogStreamId>,
    },
    Clear,
    TransferOut {
        partition: PartitionId,
        dst: LogStreamId,
        /// Transactions affected by the transfer.
        txns: BTreeSet<TxnId>,
    },
    TransferIn {
        partition: PartitionId,
        src: LogStreamId,
        contexts: Vec<MigratedContext>,
    },
}

impl LogEntryKind {
    pub fn name(&self) -> &'static str {
        match self {
            LogEntryKind::Prepare { .. } => "Prepare",
            LogEntryKind::Commit { .. } => "Commit",
            LogEntryKind::Abort { .. } => "Abort",
            LogEntryKind::Clear => "Clear",
            LogEntryKind::TransferOut { .. } => "TransferOut",
            LogEntryKind::TransferIn { .. } => "TransferIn",
        }
    }

    /// Prepare, commit and abort entries: the ones that carry a participant
    /// list and are subject to transfer write blocking.
    pub fn is_2pc(&self) -> bool {
        matches!(self, LogEntryKind::Prepare { .. } | LogEntryKind::Commit { .. } | LogEntryKind::Abort { .. })
    }

    /// `participants ∪ incr_parts` for 2PC entries.
    pub fn participant_union(&self) -> Option<BTreeSet<LogStreamId>> {
        match self {
            LogEntryKind::Prepare { participants, incr_parts, .. }
            | LogEntryKind::Commit { participants, incr_parts, .. }
            | LogEntryKind::Abort { participants, incr_parts, .. } => {
                Some(participants.union(incr_parts).copied().collect())
            }
            _ => None,
        }
    }
}

/// An entry in a simulated log stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LogEntry {
    pub kind: LogEntryKind,
    /// Absent for transfer entries, which carry their affected set instead.
    pub txn: Option<TxnId>,
    pub seq: u64,
    pub ts: Timestamp,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seq={} ts={} kind={}", self.seq, self.ts, self.kind.name())?;
        match self.txn {
            Some(t) => write!(f, " txn={t}")?,
            None => f.write_str(" txn=-")?,
        }
        match &self.kind {
            LogEntryKind::Prepare { parent, participants, incr_parts, status } => write!(
                f,
                " parent={} participants={} incr={} status={status}",
                fmt_opt(parent),
                fmt_set(participants),
                fmt_set(incr_parts)
            ),
            LogEntryKind::Commit { parent, participants, incr_parts }
            | LogEntryKind::Abort { parent, participants, incr_parts } => write!(
                f,
                " parent={} participants={} incr={}",
                fmt_opt(parent),
                fmt_set(participants),
                fmt_set(incr_parts)
            ),
            LogEntryKind::Clear => Ok(()),
            LogEntryKind::TransferOut { partition, dst, txns } => {
                write!(f, " partition={partition} dst={dst} txns={}", fmt_set(txns))
            }
            LogEntryKind::TransferIn { partition, src, contexts } => {
                write!(f, " partition={partition} src={src} contexts=")?;
                if contexts.is_empty() {
                    f.write_str("-")
                } else {
                    let parts: Vec<String> = contexts.iter().map(ToString::to_string).collect();
                    f.write_str(&parts.join(","))
                }
            }
        }
    }
}

impl FromStr for LogEntry {
    type Err = DecodeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields = Fields::parse(s)?;
        let seq = parse_num(fields.get("seq")?, "seq")?;
        let ts = Timestamp(parse_num(fields.get("ts")?, "ts")?);
        let txn = match fields.get("txn")? {
            "-" => None,
            t => Some(TxnId(parse_num(t, "txn")?)),
        };
        let lists = |fields: &Fields| -> Result<_, DecodeError> {
            Ok((
                parse_opt(fields.get("parent")?)?,
                parse_set(fields.get("participants")?)?,
                parse_set(fields.get("incr")?)?,
            ))
        };
        let kind = match fields.get("kind")? {
            "Prepare" => {
                let (parent, participants, incr_parts) = lists(&fields)?;
                LogEntryKind::Prepare { parent, participants, incr_parts, status: fields.get("status")?.parse()? }
            }
            "Commit" => {
                let (parent, participants, incr_parts) = lists(&fields)?;
                LogEntryKind::Commit { parent, participants, incr_parts }
            }
            "Abort" => {
                let (parent, participants, incr_parts) = lists(&fields)?;
                LogEntryKind::Abort { parent, participants, incr_parts }
            }
            "Clear" => LogEntryKind::Clear,
            "TransferOut" => LogEntryKind::TransferOut {
                partition: PartitionId(parse_num(fields.get("partition")?, "partition")?),
                dst: fields.get("dst")?.parse()?,
                txns: parse_set::<u64>(fields.get("txns")?)?.into_iter().map(TxnId).collect(),
            },
            "TransferIn" => {
                let raw = fields.get("contexts")?;
                let contexts =
                    if raw == "-" { Vec::new() } else { raw.split(',').map(str::parse).collect::<Result<_, _>>()? };
                LogEntryKind::TransferIn {
                    partition: PartitionId(parse_num(fields.get("partition")?, "partition")?),
                    src: fields.get("src")?.parse()?,
                    contexts,
                }
            }
            other => return Err(DecodeError::BadValue("kind", other.to_string())),
        };
        Ok(LogEntry { kind, txn, seq, ts })
    }
}

pub(crate) fn fmt_set<T: fmt::Display>(set: &BTreeSet<T>) -> String {
    if set.is_empty() {
        "-".to_string()
    } else {
        set.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

pub(crate) fn fmt_opt<T: fmt::Display>(v: &Option<T>) -> String {
    match v {
        Some(v) => v.to_string(),
        None => "none".to_string(),
    }
}

pub(crate) fn parse_opt<T: FromStr<Err = DecodeError>>(s: &str) -> Result<Option<T>, DecodeError> {
    if s == "none" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

pub(crate) trait FieldValue: Sized + Ord {
    fn parse_field(s: &str) -> Result<Self, DecodeError>;
}

impl FieldValue for LogStreamId {
    fn parse_field(s: &str) -> Result<Self, DecodeError> {
        s.parse()
    }
}

impl FieldValue for u64 {
    fn parse_field(s: &str) -> Result<Self, DecodeError> {
        parse_num(s, "set")
    }
}

pub(crate) fn parse_set<T: FieldValue>(s: &str) -> Result<BTreeSet<T>, DecodeError> {
    if s == "-" {
        return Ok(BTreeSet::new());
    }
    s.split(',').map(T::parse_field).collect()
}

pub(crate) fn parse_num<T: FromStr>(s: &str, field: &'static str) -> Result<T, DecodeError> {
    s.parse().map_err(|_| DecodeError::BadValue(field, s.to_string()))
}

/// `key=value` fields of one encoded record, in order of appearance.
pub(crate) struct Fields<'a> {
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    pub(crate) fn parse(s: &'a str) -> Result<Self, DecodeError> {
        let pairs = s
            .split_whitespace()
            .map(|tok| tok.split_once('=').ok_or_else(|| DecodeError::Malformed(tok.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(Fields { pairs })
    }

    pub(crate) fn pairs(&self) -> &[(&'a str, &'a str)] {
        &self.pairs
    }

    pub(crate) fn get(&self, key: &'static str) -> Result<&'a str, DecodeError> {
        self.pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).ok_or(DecodeError::MissingField(key))
    }
}
