//! Partition transfer bookkeeping and the correctness predicates that
//! audit it: log-stream-tree construction, the minimum-set check and the
//! transfer principle over persisted logs.
//!
//! The transfer procedure itself runs inside the simulator, which owns the
//! event loop; the types here describe its steps and outcomes.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::log_engine::LogStream;
use crate::types::{LogEntry, LogEntryKind, LogStreamId, MigratedContext, PartitionId, Time, Timestamp, TxnId};

/// One scheduled partition migration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransferEvent {
    pub at: Time,
    pub partition: PartitionId,
    pub src: LogStreamId,
    pub dst: LogStreamId,
}

/// Progress of a transfer through the transfer procedure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransferPhase {
    /// Waiting for the source stream's transfer lock.
    Waiting,
    /// Lock held; waiting for in-flight 2PC logs on the source to persist.
    Draining,
    /// Affected transactions blocked; transfer-out log in flight.
    OutPending {
        migrated: Vec<MigratedContext>,
    },
    /// Transfer-out persisted at `ts`; transfer-in log in flight on dst.
    InPending {
        ts: Timestamp,
        migrated: Vec<MigratedContext>,
    },
    Done {
        ts: Timestamp,
    },
    RolledBack,
}

/// Runtime state of one transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferState {
    pub event: TransferEvent,
    pub phase: TransferPhase,
    /// Transactions blocked by this transfer.
    pub affected: BTreeSet<TxnId>,
}

impl TransferState {
    pub fn new(event: TransferEvent) -> Self {
        TransferState { event, phase: TransferPhase::Waiting, affected: BTreeSet::new() }
    }
}

/// Coordinator-rooted closure of a transaction's streams under recorded
/// participants and transfer destinations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogStreamTree {
    pub root: LogStreamId,
    pub nodes: BTreeSet<LogStreamId>,
    /// (parent, child) pairs in discovery order; a stream reached twice is
    /// visited once, so cycles collapse.
    pub edges: Vec<(LogStreamId, LogStreamId)>,
}

/// Builds the log stream tree of `txn`: starting at `root`, follow every
/// child, pending child and transfer destination recorded for the
/// transaction on each reached stream.
pub fn build_log_stream_tree(
    streams: &BTreeMap<LogStreamId, LogStream>,
    txn: TxnId,
    root: LogStreamId,
) -> LogStreamTree {
    let mut nodes = BTreeSet::from([root]);
    let mut edges = Vec::new();
    let mut queue = VecDeque::from([root]);
    while let Some(s) = queue.pop_front() {
        let Some(stream) = streams.get(&s) else { continue };
        let mut next: BTreeSet<LogStreamId> = BTreeSet::new();
        if let Some(ctx) = stream.contexts.get(&txn) {
            next.extend(ctx.children.iter().chain(&ctx.interm_children).chain(&ctx.incr_children));
        }
        for e in stream.entries() {
            match &e.kind {
                LogEntryKind::TransferOut { dst, txns, .. } if txns.contains(&txn) => {
                    next.insert(*dst);
                }
                k if e.txn == Some(txn) => {
                    if let Some(u) = k.participant_union() {
                        next.extend(u);
                    }
                }
                _ => {}
            }
        }
        for c in next {
            if nodes.insert(c) {
                edges.push((s, c));
                queue.push_back(c);
            }
        }
    }
    LogStreamTree { root, nodes, edges }
}

/// Passes iff every stream in `required` (the final homes of the
/// transaction's partitions) is in `participants`. Returns the missing ones.
pub fn check_minimum_set(
    required: &BTreeSet<LogStreamId>,
    participants: &BTreeSet<LogStreamId>,
) -> Result<(), BTreeSet<LogStreamId>> {
    let missing: BTreeSet<LogStreamId> = required.difference(participants).copied().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(missing)
    }
}

/// A breach of the transfer principle found in persisted logs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PrincipleViolation {
    /// A 2PC log written before the transfer-out entry is missing from the
    /// migrated context set.
    NotMigrated { stream: LogStreamId, transfer_seq: u64, txn: TxnId, entry_seq: u64 },
    /// A 2PC log written after the transfer-out entry omits the destination.
    MissingDestination { stream: LogStreamId, transfer_seq: u64, txn: TxnId, entry_seq: u64, dst: LogStreamId },
    /// A transfer-out entry has no matching transfer-in on the destination.
    NoTransferIn { stream: LogStreamId, transfer_seq: u64 },
}

impl fmt::Display for PrincipleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrincipleViolation::NotMigrated { stream, transfer_seq, txn, entry_seq } => write!(
                f,
                "stream {stream}: entry seq={entry_seq} of txn {txn} precedes transfer-out seq={transfer_seq} but was not migrated"
            ),
            PrincipleViolation::MissingDestination { stream, transfer_seq, txn, entry_seq, dst } => write!(
                f,
                "stream {stream}: entry seq={entry_seq} of txn {txn} follows transfer-out seq={transfer_seq} but omits destination {dst}"
            ),
            PrincipleViolation::NoTransferIn { stream, transfer_seq } => {
                write!(f, "stream {stream}: transfer-out seq={transfer_seq} has no transfer-in")
            }
        }
    }
}

/// Checks that for every transfer-out entry, (a) every earlier 2PC entry
/// of each affected transaction on the source was migrated, and (b) every
/// later one names the destination among its participants.
pub fn check_transfer_principle(logs: &BTreeMap<LogStreamId, Vec<LogEntry>>) -> Result<(), Vec<PrincipleViolation>> {
    let mut violations = Vec::new();
    // Matching transfer-ins are consumed in order per (src, dst, partition).
    let mut used_in: BTreeSet<(LogStreamId, u64)> = BTreeSet::new();
    for (stream, entries) in logs {
        for out in entries {
            let LogEntryKind::TransferOut { partition, dst, txns } = &out.kind else { continue };
            let transfer_in = logs.get(dst).and_then(|dst_log| {
                dst_log.iter().find(|e| {
                    matches!(&e.kind, LogEntryKind::TransferIn { partition: p, src, .. }
                        if p == partition && src == stream)
                        && !used_in.contains(&(*dst, e.seq))
                })
            });
            let migrated: BTreeMap<TxnId, &MigratedContext> = match transfer_in {
                Some(e) => {
                    used_in.insert((*dst, e.seq));
                    match &e.kind {
                        LogEntryKind::TransferIn { contexts, .. } => contexts.iter().map(|c| (c.txn, c)).collect(),
                        _ => unreachable!(),
                    }
                }
                None => {
                    violations.push(PrincipleViolation::NoTransferIn { stream: *stream, transfer_seq: out.seq });
                    BTreeMap::new()
                }
            };
            for txn in txns {
                for e in entries.iter().filter(|e| e.txn == Some(*txn) && e.kind.is_2pc()) {
                    if e.seq < out.seq {
                        let ok = migrated.get(txn).is_some_and(|c| c.log_seqs.contains(&e.seq));
                        if !ok && transfer_in.is_some() {
                            violations.push(PrincipleViolation::NotMigrated {
                                stream: *stream,
                                transfer_seq: out.seq,
                                txn: *txn,
                                entry_seq: e.seq,
                            });
                        }
                    } else if !e.kind.participant_union().unwrap_or_default().contains(dst) {
                        violations.push(PrincipleViolation::MissingDestination {
                            stream: *stream,
                            transfer_seq: out.seq,
                            txn: *txn,
                            entry_seq: e.seq,
                            dst: *dst,
                        });
                    }
                }
            }
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state_machine::TxnContext;
    use crate::types::{TwoPcState, VoteStatus};

    fn ls(n: u32) -> LogStreamId {
        LogStreamId(n)
    }

    fn set(ids: &[u32]) -> BTreeSet<LogStreamId> {
        ids.iter().map(|i| LogStreamId(*i)).collect()
    }

    fn entry(kind: LogEntryKind, txn: Option<u64>, seq: u64, ts: u64) -> LogEntry {
        LogEntry { kind, txn: txn.map(TxnId), seq, ts: Timestamp(ts) }
    }

    fn prepare(incr: &[u32]) -> LogEntryKind {
        LogEntryKind::Prepare {
            parent: Some(ls(0)),
            participants: BTreeSet::new(),
            incr_parts: set(incr),
            status: VoteStatus::Ok,
        }
    }

    fn transfer_pair(migrated_seqs: Vec<u64>) -> (LogEntry, LogEntry) {
        let out = entry(
            LogEntryKind::TransferOut { partition: PartitionId(1), dst: ls(2), txns: [TxnId(7)].into() },
            None,
            1,
            20,
        );
        let inn = entry(
            LogEntryKind::TransferIn {
                partition: PartitionId(1),
                src: ls(1),
                contexts: vec![MigratedContext { txn: TxnId(7), state: TwoPcState::Running, log_seqs: migrated_seqs }],
            },
            None,
            0,
            21,
        );
        (out, inn)
    }

    fn stream_with(id: u32, txn: u64, ctx: TxnContext) -> LogStream {
        let mut s = LogStream::new(ls(id), 10);
        s.contexts.insert(TxnId(txn), ctx);
        s
    }

    #[test]
    fn tree_follows_recorded_destinations() {
        // Coordinator 0 -> A(1); A records {B(2), C(3)}; B records {C}.
        let mut streams = BTreeMap::new();
        let root = TxnContext::root(TxnId(1), ls(0), set(&[1]));
        let mut a = TxnContext::new(TxnId(1), ls(1));
        a.add_intermediate_participant(ls(2));
        a.add_intermediate_participant(ls(3));
        let mut b = TxnContext::new(TxnId(1), ls(2));
        b.add_intermediate_participant(ls(3));
        streams.insert(ls(0), stream_with(0, 1, root));
        streams.insert(ls(1), stream_with(1, 1, a));
        streams.insert(ls(2), stream_with(2, 1, b));
        streams.insert(ls(3), stream_with(3, 1, TxnContext::new(TxnId(1), ls(3))));
        let tree = build_log_stream_tree(&streams, TxnId(1), ls(0));
        assert_eq!(tree.nodes, set(&[0, 1, 2, 3]));
        assert_eq!(tree.edges, vec![(ls(0), ls(1)), (ls(1), ls(2)), (ls(1), ls(3))]);
    }

    #[test]
    fn tree_without_transfers_is_initial_streams() {
        let mut streams = BTreeMap::new();
        streams.insert(ls(0), stream_with(0, 1, TxnContext::root(TxnId(1), ls(0), set(&[1, 2]))));
        let tree = build_log_stream_tree(&streams, TxnId(1), ls(0));
        assert_eq!(tree.nodes, set(&[0, 1, 2]));
    }

    #[test]
    fn circular_records_visit_each_stream_once() {
        let mut streams = BTreeMap::new();
        let mut a = TxnContext::root(TxnId(1), ls(1), set(&[2]));
        a.add_intermediate_participant(ls(3));
        let mut b = TxnContext::new(TxnId(1), ls(2));
        b.add_intermediate_participant(ls(1));
        streams.insert(ls(1), stream_with(1, 1, a));
        streams.insert(ls(2), stream_with(2, 1, b));
        let tree = build_log_stream_tree(&streams, TxnId(1), ls(1));
        assert_eq!(tree.nodes, set(&[1, 2, 3]));
        assert_eq!(tree.edges.len(), 2);
    }

    #[test]
    fn minimum_set_checks() {
        // Naive list {A, B} misses C, the final home of a migrated partition.
        assert_eq!(check_minimum_set(&set(&[2, 3]), &set(&[1, 2])), Err(set(&[3])));
        assert!(check_minimum_set(&set(&[2, 3]), &set(&[0, 1, 2, 3])).is_ok());
        assert!(check_minimum_set(&set(&[2]), &set(&[0, 1, 2, 3, 4])).is_ok());
    }

    #[test]
    fn principle_holds_on_compliant_logs() {
        let (out, inn) = transfer_pair(vec![0]);
        let logs = BTreeMap::from([
            (ls(1), vec![entry(prepare(&[]), Some(7), 0, 10), out, entry(prepare(&[2]), Some(7), 2, 30)]),
            (ls(2), vec![inn]),
        ]);
        assert!(check_transfer_principle(&logs).is_ok());
        assert!(check_transfer_principle(&BTreeMap::new()).is_ok());
    }

    #[test]
    fn principle_flags_missing_destination() {
        let (out, inn) = transfer_pair(vec![0]);
        let logs = BTreeMap::from([
            (ls(1), vec![entry(prepare(&[]), Some(7), 0, 10), out, entry(prepare(&[]), Some(7), 2, 30)]),
            (ls(2), vec![inn]),
        ]);
        let err = check_transfer_principle(&logs).unwrap_err();
        assert_eq!(
            err,
            vec![PrincipleViolation::MissingDestination {
                stream: ls(1),
                transfer_seq: 1,
                txn: TxnId(7),
                entry_seq: 2,
                dst: ls(2)
            }]
        );
    }

    #[test]
    fn principle_flags_unmigrated_log() {
        let (out, inn) = transfer_pair(vec![]);
        let logs = BTreeMap::from([(ls(1), vec![entry(prepare(&[]), Some(7), 0, 10), out]), (ls(2), vec![inn])]);
        assert!(matches!(
            check_transfer_principle(&logs).unwrap_err()[0],
            PrincipleViolation::NotMigrated { entry_seq: 0, .. }
        ));
    }
}
