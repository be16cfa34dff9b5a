//! Simulated replicated log streams.
//!
//! Replication is reduced to a single completion latency per append. Appends
//! complete in submission order, so an entry never persists before one
//! submitted earlier on the same stream. Sequence numbers are assigned at
//! submission and are final once the entry persists.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::state_machine::{LogPurpose, Output, TxnContext};
use crate::types::{LogEntry, LogEntryKind, LogStreamId, PartitionId, Time, Timestamp, TxnId};
use crate::unknown::TransactionDataTable;

/// Why an append was submitted; routed back to the owner on completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AppendPurpose {
    Txn(LogPurpose),
    TransferOut(usize),
    TransferIn(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingAppend {
    pub seq: u64,
    pub kind: LogEntryKind,
    pub txn: Option<TxnId>,
    pub sync: bool,
    pub completes_at: Time,
    pub purpose: AppendPurpose,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AppendError {
    #[error("transaction {0} is blocked from logging by a transfer")]
    Blocked(TxnId),
}

/// One log stream: its log, the transaction contexts it hosts, its
/// partitions and its transfer locks.
#[derive(Debug, Clone)]
pub struct LogStream {
    pub id: LogStreamId,
    entries: Vec<LogEntry>,
    pending: VecDeque<PendingAppend>,
    pub contexts: BTreeMap<TxnId, TxnContext>,
    /// Stream-level transfer lock: holder is a transfer index.
    pub transfer_lock: Option<usize>,
    pub hosted: BTreeSet<PartitionId>,
    pub tdt: TransactionDataTable,
    next_seq: u64,
    last_completion: Time,
}

impl LogStream {
    pub fn new(id: LogStreamId, tdt_retention: Time) -> Self {
        LogStream {
            id,
            entries: Vec::new(),
            pending: VecDeque::new(),
            contexts: BTreeMap::new(),
            transfer_lock: None,
            hosted: BTreeSet::new(),
            tdt: TransactionDataTable::new(tdt_retention),
            next_seq: 0,
            last_completion: 0,
        }
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn pending(&self) -> impl Iterator<Item = &PendingAppend> {
        self.pending.iter()
    }

    /// Whether any prepare/commit/abort append is still in flight.
    pub fn has_pending_2pc(&self) -> bool {
        self.pending.iter().any(|p| p.kind.is_2pc())
    }

    /// Queues an entry. Returns its sequence number and completion time.
    pub fn append(
        &mut self,
        kind: LogEntryKind,
        txn: Option<TxnId>,
        sync: bool,
        purpose: AppendPurpose,
        now: Time,
        latency: Time,
    ) -> Result<(u64, Time), AppendError> {
        if let (true, Some(t)) = (kind.is_2pc(), txn) {
            if self.contexts.get(&t).is_some_and(|c| c.blocked_from_logging) {
                return Err(AppendError::Blocked(t));
            }
        }
        let completes_at = (now + latency).max(self.last_completion);
        self.last_completion = completes_at;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.push_back(PendingAppend { seq, kind, txn, sync, completes_at, purpose });
        Ok((seq, completes_at))
    }

    /// Persists the oldest pending append, which must be `seq`.
    pub fn complete(&mut self, seq: u64, ts: Timestamp) -> Option<(LogEntry, AppendPurpose, bool)> {
        if self.pending.front().map(|p| p.seq) != Some(seq) {
            return None;
        }
        let p = self.pending.pop_front()?;
        if let (true, Some(t)) = (p.kind.is_2pc(), p.txn) {
            assert!(
                !self.contexts.get(&t).is_some_and(|c| c.blocked_from_logging),
                "2PC log for blocked transaction {t} persisted on stream {}",
                self.id
            );
        }
        let entry = LogEntry { kind: p.kind, txn: p.txn, seq: p.seq, ts };
        self.entries.push(entry.clone());
        Some((entry, p.purpose, p.sync))
    }

    /// Drops the context of `txn`; a no-op if absent.
    pub fn reclaim_context(&mut self, txn: TxnId) {
        self.contexts.remove(&txn);
    }

    /// Persisted entries relevant to `txn`, oldest first: its own 2PC and
    /// clear entries and transfer-in entries that migrated it here.
    pub fn entries_for(&self, txn: TxnId) -> Vec<&LogEntry> {
        self.entries
            .iter()
            .filter(|e| match &e.kind {
                LogEntryKind::TransferIn { contexts, .. } => contexts.iter().any(|c| c.txn == txn),
                LogEntryKind::TransferOut { .. } => false,
                _ => e.txn == Some(txn),
            })
            .collect()
    }

    /// Sequence numbers of all entries (persisted or pending) written for
    /// `txn`'s 2PC protocol on this stream.
    pub fn txn_log_seqs(&self, txn: TxnId) -> Vec<u64> {
        self.entries
            .iter()
            .filter(|e| e.txn == Some(txn) && e.kind.is_2pc())
            .map(|e| e.seq)
            .chain(self.pending.iter().filter(|p| p.txn == Some(txn) && p.kind.is_2pc()).map(|p| p.seq))
            .collect()
    }

    /// Crash and immediate recovery. Pending appends and all volatile state
    /// are dropped; contexts are rebuilt from the persisted log. Returns the
    /// dropped appends and, per recovered transaction, the outputs that
    /// re-drive it.
    pub fn crash_and_recover(
        &mut self,
        is_root: impl Fn(TxnId) -> bool,
    ) -> (Vec<PendingAppend>, Vec<(TxnId, Vec<Output>)>) {
        let dropped: Vec<PendingAppend> = self.pending.drain(..).collect();
        self.next_seq = self.entries.last().map_or(0, |e| e.seq + 1);
        self.last_completion = 0;
        self.transfer_lock = None;
        self.contexts.clear();
        let txns: BTreeSet<TxnId> = self
            .entries
            .iter()
            .flat_map(|e| match &e.kind {
                LogEntryKind::TransferIn { contexts, .. } => contexts.iter().map(|c| c.txn).collect(),
                _ => e.txn.into_iter().collect::<Vec<_>>(),
            })
            .collect();
        let mut redrive = Vec::new();
        for txn in txns {
            let mine = self.entries_for(txn);
            let kinds: Vec<&LogEntryKind> = mine.iter().map(|e| &e.kind).collect();
            let Some((mut ctx, out)) = TxnContext::recover(txn, self.id, is_root(txn), &kinds) else {
                continue;
            };
            let last_2pc = mine.iter().rev().find(|e| e.kind.is_2pc());
            if let Some(e) = last_2pc {
                ctx.last_2pc_log_ts = e.ts;
            }
            let after = last_2pc.map_or(0, |e| e.seq + 1);
            for e in self.entries.iter().filter(|e| e.seq >= after) {
                if let LogEntryKind::TransferOut { dst, txns, .. } = &e.kind {
                    if txns.contains(&txn) && ctx.last_2pc_log_ts < e.ts {
                        ctx.add_intermediate_participant(*dst);
                    }
                }
            }
            self.contexts.insert(txn, ctx);
            redrive.push((txn, out));
        }
        (dropped, redrive)
    }

    /// Canonical text rendering of the persisted log, one entry per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!("stream={} {e}\n", self.id));
        }
        s
    }
}
