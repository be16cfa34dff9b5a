//! Answers for lost transaction contexts and user-visible outcomes.
//!
//! A participant that has forgotten a transaction can only guess when it
//! is asked to prepare again. Depending on the variant it answers NO (the
//! baseline, which can lie), PREPARE_UNKNOWN, or the decision recorded in
//! its transaction data table.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::state_machine::ProtocolVariant;
use crate::types::{LogStreamId, Time, TxnId, UserOutcome, VoteStatus};

/// 30 minutes at one tick per millisecond.
pub const DEFAULT_TDT_RETENTION: Time = 30 * 60 * 1000;

/// How a root context came to exist.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    #[default]
    Fresh,
    /// Rebuilt after the user's response was lost and the request retried.
    Recreated,
}

/// Decided outcome recorded for one transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TdtEntry {
    pub committed: bool,
    pub decided_at: Time,
}

/// Per-stream table of decided transactions with a retention window.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TransactionDataTable {
    entries: BTreeMap<TxnId, TdtEntry>,
    retention: Time,
}

impl TransactionDataTable {
    pub fn new(retention: Time) -> Self {
        TransactionDataTable { entries: BTreeMap::new(), retention }
    }

    /// Records a decision. The first recorded outcome is kept; a
    /// contradicting later record is returned as an error.
    pub fn record(&mut self, txn: TxnId, committed: bool, now: Time) -> Result<(), TdtEntry> {
        match self.entries.get(&txn) {
            Some(e) if e.committed != committed => Err(*e),
            Some(_) => Ok(()),
            None => {
                self.entries.insert(txn, TdtEntry { committed, decided_at: now });
                Ok(())
            }
        }
    }

    /// Live entry for `txn`, or `None` if absent or past retention.
    pub fn lookup(&self, txn: TxnId, now: Time) -> Option<TdtEntry> {
        self.entries.get(&txn).filter(|e| now <= e.decided_at.saturating_add(self.retention)).copied()
    }

    pub fn retention(&self) -> Time {
        self.retention
    }
}

impl Default for TransactionDataTable {
    fn default() -> Self {
        Self::new(DEFAULT_TDT_RETENTION)
    }
}

/// Vote given by a stream that holds no live context for `txn`.
pub fn resolve_inquiry(tdt: &TransactionDataTable, txn: TxnId, now: Time, variant: &ProtocolVariant) -> VoteStatus {
    if variant.tdt {
        if let Some(e) = tdt.lookup(txn, now) {
            return if e.committed { VoteStatus::Ok } else { VoteStatus::No };
        }
    }
    if variant.unknown_states {
        VoteStatus::PrepareUnknown
    } else {
        VoteStatus::No
    }
}

/// Outcome the root reports once it has decided.
///
/// `committed` is the root's decision. An abort caused by a PREPARE_UNKNOWN
/// vote is reported as TRANS_UNKNOWN only by a recreated root, which cannot
/// tell whether an earlier incarnation committed.
pub fn root_user_response(
    provenance: Provenance,
    votes: &BTreeMap<LogStreamId, VoteStatus>,
    committed: bool,
) -> UserOutcome {
    if committed {
        UserOutcome::Committed
    } else if provenance == Provenance::Recreated && votes.values().any(|v| *v == VoteStatus::PrepareUnknown) {
        UserOutcome::TransUnknown
    } else {
        UserOutcome::Aborted
    }
}

/// Tracks, per transaction, the facts needed to detect a lying participant:
/// whether any node ever committed and which outcomes the user observed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LieDetector {
    committed_somewhere: BTreeSet<TxnId>,
    observed: BTreeMap<TxnId, Vec<UserOutcome>>,
}

impl LieDetector {
    pub fn node_committed(&mut self, txn: TxnId) {
        self.committed_somewhere.insert(txn);
    }

    /// Records an outcome delivered to the user. Returns `true` if it
    /// contradicts a commit that already happened somewhere.
    pub fn user_observed(&mut self, txn: TxnId, outcome: UserOutcome) -> bool {
        self.observed.entry(txn).or_default().push(outcome);
        outcome == UserOutcome::Aborted && self.committed_somewhere.contains(&txn)
    }

    pub fn observed(&self, txn: TxnId) -> &[UserOutcome] {
        self.observed.get(&txn).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn variant(unknown: bool, tdt: bool) -> ProtocolVariant {
        ProtocolVariant { unknown_states: unknown, tdt, ..Default::default() }
    }

    #[test]
    fn inquiry_answers_by_variant() {
        let mut tdt = TransactionDataTable::new(100);
        tdt.record(TxnId(1), true, 10).unwrap();
        let t = TxnId(1);
        assert_eq!(resolve_inquiry(&tdt, t, 50, &variant(true, true)), VoteStatus::Ok);
        assert_eq!(resolve_inquiry(&tdt, t, 111, &variant(true, true)), VoteStatus::PrepareUnknown);
        assert_eq!(resolve_inquiry(&tdt, t, 50, &variant(true, false)), VoteStatus::PrepareUnknown);
        assert_eq!(resolve_inquiry(&tdt, t, 50, &variant(false, false)), VoteStatus::No);
        tdt.record(TxnId(2), false, 10).unwrap();
        assert_eq!(resolve_inquiry(&tdt, TxnId(2), 20, &variant(true, true)), VoteStatus::No);
    }

    #[test]
    fn tdt_outcome_never_changes() {
        let mut tdt = TransactionDataTable::default();
        tdt.record(TxnId(3), true, 0).unwrap();
        assert!(tdt.record(TxnId(3), true, 5).is_ok());
        assert!(tdt.record(TxnId(3), false, 5).is_err());
        assert_eq!(tdt.lookup(TxnId(3), DEFAULT_TDT_RETENTION), Some(TdtEntry { committed: true, decided_at: 0 }));
        assert_eq!(tdt.lookup(TxnId(3), DEFAULT_TDT_RETENTION + 1), None);
    }

    #[test]
    fn user_response_by_provenance() {
        let unknown: BTreeMap<_, _> =
            [(LogStreamId(1), VoteStatus::PrepareUnknown), (LogStreamId(2), VoteStatus::PrepareUnknown)].into();
        assert_eq!(root_user_response(Provenance::Recreated, &unknown, false), UserOutcome::TransUnknown);
        assert_eq!(root_user_response(Provenance::Fresh, &unknown, false), UserOutcome::Aborted);
        let ok: BTreeMap<_, _> = [(LogStreamId(1), VoteStatus::Ok)].into();
        assert_eq!(root_user_response(Provenance::Recreated, &ok, true), UserOutcome::Committed);
        let no: BTreeMap<_, _> = [(LogStreamId(1), VoteStatus::No)].into();
        assert_eq!(root_user_response(Provenance::Recreated, &no, false), UserOutcome::Aborted);
    }

    #[test]
    fn lie_detector_flags_abort_after_commit() {
        let mut d = LieDetector::default();
        assert!(!d.user_observed(TxnId(1), UserOutcome::Aborted));
        d.node_committed(TxnId(2));
        assert!(!d.user_observed(TxnId(2), UserOutcome::TransUnknown));
        assert!(d.user_observed(TxnId(2), UserOutcome::Aborted));
        assert_eq!(d.observed(TxnId(2)), &[UserOutcome::TransUnknown, UserOutcome::Aborted]);
    }
}
