//! Conformance replay: every consecutive pair of projections in a trace
//! must be a stutter or one enabled action of the model.

use std::collections::BTreeMap;

use thiserror::Error;
use treecommit::trace::Projection;
use treecommit::types::TxnId;

use crate::actions::{successors, Action, ActionBounds};
use crate::state::{StateError, WorldState};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("txn {txn} step {step}: {source}")]
    State { txn: TxnId, step: usize, source: StateError },
    #[error("txn {txn}: first projection is not an initial state:\n  {state}")]
    NotInitial { txn: TxnId, state: String },
    #[error("txn {txn} step {step}: no action leads from\n  {from}\nto\n  {to}")]
    Divergence { txn: TxnId, step: usize, from: String, to: String },
}

/// Actions matched per transaction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayReport {
    pub steps: BTreeMap<TxnId, Vec<Option<Action>>>,
}

impl ReplayReport {
    pub fn transitions(&self) -> usize {
        self.steps.values().map(Vec::len).sum()
    }
}

fn is_initial(w: &WorldState) -> bool {
    w.msgs.iter().all(|m| *m == 0)
        && w.nodes.iter().all(|v| {
            v.rm == treecommit::types::TwoPcState::Running
                && v.parent.is_none()
                && v.interm == 0
                && v.vote_ok == 0
                && v.vote_no == 0
                && v.acks == 0
        })
}

/// Checks the projections of each transaction independently. `None` in the
/// report marks a stutter.
pub fn conformance_replay(projections: &[Projection]) -> Result<ReplayReport, ReplayError> {
    let mut by_txn: BTreeMap<TxnId, Vec<&Projection>> = BTreeMap::new();
    for p in projections {
        by_txn.entry(p.txn).or_default().push(p);
    }
    let bounds = ActionBounds::unbounded();
    let mut report = ReplayReport::default();
    for (txn, ps) in by_txn {
        let states = ps
            .iter()
            .enumerate()
            .map(|(step, p)| WorldState::from_projection(p).map_err(|source| ReplayError::State { txn, step, source }))
            .collect::<Result<Vec<_>, _>>()?;
        if !is_initial(&states[0]) {
            return Err(ReplayError::NotInitial { txn, state: ps[0].to_string() });
        }
        let mut matched = Vec::new();
        for (step, pair) in states.windows(2).enumerate() {
            let (from, to) = (&pair[0], &pair[1]);
            if from.same_vars(to) {
                matched.push(None);
                continue;
            }
            let hit = successors(from, &bounds).into_iter().find(|(_, s)| s.same_vars(to)).map(|(a, _)| a);
            match hit {
                Some(a) => matched.push(Some(a)),
                None => {
                    return Err(ReplayError::Divergence {
                        txn,
                        step: step + 1,
                        from: ps[step].to_string(),
                        to: ps[step + 1].to_string(),
                    })
                }
            }
        }
        report.steps.insert(txn, matched);
    }
    Ok(report)
}
