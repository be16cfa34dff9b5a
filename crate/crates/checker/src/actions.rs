//! The transition relation: one function per protocol action, each
//! returning the successor when its guard holds.

use std::fmt;

use treecommit::state_machine::Mutation;
use treecommit::types::TwoPcState;

use crate::state::{bit, members, MsgKind, NodeSet, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    RootStartToCommit,
    Handle2pcPrepareRequest { n: usize, src: usize },
    Handle2pcDuplicatePrepareRequest { n: usize, src: usize },
    HandleOrphan2pcPrepareRequest { n: usize, src: usize },
    Handle2pcPrepareResponse { n: usize, src: usize, ok: bool },
    Handle2pcCommitDecided { n: usize },
    Handle2pcAbortDecided { n: usize },
    Handle2pcCommitRequest { n: usize, src: usize },
    Handle2pcAbortRequest { n: usize, src: usize },
    HandleOrphan2pcCommitRequest { n: usize, src: usize },
    HandleOrphan2pcAbortRequest { n: usize, src: usize },
    InternalAbort { n: usize },
    Handle2pcAckResponse { n: usize, src: usize },
    ForgetCtx { n: usize },
    AddIntermediateParticipant { n: usize, new_child: usize },
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Action::*;
        match *self {
            RootStartToCommit => write!(f, "RootStartToCommit"),
            Handle2pcPrepareRequest { n, src } => write!(f, "Handle2pcPrepareRequest({n}) from {src}"),
            Handle2pcDuplicatePrepareRequest { n, src } => {
                write!(f, "Handle2pcDuplicatePrepareRequest({n}) from {src}")
            }
            HandleOrphan2pcPrepareRequest { n, src } => write!(f, "HandleOrphan2pcPrepareRequest({n}) from {src}"),
            Handle2pcPrepareResponse { n, src, ok } => {
                write!(f, "Handle2pcPrepareResponse({n}) from {src} {}", if ok { "ok" } else { "no" })
            }
            Handle2pcCommitDecided { n } => write!(f, "Handle2pcCommitDecided({n})"),
            Handle2pcAbortDecided { n } => write!(f, "Handle2pcAbortDecided({n})"),
            Handle2pcCommitRequest { n, src } => write!(f, "Handle2pcCommitRequest({n}) from {src}"),
            Handle2pcAbortRequest { n, src } => write!(f, "Handle2pcAbortRequest({n}) from {src}"),
            HandleOrphan2pcCommitRequest { n, src } => write!(f, "HandleOrphan2pcCommitRequest({n}) from {src}"),
            HandleOrphan2pcAbortRequest { n, src } => write!(f, "HandleOrphan2pcAbortRequest({n}) from {src}"),
            InternalAbort { n } => write!(f, "InternalAbort({n})"),
            Handle2pcAckResponse { n, src } => write!(f, "Handle2pcAckResponse({n}) from {src}"),
            ForgetCtx { n } => write!(f, "ForgetCtx({n})"),
            AddIntermediateParticipant { n, new_child } => write!(f, "AddIntermediateParticipant({n}, {new_child})"),
        }
    }
}

/// Limits on the actions that could otherwise fire without bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionBounds {
    pub max_dynamic_adds: u8,
    /// `None` leaves InternalAbort unbounded (it fires at most once per node).
    pub max_internal_aborts: Option<u8>,
    pub mutation: Option<Mutation>,
}

impl ActionBounds {
    /// No bounds: every action of the model is available.
    pub fn unbounded() -> Self {
        ActionBounds { max_dynamic_adds: u8::MAX, max_internal_aborts: None, mutation: None }
    }
}

fn merge(w: &mut WorldState, n: usize) -> NodeSet {
    let v = &mut w.nodes[n];
    v.children |= v.interm;
    v.interm = 0;
    v.children
}

fn fan_out(w: &mut WorldState, kind: MsgKind, n: usize, to: NodeSet) {
    for c in members(to) {
        w.send(kind, n, c);
    }
}

fn record_parent(w: &mut WorldState, n: usize, src: usize) {
    if w.nodes[n].parent.is_none() {
        w.nodes[n].parent = Some(src as u8);
    }
}

fn all_votes_ok(w: &WorldState, n: usize) -> bool {
    let v = &w.nodes[n];
    v.children & !v.vote_ok == 0
}

fn any_vote_no(w: &WorldState, n: usize) -> bool {
    let v = &w.nodes[n];
    v.children & v.vote_no != 0
}

fn all_votes_in(w: &WorldState, n: usize) -> bool {
    let v = &w.nodes[n];
    v.children & !(v.vote_ok | v.vote_no) == 0
}

fn all_acked(w: &WorldState, n: usize) -> bool {
    let v = &w.nodes[n];
    v.children & !v.acks == 0
}

/// Every enabled action with its successor.
pub fn successors(w: &WorldState, b: &ActionBounds) -> Vec<(Action, WorldState)> {
    use Action::*;
    use TwoPcState::*;
    let n_nodes = w.n();
    let root = w.root as usize;
    let mut out = Vec::new();
    let mut push = |a: Action, s: WorldState| out.push((a, s));

    if w.nodes[root].rm == Running {
        let mut s = w.clone();
        s.nodes[root].rm = Prepare;
        let mc = merge(&mut s, root);
        s.nodes[root].vote_ok = 0;
        s.nodes[root].vote_no = 0;
        fan_out(&mut s, MsgKind::PrepareReq, root, mc);
        push(RootStartToCommit, s);
    }

    for n in 0..n_nodes {
        let rm = w.nodes[n].rm;
        let is_root = n == root;
        for src in 0..n_nodes {
            if w.has_msg(MsgKind::PrepareReq, src, n) {
                match rm {
                    Running => {
                        let mut s = w.clone();
                        s.nodes[n].parent = Some(src as u8);
                        s.nodes[n].rm = Prepare;
                        let mc = merge(&mut s, n);
                        s.nodes[n].vote_ok = 0;
                        s.nodes[n].vote_no = 0;
                        fan_out(&mut s, MsgKind::PrepareReq, n, mc);
                        push(Handle2pcPrepareRequest { n, src }, s);
                    }
                    Prepare if w.nodes[n].parent != Some(src as u8) => {
                        let mut s = w.clone();
                        s.send(MsgKind::VoteOk, n, src);
                        push(Handle2pcDuplicatePrepareRequest { n, src }, s);
                    }
                    Abort | Tombstone => {
                        let mut s = w.clone();
                        record_parent(&mut s, n, src);
                        s.send(MsgKind::VoteNo, n, src);
                        push(HandleOrphan2pcPrepareRequest { n, src }, s);
                    }
                    _ => {}
                }
            }
            if rm == Prepare && w.nodes[n].children & bit(src) != 0 {
                let voted = (w.nodes[n].vote_ok | w.nodes[n].vote_no) & bit(src) != 0;
                for (kind, ok) in [(MsgKind::VoteOk, true), (MsgKind::VoteNo, false)] {
                    if !voted && w.has_msg(kind, src, n) {
                        let mut s = w.clone();
                        if ok {
                            s.nodes[n].vote_ok |= bit(src);
                        } else {
                            s.nodes[n].vote_no |= bit(src);
                        }
                        push(Handle2pcPrepareResponse { n, src, ok }, s);
                    }
                }
            }
            for (kind, commit) in [(MsgKind::Commit, true), (MsgKind::Abort, false)] {
                if is_root || !w.has_msg(kind, src, n) {
                    continue;
                }
                let target = if commit { Commit } else { Abort };
                match rm {
                    Running | Prepare => {
                        let mut s = w.clone();
                        record_parent(&mut s, n, src);
                        s.nodes[n].rm = target;
                        let mc = merge(&mut s, n);
                        s.nodes[n].acks = 0;
                        fan_out(&mut s, kind, n, mc);
                        s.send(MsgKind::Ack, n, src);
                        let a =
                            if commit { Handle2pcCommitRequest { n, src } } else { Handle2pcAbortRequest { n, src } };
                        push(a, s);
                    }
                    r if r == target || r == Tombstone => {
                        let mut s = w.clone();
                        s.send(MsgKind::Ack, n, src);
                        let a = if commit {
                            HandleOrphan2pcCommitRequest { n, src }
                        } else {
                            HandleOrphan2pcAbortRequest { n, src }
                        };
                        push(a, s);
                    }
                    _ => {}
                }
            }
            if matches!(rm, Commit | Abort)
                && w.has_msg(MsgKind::Ack, src, n)
                && w.nodes[n].children & bit(src) != 0
                && w.nodes[n].acks & bit(src) == 0
            {
                let mut s = w.clone();
                s.nodes[n].acks |= bit(src);
                push(Handle2pcAckResponse { n, src }, s);
            }
        }

        let commit_guard = match b.mutation {
            Some(Mutation::CommitOnNo) if is_root => all_votes_in(w, n),
            _ => all_votes_ok(w, n),
        };
        if rm == Prepare && commit_guard {
            let mut s = w.clone();
            if is_root {
                s.nodes[n].rm = Commit;
                let mc = merge(&mut s, n);
                s.nodes[n].acks = 0;
                fan_out(&mut s, MsgKind::Commit, n, mc);
            } else if let Some(p) = w.nodes[n].parent {
                s.send(MsgKind::VoteOk, n, p as usize);
            }
            push(Handle2pcCommitDecided { n }, s);
        }
        if (rm == Prepare || (is_root && rm == Running)) && any_vote_no(w, n) {
            let mut s = w.clone();
            if is_root {
                s.nodes[n].rm = Abort;
                let mc = merge(&mut s, n);
                s.nodes[n].acks = 0;
                fan_out(&mut s, MsgKind::Abort, n, mc);
            } else if let Some(p) = w.nodes[n].parent {
                s.send(MsgKind::VoteNo, n, p as usize);
            }
            push(Handle2pcAbortDecided { n }, s);
        }
        if rm == Running && b.max_internal_aborts.map_or(true, |m| w.internal_aborts < m) {
            let mut s = w.clone();
            s.nodes[n].rm = Abort;
            let mc = merge(&mut s, n);
            s.nodes[n].acks = 0;
            fan_out(&mut s, MsgKind::Abort, n, mc);
            if let Some(p) = w.nodes[n].parent {
                s.send(MsgKind::VoteNo, n, p as usize);
            }
            if b.max_internal_aborts.is_some() {
                s.internal_aborts += 1;
            }
            push(InternalAbort { n }, s);
        }
        if matches!(rm, Commit | Abort) && all_acked(w, n) {
            let mut s = w.clone();
            s.nodes[n].rm = Tombstone;
            push(ForgetCtx { n }, s);
        }
        if rm != Tombstone && w.adds < b.max_dynamic_adds {
            for new_child in 0..n_nodes {
                let known = w.nodes[n].children | w.nodes[n].interm;
                if new_child != n && known & bit(new_child) == 0 {
                    let mut s = w.clone();
                    s.nodes[n].interm |= bit(new_child);
                    s.adds += 1;
                    push(AddIntermediateParticipant { n, new_child }, s);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tight() -> ActionBounds {
        ActionBounds { max_dynamic_adds: 0, max_internal_aborts: Some(0), mutation: None }
    }

    #[test]
    fn init_enables_only_root_start() {
        let w = WorldState::init(2, 0, &[(0, 1)]).unwrap();
        let acts: Vec<Action> = successors(&w, &tight()).into_iter().map(|(a, _)| a).collect();
        assert_eq!(acts, vec![Action::RootStartToCommit]);
    }

    #[test]
    fn init_with_budgets_adds_aborts_and_additions() {
        let w = WorldState::init(2, 0, &[(0, 1)]).unwrap();
        let b = ActionBounds { max_dynamic_adds: 1, max_internal_aborts: None, mutation: None };
        let acts: Vec<Action> = successors(&w, &b).into_iter().map(|(a, _)| a).collect();
        assert!(acts.contains(&Action::InternalAbort { n: 0 }));
        assert!(acts.contains(&Action::InternalAbort { n: 1 }));
        assert!(acts.contains(&Action::AddIntermediateParticipant { n: 1, new_child: 0 }));
        assert_eq!(acts.len(), 4);
    }

    #[test]
    fn all_tombstone_is_quiescent() {
        let mut w = WorldState::init(3, 0, &[(0, 1), (0, 2)]).unwrap();
        for v in w.nodes.iter_mut() {
            v.rm = TwoPcState::Tombstone;
        }
        assert!(successors(&w, &ActionBounds::unbounded()).is_empty());
    }

    #[test]
    fn root_with_all_ok_votes_may_commit() {
        let mut w = WorldState::init(3, 0, &[(0, 1), (0, 2)]).unwrap();
        w.nodes[0].rm = TwoPcState::Prepare;
        w.nodes[0].vote_ok = bit(1) | bit(2);
        let acts: Vec<Action> = successors(&w, &tight()).into_iter().map(|(a, _)| a).collect();
        assert!(acts.contains(&Action::Handle2pcCommitDecided { n: 0 }));
    }

    #[test]
    fn mutation_commits_despite_no() {
        let mut w = WorldState::init(3, 0, &[(0, 1), (0, 2)]).unwrap();
        w.nodes[0].rm = TwoPcState::Prepare;
        w.nodes[0].vote_ok = bit(1);
        w.nodes[0].vote_no = bit(2);
        let plain: Vec<Action> = successors(&w, &tight()).into_iter().map(|(a, _)| a).collect();
        assert!(!plain.contains(&Action::Handle2pcCommitDecided { n: 0 }));
        let b = ActionBounds { mutation: Some(Mutation::CommitOnNo), ..tight() };
        let mutated: Vec<Action> = successors(&w, &b).into_iter().map(|(a, _)| a).collect();
        assert!(mutated.contains(&Action::Handle2pcCommitDecided { n: 0 }));
    }
}
