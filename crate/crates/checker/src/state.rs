//! Canonical world state over the abstract protocol variables.
//!
//! Node sets are bitsets indexed by node number, votes and acks are total
//! functions stored as bitsets (absent means unknown or false), and the
//! monotone message set is a bitset over `(kind, src, dst)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;
use treecommit::trace::{NodeProjection, Projection};
use treecommit::types::{LogStreamId, Message, MessageKind, TwoPcState, TxnId, VoteStatus};

/// Largest world a bitset node set can describe.
pub const MAX_NODES: usize = 16;

pub type NodeSet = u16;

/// Message kinds of the abstract model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MsgKind {
    PrepareReq,
    VoteOk,
    VoteNo,
    Commit,
    Abort,
    Ack,
}

impl MsgKind {
    pub const ALL: [MsgKind; 6] =
        [MsgKind::PrepareReq, MsgKind::VoteOk, MsgKind::VoteNo, MsgKind::Commit, MsgKind::Abort, MsgKind::Ack];

    fn index(self) -> usize {
        self as usize
    }

    pub fn to_kind(self) -> MessageKind {
        match self {
            MsgKind::PrepareReq => MessageKind::PrepareReq,
            MsgKind::VoteOk => MessageKind::PrepareResp(VoteStatus::Ok),
            MsgKind::VoteNo => MessageKind::PrepareResp(VoteStatus::No),
            MsgKind::Commit => MessageKind::Commit,
            MsgKind::Abort => MessageKind::Abort,
            MsgKind::Ack => MessageKind::Ack,
        }
    }

    pub fn from_kind(k: MessageKind) -> Option<Self> {
        Some(match k {
            MessageKind::PrepareReq => MsgKind::PrepareReq,
            MessageKind::PrepareResp(VoteStatus::Ok) => MsgKind::VoteOk,
            MessageKind::PrepareResp(VoteStatus::No) => MsgKind::VoteNo,
            MessageKind::Commit => MsgKind::Commit,
            MessageKind::Abort => MsgKind::Abort,
            MessageKind::Ack => MsgKind::Ack,
            _ => return None,
        })
    }
}

/// Per-node protocol variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeVars {
    pub rm: TwoPcState,
    pub parent: Option<u8>,
    pub children: NodeSet,
    pub interm: NodeSet,
    pub vote_ok: NodeSet,
    pub vote_no: NodeSet,
    pub acks: NodeSet,
}

impl NodeVars {
    fn init(children: NodeSet) -> Self {
        NodeVars { rm: TwoPcState::Running, parent: None, children, interm: 0, vote_ok: 0, vote_no: 0, acks: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WorldState {
    pub root: u8,
    pub nodes: Box<[NodeVars]>,
    pub msgs: Box<[u64]>,
    /// AddIntermediateParticipant firings so far (bookkeeping for budgets).
    pub adds: u8,
    /// InternalAbort firings so far (bookkeeping for budgets).
    pub internal_aborts: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("{0} nodes exceed the supported maximum of {MAX_NODES}")]
    TooManyNodes(usize),
    #[error("root {0} is not a node")]
    BadRoot(u32),
    #[error("stream {0} is out of range")]
    BadStream(u32),
    #[error("message {0} has no abstract counterpart")]
    UnsupportedMessage(String),
    #[error("vote {0} has no abstract counterpart")]
    UnsupportedVote(VoteStatus),
}

pub fn bit(i: usize) -> NodeSet {
    1 << i
}

pub fn members(s: NodeSet) -> impl Iterator<Item = usize> {
    (0..MAX_NODES).filter(move |i| s & bit(*i) != 0)
}

impl WorldState {
    /// The initial state for a participant tree given as `(parent, child)`.
    pub fn init(n: usize, root: usize, edges: &[(usize, usize)]) -> Result<Self, StateError> {
        if n == 0 || n > MAX_NODES {
            return Err(StateError::TooManyNodes(n));
        }
        if root >= n {
            return Err(StateError::BadRoot(root as u32));
        }
        let mut nodes = vec![NodeVars::init(0); n];
        for &(p, c) in edges {
            if p >= n || c >= n {
                return Err(StateError::BadStream(p.max(c) as u32));
            }
            nodes[p].children |= bit(c);
        }
        Ok(WorldState {
            root: root as u8,
            nodes: nodes.into_boxed_slice(),
            msgs: vec![0; (6 * n * n).div_ceil(64)].into_boxed_slice(),
            adds: 0,
            internal_aborts: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    fn msg_index(&self, kind: MsgKind, src: usize, dst: usize) -> usize {
        let n = self.n();
        kind.index() * n * n + src * n + dst
    }

    pub fn has_msg(&self, kind: MsgKind, src: usize, dst: usize) -> bool {
        let i = self.msg_index(kind, src, dst);
        self.msgs[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn send(&mut self, kind: MsgKind, src: usize, dst: usize) {
        let i = self.msg_index(kind, src, dst);
        self.msgs[i / 64] |= 1 << (i % 64);
    }

    /// Every message in the set, as `(kind, src, dst)`.
    pub fn messages(&self) -> Vec<(MsgKind, usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for k in MsgKind::ALL {
            for s in 0..n {
                for d in 0..n {
                    if self.has_msg(k, s, d) {
                        out.push((k, s, d));
                    }
                }
            }
        }
        out
    }

    /// Equality of the protocol variables, ignoring budget bookkeeping.
    pub fn same_vars(&self, other: &WorldState) -> bool {
        self.root == other.root && self.nodes == other.nodes && self.msgs == other.msgs
    }

    /// Renames node `i` to `perm[i]` everywhere.
    pub fn permute(&self, perm: &[usize]) -> WorldState {
        let map = |s: NodeSet| members(s).fold(0, |acc, i| acc | bit(perm[i]));
        let mut nodes = self.nodes.clone();
        for (i, v) in self.nodes.iter().enumerate() {
            nodes[perm[i]] = NodeVars {
                rm: v.rm,
                parent: v.parent.map(|p| perm[p as usize] as u8),
                children: map(v.children),
                interm: map(v.interm),
                vote_ok: map(v.vote_ok),
                vote_no: map(v.vote_no),
                acks: map(v.acks),
            };
        }
        let mut out = WorldState {
            root: perm[self.root as usize] as u8,
            nodes,
            msgs: vec![0; self.msgs.len()].into_boxed_slice(),
            adds: self.adds,
            internal_aborts: self.internal_aborts,
        };
        for (k, s, d) in self.messages() {
            out.send(k, perm[s], perm[d]);
        }
        out
    }

    /// No node in COMMIT while another is in ABORT.
    pub fn consistent(&self) -> bool {
        let any = |s| self.nodes.iter().any(|v| v.rm == s);
        !(any(TwoPcState::Commit) && any(TwoPcState::Abort))
    }

    /// Every node is decided or forgotten and no two decisions disagree.
    pub fn terminal_agreement(&self) -> bool {
        self.consistent()
            && self.nodes.iter().all(|v| matches!(v.rm, TwoPcState::Commit | TwoPcState::Abort | TwoPcState::Tombstone))
    }

    pub fn to_projection(&self, txn: TxnId) -> Projection {
        let ls = |i: usize| LogStreamId(i as u32);
        let set = |s: NodeSet| members(s).map(ls).collect::<BTreeSet<_>>();
        let nodes = self
            .nodes
            .iter()
            .map(|v| {
                let mut votes = BTreeMap::new();
                for c in members(v.vote_ok) {
                    votes.insert(ls(c), VoteStatus::Ok);
                }
                for c in members(v.vote_no) {
                    votes.insert(ls(c), VoteStatus::No);
                }
                NodeProjection {
                    state: v.rm,
                    parent: v.parent.map(|p| ls(p as usize)),
                    children: set(v.children),
                    interm: set(v.interm),
                    votes,
                    acks: set(v.acks),
                }
            })
            .collect();
        let msgs = self.messages().into_iter().map(|(k, s, d)| Message::new(k.to_kind(), ls(s), ls(d), txn)).collect();
        Projection { txn, root: ls(self.root as usize), nodes, msgs }
    }

    pub fn from_projection(p: &Projection) -> Result<Self, StateError> {
        let n = p.nodes.len();
        let mut w = WorldState::init(n, p.root.0 as usize, &[])?;
        let idx = |s: LogStreamId| -> Result<usize, StateError> {
            if (s.0 as usize) < n {
                Ok(s.0 as usize)
            } else {
                Err(StateError::BadStream(s.0))
            }
        };
        let set = |s: &BTreeSet<LogStreamId>| -> Result<NodeSet, StateError> {
            s.iter().try_fold(0, |acc, x| Ok(acc | bit(idx(*x)?)))
        };
        for (i, np) in p.nodes.iter().enumerate() {
            let v = &mut w.nodes[i];
            v.rm = np.state;
            v.parent = np.parent.map(|x| idx(x).map(|x| x as u8)).transpose()?;
            v.children = set(&np.children)?;
            v.interm = set(&np.interm)?;
            v.acks = set(&np.acks)?;
            for (c, vote) in &np.votes {
                match vote {
                    VoteStatus::Ok => v.vote_ok |= bit(idx(*c)?),
                    VoteStatus::No => v.vote_no |= bit(idx(*c)?),
                    VoteStatus::Unknown => {}
                    other => return Err(StateError::UnsupportedVote(*other)),
                }
            }
        }
        for m in &p.msgs {
            let k = MsgKind::from_kind(m.kind).ok_or_else(|| StateError::UnsupportedMessage(m.to_string()))?;
            w.send(k, idx(m.src)?, idx(m.dst)?);
        }
        Ok(w)
    }
}

impl fmt::Display for WorldState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_projection(TxnId(0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_round_trip() {
        let mut w = WorldState::init(3, 0, &[(0, 1), (1, 2)]).unwrap();
        w.nodes[1].rm = TwoPcState::Prepare;
        w.nodes[1].parent = Some(0);
        w.nodes[1].vote_ok = bit(2);
        w.nodes[0].interm = bit(2);
        w.send(MsgKind::PrepareReq, 0, 1);
        w.send(MsgKind::VoteNo, 2, 1);
        let back = WorldState::from_projection(&w.to_projection(TxnId(4))).unwrap();
        assert!(back.same_vars(&w));
    }

    #[test]
    fn permutation_renames_everything() {
        let mut w = WorldState::init(3, 0, &[(0, 1), (0, 2)]).unwrap();
        w.nodes[1].parent = Some(0);
        w.nodes[0].vote_ok = bit(1);
        w.send(MsgKind::VoteOk, 1, 0);
        let p = w.permute(&[0, 2, 1]);
        assert_eq!(p.nodes[2].parent, Some(0));
        assert_eq!(p.nodes[0].vote_ok, bit(2));
        assert!(p.has_msg(MsgKind::VoteOk, 2, 0) && !p.has_msg(MsgKind::VoteOk, 1, 0));
        assert_eq!(p.permute(&[0, 2, 1]), w);
    }

    #[test]
    fn consistency_predicate() {
        let mut w = WorldState::init(2, 0, &[(0, 1)]).unwrap();
        assert!(w.consistent() && !w.terminal_agreement());
        w.nodes[0].rm = TwoPcState::Commit;
        w.nodes[1].rm = TwoPcState::Tombstone;
        assert!(w.terminal_agreement());
        w.nodes[1].rm = TwoPcState::Abort;
        assert!(!w.consistent());
    }
}
