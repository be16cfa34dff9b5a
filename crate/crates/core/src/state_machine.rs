//! Per-node tree-shaped 2PC state machine.
//!
//! A [`TxnContext`] is the protocol state of one transaction on one log
//! stream. [`TxnContext::handle`] is a pure step function: it mutates the
//! context and returns the messages, log appends and user replies the step
//! produces. The caller (the simulator) owns delivery, persistence and
//! scheduling of the internal `decide`/`forget` actions.
//!
//! Two fidelities are supported. In [`Fidelity::Abstract`] there are no
//! logs and every input is exactly one transition of the abstract
//! specification (or a stutter). In [`Fidelity::Logged`] prepare, commit,
//! abort and clear logs are appended and state changes that depend on
//! durability wait for the persistence callback.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::VariantError;
use crate::types::{
    LogEntryKind, LogStreamId, Message, MessageKind, PartitionId, Timestamp, TwoPcState, TxnId, UserOutcome, VoteStatus,
};
use crate::unknown::{root_user_response, Provenance};

/// Optional protocol optimizations. All flags off is the plain protocol in
/// which the coordinator never writes logs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolVariant {
    /// Participants synchronously write a clear log before TOMBSTONE; the
    /// coordinator writes nothing.
    pub clear_stage: bool,
    /// The coordinator synchronously writes its decision log after replying
    /// to the user and sends Commit/Abort once it persists.
    pub coordinator_commit_log: bool,
    /// Release messages are sent alongside the coordinator commit log.
    pub release_messages: bool,
    /// Only the root writes a clear log.
    pub d2pc_clear: bool,
    /// Lost contexts answer PREPARE_UNKNOWN instead of NO.
    pub unknown_states: bool,
    /// Lost contexts consult the transaction data table first.
    pub tdt: bool,
}

impl ProtocolVariant {
    pub const FLAGS: [&'static str; 6] =
        ["clear_stage", "coordinator_commit_log", "release_messages", "d2pc_clear", "unknown_states", "tdt"];

    pub fn plain() -> Self {
        Self::default()
    }

    pub fn commit_log() -> Self {
        ProtocolVariant { coordinator_commit_log: true, ..Self::default() }
    }

    pub fn release() -> Self {
        ProtocolVariant { coordinator_commit_log: true, release_messages: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), VariantError> {
        if self.tdt && !self.unknown_states {
            return Err(VariantError::TdtWithoutUnknown);
        }
        if self.release_messages && !self.coordinator_commit_log {
            return Err(VariantError::ReleaseWithoutCommitLog);
        }
        if self.clear_stage && self.coordinator_commit_log {
            return Err(VariantError::ClearStageWithCommitLog);
        }
        if self.clear_stage && self.d2pc_clear {
            return Err(VariantError::ClearStageWithD2pc);
        }
        Ok(())
    }

    fn set(&mut self, flag: &str) -> Result<(), VariantError> {
        match flag {
            "plain" => {}
            "clear_stage" | "clear-stage" => self.clear_stage = true,
            "coordinator_commit_log" | "commit-log" | "commit_log" => self.coordinator_commit_log = true,
            "release_messages" | "release" => {
                self.coordinator_commit_log = true;
                self.release_messages = true;
            }
            "d2pc_clear" | "d2pc" => self.d2pc_clear = true,
            "unknown_states" | "unknown" => self.unknown_states = true,
            "tdt" => {
                self.unknown_states = true;
                self.tdt = true;
            }
            other => return Err(VariantError::UnknownFlag(other.to_string())),
        }
        Ok(())
    }

    fn flags(&self) -> [bool; 6] {
        [
            self.clear_stage,
            self.coordinator_commit_log,
            self.release_messages,
            self.d2pc_clear,
            self.unknown_states,
            self.tdt,
        ]
    }
}

/// Comma-separated flags or presets (`plain`, `clear-stage`, `commit-log`,
/// `release`, `d2pc`, `unknown`, `tdt`). Presets imply their prerequisites.
impl FromStr for ProtocolVariant {
    type Err = VariantError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut v = ProtocolVariant::default();
        for flag in s.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            v.set(flag)?;
        }
        v.validate()?;
        Ok(v)
    }
}

impl fmt::Display for ProtocolVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = Self::FLAGS.iter().zip(self.flags()).filter_map(|(name, on)| on.then_some(*name)).collect();
        if on.is_empty() {
            f.write_str("plain")
        } else {
            f.write_str(&on.join("+"))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    /// Log-free; one abstract action per step.
    Abstract,
    #[default]
    Logged,
}

impl fmt::Display for Fidelity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fidelity::Abstract => "abstract",
            Fidelity::Logged => "logged",
        })
    }
}

impl FromStr for Fidelity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "abstract" => Ok(Fidelity::Abstract),
            "logged" => Ok(Fidelity::Logged),
            other => Err(format!("unknown mode {other:?} (expected abstract or logged)")),
        }
    }
}

/// Deliberately broken rules used as negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// The root commits once every vote has arrived, even if one is NO.
    CommitOnNo,
}

impl FromStr for Mutation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "commit-on-no" => Ok(Mutation::CommitOnNo),
            other => Err(format!("unknown mutant {other:?}")),
        }
    }
}

/// Everything a handler may consult besides the context itself.
#[derive(Debug, Clone, Copy)]
pub struct Env {
    pub variant: ProtocolVariant,
    pub fidelity: Fidelity,
    pub mutation: Option<Mutation>,
    /// Answer to give a PrepareReq if the context is TOMBSTONE; computed by
    /// the owning stream from its transaction data table.
    pub inquiry: VoteStatus,
}

impl Env {
    pub fn new(variant: ProtocolVariant, fidelity: Fidelity) -> Self {
        Env { variant, fidelity, mutation: None, inquiry: VoteStatus::No }
    }

    fn logged(&self) -> bool {
        self.fidelity == Fidelity::Logged
    }
}

/// Which outstanding log a persistence callback refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LogPurpose {
    Prepare,
    Decision,
    Clear,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Input {
    /// Commit request from the user, delivered to the root.
    UserCommit,
    Msg(Message),
    LogPersisted {
        purpose: LogPurpose,
        ts: Timestamp,
    },
    /// Fire one enabled internal action (decide or forget).
    Internal,
    InternalAbort,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Send(Message),
    Append {
        kind: LogEntryKind,
        purpose: LogPurpose,
        sync: bool,
    },
    UserReply(UserOutcome),
    /// Protocol violation observed by the handler (e.g. Commit at an
    /// aborted node).
    Violation(String),
    /// Input dropped as stale or unexpected.
    Anomaly(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub handler: &'static str,
    pub outputs: Vec<Output>,
}

impl Step {
    fn new(handler: &'static str) -> Self {
        Step { handler, outputs: Vec::new() }
    }

    pub fn is_noop(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Whether this step appends a prepare, commit or abort log.
    pub fn appends_2pc_log(&self) -> bool {
        self.outputs.iter().any(|o| matches!(o, Output::Append { kind, .. } if kind.is_2pc()))
    }
}

/// Protocol state of one transaction on one log stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TxnContext {
    pub txn: TxnId,
    pub node: LogStreamId,
    pub is_root: bool,
    pub provenance: Provenance,
    pub state: TwoPcState,
    /// Local vote, OK unless a local failure is injected.
    pub own_status: VoteStatus,
    pub parent: Option<LogStreamId>,
    /// Active participant list: initial participants plus merged transfer
    /// destinations.
    pub children: BTreeSet<LogStreamId>,
    /// Transfer destinations awaiting the next phase transition.
    pub interm_children: BTreeSet<LogStreamId>,
    /// Transfer destinations already merged into `children`.
    pub incr_children: BTreeSet<LogStreamId>,
    pub votes: BTreeMap<LogStreamId, VoteStatus>,
    pub acks: BTreeMap<LogStreamId, bool>,
    /// Prepare log submitted; the context stays RUNNING until it persists.
    pub prepare_started: bool,
    pub prepare_log_persisted: bool,
    pub vote_sent: Option<VoteStatus>,
    pub decision_log_pending: bool,
    pub decision_log_persisted: bool,
    /// Senders owed an Ack once the decision log persists.
    pub pending_acks: BTreeSet<LogStreamId>,
    /// Non-parent PrepareReq senders owed an OK once the prepare log persists.
    pub deferred_dup_replies: BTreeSet<LogStreamId>,
    pub release_seen: bool,
    pub clear_pending: bool,
    pub blocked_from_logging: bool,
    pub last_2pc_log_ts: Timestamp,
    /// Partitions of this transaction hosted here.
    pub partitions: BTreeSet<PartitionId>,
    /// Recorded partition count exceeded the cap: every transfer out of this
    /// stream counts as affecting the transaction.
    pub partition_overflow: bool,
}

impl TxnContext {
    pub fn new(txn: TxnId, node: LogStreamId) -> Self {
        TxnContext {
            txn,
            node,
            is_root: false,
            provenance: Provenance::Fresh,
            state: TwoPcState::Running,
            own_status: VoteStatus::Ok,
            parent: None,
            children: BTreeSet::new(),
            interm_children: BTreeSet::new(),
            incr_children: BTreeSet::new(),
            votes: BTreeMap::new(),
            acks: BTreeMap::new(),
            prepare_started: false,
            prepare_log_persisted: false,
            vote_sent: None,
            decision_log_pending: false,
            decision_log_persisted: false,
            pending_acks: BTreeSet::new(),
            deferred_dup_replies: BTreeSet::new(),
            release_seen: false,
            clear_pending: false,
            blocked_from_logging: false,
            last_2pc_log_ts: Timestamp(0),
            partitions: BTreeSet::new(),
            partition_overflow: false,
        }
    }

    pub fn root(txn: TxnId, node: LogStreamId, children: BTreeSet<LogStreamId>) -> Self {
        let mut ctx = Self::new(txn, node).with_children(children);
        ctx.is_root = true;
        ctx
    }

    pub fn with_children(mut self, children: BTreeSet<LogStreamId>) -> Self {
        self.votes = children.iter().map(|c| (*c, VoteStatus::Unknown)).collect();
        self.acks = children.iter().map(|c| (*c, false)).collect();
        self.children = children;
        self
    }

    /// Children that came from the SQL layer rather than from transfers.
    pub fn participants(&self) -> BTreeSet<LogStreamId> {
        self.children.difference(&self.incr_children).copied().collect()
    }

    pub fn merged_children(&self) -> BTreeSet<LogStreamId> {
        self.children.union(&self.interm_children).copied().collect()
    }

    /// Adds a transfer destination to the pending participant list.
    /// Rejected (returns `false`) when the guard does not hold.
    pub fn add_intermediate_participant(&mut self, new_child: LogStreamId) -> bool {
        let allowed =
            matches!(self.state, TwoPcState::Running | TwoPcState::Prepare | TwoPcState::Commit | TwoPcState::Abort)
                && new_child != self.node
                && !self.children.contains(&new_child)
                && !self.interm_children.contains(&new_child);
        if allowed {
            self.interm_children.insert(new_child);
        }
        allowed
    }

    /// Moves pending participants into the active list. Returns the set
    /// that was merged.
    fn apply_merge(&mut self) -> BTreeSet<LogStreamId> {
        let merged = std::mem::take(&mut self.interm_children);
        self.incr_children.extend(merged.iter().copied());
        self.children.extend(merged.iter().copied());
        merged
    }

    fn reset_votes(&mut self) {
        self.votes = self.children.iter().map(|c| (*c, VoteStatus::Unknown)).collect();
    }

    fn reset_acks(&mut self) {
        self.acks = self.children.iter().map(|c| (*c, false)).collect();
    }

    fn record_parent(&mut self, src: LogStreamId) {
        if self.parent.is_none() && src != LogStreamId::SCHEDULER {
            self.parent = Some(src);
        }
    }

    fn msg(&self, kind: MessageKind, dst: LogStreamId) -> Output {
        Output::Send(Message::new(kind, self.node, dst, self.txn))
    }

    fn fan_out(&self, kind: MessageKind, out: &mut Vec<Output>) {
        for c in &self.children {
            out.push(self.msg(kind, *c));
        }
    }

    fn log_lists(&self) -> (Option<LogStreamId>, BTreeSet<LogStreamId>, BTreeSet<LogStreamId>) {
        (self.parent, self.participants(), self.incr_children.clone())
    }

    fn prepare_entry(&self) -> LogEntryKind {
        let (parent, participants, incr_parts) = self.log_lists();
        LogEntryKind::Prepare { parent, participants, incr_parts, status: self.own_status }
    }

    fn decision_entry(&self) -> LogEntryKind {
        let (parent, participants, incr_parts) = self.log_lists();
        if self.state == TwoPcState::Commit {
            LogEntryKind::Commit { parent, participants, incr_parts }
        } else {
            LogEntryKind::Abort { parent, participants, incr_parts }
        }
    }

    fn decision_message(&self) -> MessageKind {
        if self.state == TwoPcState::Commit {
            MessageKind::Commit
        } else {
            MessageKind::Abort
        }
    }

    /// State used for vote collection: in logged mode a node whose prepare
    /// log is still in flight already collects votes.
    fn collecting_votes(&self) -> bool {
        self.state == TwoPcState::Prepare || (self.state == TwoPcState::Running && self.prepare_started)
    }

    fn any_vote_negative(&self) -> bool {
        self.votes.values().any(|v| v.is_negative())
    }

    fn all_votes_ok(&self) -> bool {
        self.children.iter().all(|c| self.votes.get(c) == Some(&VoteStatus::Ok))
    }

    fn all_votes_in(&self) -> bool {
        self.children.iter().all(|c| self.votes.get(c).is_some_and(|v| *v != VoteStatus::Unknown))
    }

    fn all_acked(&self) -> bool {
        self.children.iter().all(|c| self.acks.get(c) == Some(&true))
    }

    /// Commit decision at the root, honouring the seeded mutation.
    fn root_may_commit(&self, env: &Env) -> bool {
        match env.mutation {
            Some(Mutation::CommitOnNo) => self.all_votes_in(),
            None => self.all_votes_ok() && self.own_status == VoteStatus::Ok,
        }
    }

    fn root_must_abort(&self) -> bool {
        self.any_vote_negative() || self.own_status == VoteStatus::No
    }

    fn decide_enabled(&self, env: &Env) -> bool {
        if self.is_root {
            match self.state {
                TwoPcState::Prepare => self.root_may_commit(env) || self.root_must_abort(),
                TwoPcState::Running => self.any_vote_negative(),
                _ => false,
            }
        } else {
            if self.state != TwoPcState::Prepare || self.vote_sent.is_some() || self.parent.is_none() {
                return false;
            }
            if env.logged() && !self.prepare_log_persisted {
                return false;
            }
            self.any_vote_negative() || self.own_status == VoteStatus::No || self.all_votes_ok()
        }
    }

    fn forget_enabled(&self, env: &Env) -> bool {
        if !self.state.is_decided() || !self.all_acked() || self.clear_pending {
            return false;
        }
        if env.logged() && (self.decision_log_pending || !self.pending_acks.is_empty()) {
            return false;
        }
        true
    }

    /// Whether an [`Input::Internal`] step would do anything.
    pub fn internal_enabled(&self, env: &Env) -> bool {
        self.decide_enabled(env) || self.forget_enabled(env)
    }

    pub fn handle(&mut self, env: &Env, input: Input) -> Step {
        match input {
            Input::UserCommit => self.handle_user_commit(),
            Input::Msg(m) => {
                debug_assert_eq!(m.dst, self.node);
                debug_assert_eq!(m.txn, self.txn);
                match m.kind {
                    MessageKind::PrepareReq => self.handle_prepare_request(env, m.src),
                    MessageKind::PrepareResp(status) => self.handle_prepare_response(env, m.src, status),
                    MessageKind::Commit => self.handle_decision_request(env, m.src, true),
                    MessageKind::Abort => self.handle_decision_request(env, m.src, false),
                    MessageKind::Ack => self.handle_ack(m.src),
                    MessageKind::Release => self.handle_release(),
                }
            }
            Input::LogPersisted { purpose, ts } => self.on_log_persisted(purpose, ts),
            Input::Internal => {
                if self.decide_enabled(env) {
                    self.decide(env)
                } else if self.forget_enabled(env) {
                    self.forget_ctx(env)
                } else {
                    Step::new("internal_noop")
                }
            }
            Input::InternalAbort => self.internal_abort(),
        }
    }

    fn handle_user_commit(&mut self) -> Step {
        let mut step = Step::new("handle_2pc_prepare_request");
        if !self.is_root {
            step.outputs.push(Output::Anomaly("commit request at non-root".into()));
            return step;
        }
        match self.state {
            TwoPcState::Running if !self.prepare_started => {
                self.apply_merge();
                self.state = TwoPcState::Prepare;
                self.prepare_started = true;
                self.prepare_log_persisted = true;
                self.reset_votes();
                self.fan_out(MessageKind::PrepareReq, &mut step.outputs);
            }
            TwoPcState::Abort | TwoPcState::Tombstone if !self.prepare_started => {
                // Aborted before the user asked to commit.
                step.handler = "reply_aborted";
                step.outputs.push(Output::UserReply(UserOutcome::Aborted));
            }
            _ => step.handler = "duplicate_commit_request",
        }
        step
    }

    fn handle_prepare_request(&mut self, env: &Env, src: LogStreamId) -> Step {
        match self.state {
            TwoPcState::Running if !self.prepare_started => {
                let mut step = Step::new("handle_2pc_prepare_request");
                self.parent = Some(src);
                self.apply_merge();
                self.reset_votes();
                self.prepare_started = true;
                self.fan_out(MessageKind::PrepareReq, &mut step.outputs);
                if env.logged() {
                    step.outputs.push(Output::Append {
                        kind: self.prepare_entry(),
                        purpose: LogPurpose::Prepare,
                        sync: false,
                    });
                } else {
                    self.prepare_log_persisted = true;
                    self.state = TwoPcState::Prepare;
                }
                step
            }
            TwoPcState::Running => {
                // Prepare log still in flight.
                let step = Step::new("handle_duplicate_prepare_request");
                if Some(src) != self.parent {
                    self.deferred_dup_replies.insert(src);
                }
                step
            }
            TwoPcState::Prepare => {
                if Some(src) != self.parent {
                    let mut step = Step::new("handle_duplicate_prepare_request");
                    step.outputs.push(self.msg(MessageKind::PrepareResp(VoteStatus::Ok), src));
                    step
                } else {
                    let mut step = Step::new("resend_vote");
                    if let Some(v) = self.vote_sent {
                        step.outputs.push(self.msg(MessageKind::PrepareResp(v), src));
                    }
                    step
                }
            }
            TwoPcState::Abort | TwoPcState::Tombstone => {
                let mut step = Step::new("handle_orphan_prepare_request");
                self.record_parent(src);
                let status = if self.state == TwoPcState::Abort { VoteStatus::No } else { env.inquiry };
                step.outputs.push(self.msg(MessageKind::PrepareResp(status), src));
                step
            }
            TwoPcState::Commit => {
                let mut step = Step::new("ignore_prepare_request");
                step.outputs.push(Output::Anomaly("PrepareReq at committed node".into()));
                step
            }
        }
    }

    fn handle_prepare_response(&mut self, env: &Env, src: LogStreamId, status: VoteStatus) -> Step {
        let mut step = Step::new("handle_2pc_prepare_response");
        if self.collecting_votes() && self.children.contains(&src) && self.votes.get(&src) == Some(&VoteStatus::Unknown)
        {
            self.votes.insert(src, status);
            if status == VoteStatus::No {
                self.own_status = VoteStatus::No;
            }
            return step;
        }
        if env.logged()
            && self.state.is_decided()
            && self.children.contains(&src)
            && self.acks.get(&src) == Some(&false)
            && (!self.is_root || !self.decision_log_pending)
        {
            // A recovered child re-sent its vote: repeat the decision.
            step.handler = "resend_decision";
            step.outputs.push(self.msg(self.decision_message(), src));
            return step;
        }
        step.handler = "drop_prepare_response";
        step.outputs.push(Output::Anomaly(format!("stale PrepareResp from {src}")));
        step
    }

    fn decide(&mut self, env: &Env) -> Step {
        if self.is_root {
            let commit = self.state == TwoPcState::Prepare && self.root_may_commit(env);
            self.root_decide(env, commit)
        } else {
            let vote = if self.votes.values().any(|v| *v == VoteStatus::PrepareUnknown) {
                VoteStatus::PrepareUnknown
            } else if self.any_vote_negative() || self.own_status == VoteStatus::No {
                VoteStatus::No
            } else {
                VoteStatus::Ok
            };
            let handler = if vote == VoteStatus::Ok { "handle_2pc_commit_decided" } else { "handle_2pc_abort_decided" };
            let mut step = Step::new(handler);
            self.vote_sent = Some(vote);
            let parent = self.parent.expect("decide_enabled checks parent");
            step.outputs.push(self.msg(MessageKind::PrepareResp(vote), parent));
            step
        }
    }

    fn root_decide(&mut self, env: &Env, commit: bool) -> Step {
        let (handler, state, kind) = if commit {
            ("handle_2pc_commit_decided", TwoPcState::Commit, MessageKind::Commit)
        } else {
            ("handle_2pc_abort_decided", TwoPcState::Abort, MessageKind::Abort)
        };
        let mut step = Step::new(handler);
        self.apply_merge();
        self.state = state;
        self.reset_acks();
        let outcome = root_user_response(self.provenance, &self.votes, commit);
        if !env.logged() {
            self.decision_log_persisted = true;
            self.fan_out(kind, &mut step.outputs);
            step.outputs.push(Output::UserReply(outcome));
            return step;
        }
        if self.children.is_empty() {
            // One-phase commit: the only participant persists, then replies.
            self.decision_log_pending = true;
            step.outputs.push(Output::Append {
                kind: self.decision_entry(),
                purpose: LogPurpose::Decision,
                sync: true,
            });
            return step;
        }
        step.outputs.push(Output::UserReply(outcome));
        if env.variant.coordinator_commit_log {
            if commit && env.variant.release_messages {
                self.fan_out(MessageKind::Release, &mut step.outputs);
            }
            self.decision_log_pending = true;
            step.outputs.push(Output::Append {
                kind: self.decision_entry(),
                purpose: LogPurpose::Decision,
                sync: true,
            });
        } else {
            self.decision_log_persisted = true;
            self.fan_out(kind, &mut step.outputs);
        }
        step
    }

    fn handle_decision_request(&mut self, env: &Env, src: LogStreamId, commit: bool) -> Step {
        let (handler, orphan_handler, target, conflicting) = if commit {
            ("handle_2pc_commit_request", "handle_orphan_commit_request", TwoPcState::Commit, TwoPcState::Abort)
        } else {
            ("handle_2pc_abort_request", "handle_orphan_abort_request", TwoPcState::Abort, TwoPcState::Commit)
        };
        if self.is_root {
            let mut step = Step::new("ignore_decision_at_root");
            // The root has no parent to obey. In logged mode it still
            // acknowledges a matching decision so the sender can forget.
            if env.logged() && (self.state == target || self.state == TwoPcState::Tombstone) {
                step.outputs.push(self.msg(MessageKind::Ack, src));
            } else if self.state == conflicting {
                step.outputs.push(Output::Violation(format!(
                    "{} received at root in {}",
                    if commit { "Commit" } else { "Abort" },
                    self.state
                )));
            }
            return step;
        }
        match self.state {
            TwoPcState::Running | TwoPcState::Prepare => {
                let mut step = Step::new(handler);
                self.record_parent(src);
                self.apply_merge();
                self.state = target;
                self.reset_acks();
                self.fan_out(self.decision_message(), &mut step.outputs);
                if env.logged() {
                    self.decision_log_pending = true;
                    self.pending_acks.insert(src);
                    step.outputs.push(Output::Append {
                        kind: self.decision_entry(),
                        purpose: LogPurpose::Decision,
                        sync: true,
                    });
                } else {
                    self.decision_log_persisted = true;
                    step.outputs.push(self.msg(MessageKind::Ack, src));
                }
                step
            }
            s if s == target || s == TwoPcState::Tombstone => {
                let mut step = Step::new(orphan_handler);
                if env.logged() && self.decision_log_pending {
                    self.pending_acks.insert(src);
                } else {
                    step.outputs.push(self.msg(MessageKind::Ack, src));
                }
                step
            }
            _ => {
                let mut step = Step::new("conflicting_decision");
                step.outputs.push(Output::Violation(format!(
                    "{} received at node {} in {}",
                    if commit { "Commit" } else { "Abort" },
                    self.node,
                    self.state
                )));
                step
            }
        }
    }

    fn handle_ack(&mut self, src: LogStreamId) -> Step {
        let mut step = Step::new("handle_2pc_ack_response");
        if self.state.is_decided() && self.acks.get(&src) == Some(&false) {
            self.acks.insert(src, true);
        } else {
            step.handler = "drop_ack";
            step.outputs.push(Output::Anomaly(format!("unexpected Ack from {src}")));
        }
        step
    }

    fn handle_release(&mut self) -> Step {
        let mut step = Step::new("handle_release");
        if !self.release_seen {
            self.release_seen = true;
            self.fan_out(MessageKind::Release, &mut step.outputs);
        }
        step
    }

    fn forget_ctx(&mut self, env: &Env) -> Step {
        let mut step = Step::new("forget_ctx");
        if !env.logged() {
            self.state = TwoPcState::Tombstone;
            return step;
        }
        let v = env.variant;
        let (write, sync) = if v.clear_stage {
            (!self.is_root, true)
        } else if v.d2pc_clear {
            (self.is_root, false)
        } else if self.is_root {
            (v.coordinator_commit_log, false)
        } else {
            (!self.children.is_empty(), false)
        };
        if write {
            step.outputs.push(Output::Append { kind: LogEntryKind::Clear, purpose: LogPurpose::Clear, sync });
        }
        if write && sync {
            self.clear_pending = true;
        } else {
            self.state = TwoPcState::Tombstone;
        }
        step
    }

    fn internal_abort(&mut self) -> Step {
        let mut step = Step::new("internal_abort");
        if self.state != TwoPcState::Running || self.prepare_started {
            step.handler = "internal_abort_ignored";
            return step;
        }
        self.apply_merge();
        self.state = TwoPcState::Abort;
        self.reset_acks();
        self.decision_log_persisted = true;
        self.fan_out(MessageKind::Abort, &mut step.outputs);
        if let Some(p) = self.parent {
            step.outputs.push(self.msg(MessageKind::PrepareResp(VoteStatus::No), p));
        }
        step
    }

    fn on_log_persisted(&mut self, purpose: LogPurpose, ts: Timestamp) -> Step {
        let mut step = Step::new("log_persisted");
        match purpose {
            LogPurpose::Prepare => {
                step.handler = "prepare_log_persisted";
                self.last_2pc_log_ts = ts;
                self.prepare_log_persisted = true;
                if self.state == TwoPcState::Running && self.prepare_started {
                    self.state = TwoPcState::Prepare;
                }
                for src in std::mem::take(&mut self.deferred_dup_replies) {
                    step.outputs.push(self.msg(MessageKind::PrepareResp(VoteStatus::Ok), src));
                }
            }
            LogPurpose::Decision => {
                step.handler = "decision_log_persisted";
                self.last_2pc_log_ts = ts;
                self.decision_log_pending = false;
                self.decision_log_persisted = true;
                for src in std::mem::take(&mut self.pending_acks) {
                    step.outputs.push(self.msg(MessageKind::Ack, src));
                }
                if self.is_root {
                    if self.children.is_empty() {
                        let outcome =
                            root_user_response(self.provenance, &self.votes, self.state == TwoPcState::Commit);
                        step.outputs.push(Output::UserReply(outcome));
                    } else {
                        self.fan_out(self.decision_message(), &mut step.outputs);
                    }
                }
            }
            LogPurpose::Clear => {
                step.handler = "clear_log_persisted";
                if self.clear_pending {
                    self.clear_pending = false;
                    self.state = TwoPcState::Tombstone;
                }
            }
        }
        step
    }

    /// Rebuilds a context from the persisted entries of this transaction on
    /// its stream, oldest first. Returns `None` when nothing relevant was
    /// persisted. The returned outputs re-drive the protocol: PrepareReq to
    /// children of a prepared node, decision messages and Acks for a decided
    /// one.
    pub fn recover(
        txn: TxnId,
        node: LogStreamId,
        is_root: bool,
        entries: &[&LogEntryKind],
    ) -> Option<(TxnContext, Vec<Output>)> {
        let mut ctx = TxnContext::new(txn, node);
        ctx.is_root = is_root;
        let mut found = false;
        let mut out = Vec::new();
        let last_2pc = entries.iter().rposition(|e| e.is_2pc());
        for e in entries {
            if let LogEntryKind::TransferIn { .. } = e {
                found = true;
            }
        }
        if let Some(i) = last_2pc {
            found = true;
            match entries[i] {
                LogEntryKind::Prepare { parent, participants, incr_parts, status } => {
                    ctx.parent = *parent;
                    ctx.own_status = *status;
                    ctx.incr_children = incr_parts.clone();
                    ctx = ctx.with_children(participants.union(incr_parts).copied().collect());
                    ctx.state = TwoPcState::Prepare;
                    ctx.prepare_started = true;
                    ctx.prepare_log_persisted = true;
                    for c in ctx.children.clone() {
                        out.push(ctx.msg(MessageKind::PrepareReq, c));
                    }
                }
                LogEntryKind::Commit { parent, participants, incr_parts }
                | LogEntryKind::Abort { parent, participants, incr_parts } => {
                    let commit = matches!(entries[i], LogEntryKind::Commit { .. });
                    ctx.parent = *parent;
                    ctx.incr_children = incr_parts.clone();
                    ctx = ctx.with_children(participants.union(incr_parts).copied().collect());
                    ctx.state = if commit { TwoPcState::Commit } else { TwoPcState::Abort };
                    ctx.prepare_started = true;
                    ctx.prepare_log_persisted = true;
                    ctx.decision_log_persisted = true;
                    let kind = ctx.decision_message();
                    for c in ctx.children.clone() {
                        out.push(ctx.msg(kind, c));
                    }
                    if let Some(p) = ctx.parent {
                        out.push(ctx.msg(MessageKind::Ack, p));
                    }
                    if entries[i + 1..].iter().any(|e| matches!(e, LogEntryKind::Clear)) {
                        ctx.state = TwoPcState::Tombstone;
                        out.clear();
                    }
                }
                _ => unreachable!("rposition matched a 2PC entry"),
            }
        }
        found.then_some((ctx, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(n: u32) -> LogStreamId {
        LogStreamId(n)
    }

    fn set(ids: &[u32]) -> BTreeSet<LogStreamId> {
        ids.iter().map(|i| LogStreamId(*i)).collect()
    }

    fn abstract_env() -> Env {
        Env::new(ProtocolVariant::plain(), Fidelity::Abstract)
    }

    fn logged_env(v: ProtocolVariant) -> Env {
        Env::new(v, Fidelity::Logged)
    }

    fn sends(step: &Step) -> Vec<Message> {
        step.outputs
            .iter()
            .filter_map(|o| match o {
                Output::Send(m) => Some(*m),
                _ => None,
            })
            .collect()
    }

    fn msg(kind: MessageKind, src: u32, dst: u32) -> Input {
        Input::Msg(Message::new(kind, ls(src), ls(dst), TxnId(1)))
    }

    #[test]
    fn root_start_sends_prepare_to_children() {
        let mut root = TxnContext::root(TxnId(1), ls(0), set(&[1]));
        let step = root.handle(&abstract_env(), Input::UserCommit);
        assert_eq!(root.state, TwoPcState::Prepare);
        assert_eq!(sends(&step), vec![Message::new(MessageKind::PrepareReq, ls(0), ls(1), TxnId(1))]);
    }

    #[test]
    fn leaf_prepare_has_no_fanout_and_commit_decided_enabled() {
        let env = abstract_env();
        let mut leaf = TxnContext::new(TxnId(1), ls(1));
        let step = leaf.handle(&env, msg(MessageKind::PrepareReq, 0, 1));
        assert!(sends(&step).is_empty());
        assert_eq!(leaf.state, TwoPcState::Prepare);
        assert!(leaf.internal_enabled(&env));
        let vote = leaf.handle(&env, Input::Internal);
        assert_eq!(sends(&vote), vec![Message::new(MessageKind::PrepareResp(VoteStatus::Ok), ls(1), ls(0), TxnId(1))]);
        assert_eq!(leaf.state, TwoPcState::Prepare, "non-root stays PREPARE after voting");
    }

    #[test]
    fn prepare_merges_intermediate_children() {
        let env = abstract_env();
        let mut a = TxnContext::new(TxnId(1), ls(1));
        assert!(a.add_intermediate_participant(ls(4)));
        let step = a.handle(&env, msg(MessageKind::PrepareReq, 0, 1));
        assert_eq!(a.children, set(&[4]));
        assert!(a.interm_children.is_empty());
        assert_eq!(a.incr_children, set(&[4]));
        assert_eq!(a.votes.get(&ls(4)), Some(&VoteStatus::Unknown));
        assert_eq!(sends(&step), vec![Message::new(MessageKind::PrepareReq, ls(1), ls(4), TxnId(1))]);
    }

    #[test]
    fn duplicate_prepare_from_non_parent_replies_ok() {
        let env = abstract_env();
        let mut b = TxnContext::new(TxnId(1), ls(2)).with_children(set(&[3]));
        b.handle(&env, msg(MessageKind::PrepareReq, 1, 2));
        let before = b.clone();
        let first = b.handle(&env, msg(MessageKind::PrepareReq, 5, 2));
        let second = b.handle(&env, msg(MessageKind::PrepareReq, 5, 2));
        assert_eq!(first, second);
        assert_eq!(sends(&first), vec![Message::new(MessageKind::PrepareResp(VoteStatus::Ok), ls(2), ls(5), TxnId(1))]);
        assert_eq!(b, before);
    }

    #[test]
    fn logged_duplicate_prepare_waits_for_own_log() {
        let env = logged_env(ProtocolVariant::release());
        let mut b = TxnContext::new(TxnId(1), ls(2)).with_children(set(&[3]));
        b.handle(&env, msg(MessageKind::PrepareReq, 1, 2));
        assert_eq!(b.state, TwoPcState::Running);
        let dup = b.handle(&env, msg(MessageKind::PrepareReq, 5, 2));
        assert!(sends(&dup).is_empty());
        let persisted = b.handle(&env, Input::LogPersisted { purpose: LogPurpose::Prepare, ts: Timestamp(7) });
        assert_eq!(b.state, TwoPcState::Prepare);
        assert_eq!(b.last_2pc_log_ts, Timestamp(7));
        assert_eq!(
            sends(&persisted),
            vec![Message::new(MessageKind::PrepareResp(VoteStatus::Ok), ls(2), ls(5), TxnId(1))]
        );
    }

    #[test]
    fn orphan_prepare_at_abort_replies_no_and_records_parent() {
        let env = abstract_env();
        let mut n = TxnContext::new(TxnId(1), ls(2));
        n.handle(&env, Input::InternalAbort);
        let step = n.handle(&env, msg(MessageKind::PrepareReq, 1, 2));
        assert_eq!(n.parent, Some(ls(1)));
        assert_eq!(sends(&step), vec![Message::new(MessageKind::PrepareResp(VoteStatus::No), ls(2), ls(1), TxnId(1))]);
    }

    #[test]
    fn tombstone_orphan_prepare_uses_inquiry_answer() {
        let mut env = abstract_env();
        env.inquiry = VoteStatus::PrepareUnknown;
        let mut n = TxnContext::new(TxnId(1), ls(2));
        n.state = TwoPcState::Tombstone;
        let step = n.handle(&env, msg(MessageKind::PrepareReq, 1, 2));
        assert_eq!(sends(&step)[0].kind, MessageKind::PrepareResp(VoteStatus::PrepareUnknown));
    }

    #[test]
    fn votes_recorded_once_and_no_sets_own_status() {
        let env = abstract_env();
        let mut root = TxnContext::root(TxnId(1), ls(0), set(&[1, 2]));
        root.handle(&env, Input::UserCommit);
        root.handle(&env, msg(MessageKind::PrepareResp(VoteStatus::Ok), 1, 0));
        assert_eq!(root.votes[&ls(1)], VoteStatus::Ok);
        let stale = root.handle(&env, msg(MessageKind::PrepareResp(VoteStatus::No), 1, 0));
        assert_eq!(stale.handler, "drop_prepare_response");
        assert_eq!(root.votes[&ls(1)], VoteStatus::Ok);
        root.handle(&env, msg(MessageKind::PrepareResp(VoteStatus::No), 2, 0));
        assert_eq!(root.own_status, VoteStatus::No);
        let step = root.handle(&env, Input::Internal);
        assert_eq!(root.state, TwoPcState::Abort);
        assert!(step.outputs.contains(&Output::UserReply(UserOutcome::Aborted)));
        assert_eq!(sends(&step).len(), 2);
    }

    #[test]
    fn mutant_root_commits_despite_no() {
        let mut env = abstract_env();
        env.mutation = Some(Mutation::CommitOnNo);
        let mut root = TxnContext::root(TxnId(1), ls(0), set(&[1]));
        root.handle(&env, Input::UserCommit);
        root.handle(&env, msg(MessageKind::PrepareResp(VoteStatus::No), 1, 0));
        root.handle(&env, Input::Internal);
        assert_eq!(root.state, TwoPcState::Commit);
    }

    #[test]
    fn commit_request_in_running_commits_and_acks() {
        let env = abstract_env();
        let mut a = TxnContext::new(TxnId(1), ls(1)).with_children(set(&[2]));
        let step = a.handle(&env, msg(MessageKind::Commit, 0, 1));
        assert_eq!(a.state, TwoPcState::Commit);
        assert_eq!(a.parent, Some(ls(0)));
        assert_eq!(
            sends(&step),
            vec![
                Message::new(MessageKind::Commit, ls(1), ls(2), TxnId(1)),
                Message::new(MessageKind::Ack, ls(1), ls(0), TxnId(1)),
            ]
        );
    }

    #[test]
    fn commit_request_merges_pending_child() {
        let env = abstract_env();
        let mut c = TxnContext::new(TxnId(1), ls(3));
        c.handle(&env, msg(MessageKind::PrepareReq, 0, 3));
        c.add_intermediate_participant(ls(7));
        let step = c.handle(&env, msg(MessageKind::Commit, 0, 3));
        assert!(sends(&step).contains(&Message::new(MessageKind::Commit, ls(3), ls(7), TxnId(1))));
    }

    #[test]
    fn orphan_commit_acks_and_conflict_is_flagged() {
        let env = abstract_env();
        let mut n = TxnContext::new(TxnId(1), ls(1));
        n.handle(&env, msg(MessageKind::Commit, 0, 1));
        let dup = n.handle(&env, msg(MessageKind::Commit, 0, 1));
        assert_eq!(dup.handler, "handle_orphan_commit_request");
        assert_eq!(sends(&dup), vec![Message::new(MessageKind::Ack, ls(1), ls(0), TxnId(1))]);
        n.state = TwoPcState::Tombstone;
        let ts = n.handle(&env, msg(MessageKind::Commit, 0, 1));
        assert_eq!(sends(&ts).len(), 1);

        let mut m = TxnContext::new(TxnId(1), ls(2));
        m.handle(&env, Input::InternalAbort);
        let bad = m.handle(&env, msg(MessageKind::Commit, 0, 2));
        assert!(matches!(bad.outputs[0], Output::Violation(_)));
        assert_eq!(m.state, TwoPcState::Abort);
    }

    #[test]
    fn leaf_forgets_immediately_and_d2pc_skips_clear() {
        let env = abstract_env();
        let mut leaf = TxnContext::new(TxnId(1), ls(1));
        leaf.handle(&env, msg(MessageKind::Commit, 0, 1));
        assert!(leaf.internal_enabled(&env));
        leaf.handle(&env, Input::Internal);
        assert_eq!(leaf.state, TwoPcState::Tombstone);

        let v: ProtocolVariant = "release,d2pc".parse().unwrap();
        let env = logged_env(v);
        let mut mid = TxnContext::new(TxnId(1), ls(1)).with_children(set(&[2]));
        mid.handle(&env, msg(MessageKind::Commit, 0, 1));
        mid.handle(&env, Input::LogPersisted { purpose: LogPurpose::Decision, ts: Timestamp(3) });
        mid.handle(&env, msg(MessageKind::Ack, 2, 1));
        let step = mid.handle(&env, Input::Internal);
        assert_eq!(step.handler, "forget_ctx");
        assert_eq!(mid.state, TwoPcState::Tombstone);
        assert!(step.outputs.is_empty());
    }

    #[test]
    fn internal_abort_notifies_recorded_parent_only() {
        let env = abstract_env();
        let mut orphan = TxnContext::new(TxnId(1), ls(1)).with_children(set(&[2]));
        let step = orphan.handle(&env, Input::InternalAbort);
        assert_eq!(sends(&step), vec![Message::new(MessageKind::Abort, ls(1), ls(2), TxnId(1))]);
        let mut child = TxnContext::new(TxnId(1), ls(1));
        child.parent = Some(ls(0));
        let step = child.handle(&env, Input::InternalAbort);
        assert_eq!(sends(&step), vec![Message::new(MessageKind::PrepareResp(VoteStatus::No), ls(1), ls(0), TxnId(1))]);
    }

    #[test]
    fn add_intermediate_participant_guards() {
        let mut a = TxnContext::new(TxnId(1), ls(1)).with_children(set(&[2]));
        assert!(!a.add_intermediate_participant(ls(2)));
        assert!(!a.add_intermediate_participant(ls(1)));
        assert!(a.add_intermediate_participant(ls(4)));
        assert!(!a.add_intermediate_participant(ls(4)));
        a.state = TwoPcState::Tombstone;
        assert!(!a.add_intermediate_participant(ls(5)));
    }

    #[test]
    fn release_root_replies_then_logs_then_commits() {
        let env = logged_env(ProtocolVariant::release());
        let mut root = TxnContext::root(TxnId(1), ls(0), set(&[1]));
        root.handle(&env, Input::UserCommit);
        root.handle(&env, msg(MessageKind::PrepareResp(VoteStatus::Ok), 1, 0));
        let step = root.handle(&env, Input::Internal);
        assert!(step.outputs.contains(&Output::UserReply(UserOutcome::Committed)));
        assert_eq!(sends(&step), vec![Message::new(MessageKind::Release, ls(0), ls(1), TxnId(1))]);
        assert!(step.appends_2pc_log());
        let after = root.handle(&env, Input::LogPersisted { purpose: LogPurpose::Decision, ts: Timestamp(9) });
        assert_eq!(sends(&after), vec![Message::new(MessageKind::Commit, ls(0), ls(1), TxnId(1))]);
    }

    #[test]
    fn one_phase_root_replies_after_log() {
        let env = logged_env(ProtocolVariant::plain());
        let mut root = TxnContext::root(TxnId(1), ls(0), BTreeSet::new());
        root.handle(&env, Input::UserCommit);
        let step = root.handle(&env, Input::Internal);
        assert!(step.appends_2pc_log());
        assert!(!step.outputs.iter().any(|o| matches!(o, Output::UserReply(_))));
        let after = root.handle(&env, Input::LogPersisted { purpose: LogPurpose::Decision, ts: Timestamp(2) });
        assert_eq!(after.outputs, vec![Output::UserReply(UserOutcome::Committed)]);
    }

    #[test]
    fn recovery_from_prepare_log_restores_participants() {
        let entry = LogEntryKind::Prepare {
            parent: Some(ls(0)),
            participants: set(&[2]),
            incr_parts: set(&[5]),
            status: VoteStatus::Ok,
        };
        let (ctx, out) = TxnContext::recover(TxnId(1), ls(1), false, &[&entry]).unwrap();
        assert_eq!(ctx.state, TwoPcState::Prepare);
        assert_eq!(ctx.children, set(&[2, 5]));
        assert_eq!(ctx.incr_children, set(&[5]));
        assert_eq!(ctx.parent, Some(ls(0)));
        assert_eq!(out.len(), 2);
        let again = TxnContext::recover(TxnId(1), ls(1), false, &[&entry]).unwrap();
        assert_eq!(again.0, ctx);
        assert!(TxnContext::recover(TxnId(1), ls(1), false, &[]).is_none());
    }

    #[test]
    fn variant_parsing() {
        let v: ProtocolVariant = "release".parse().unwrap();
        assert!(v.coordinator_commit_log && v.release_messages);
        assert_eq!(v.to_string(), "coordinator_commit_log+release_messages");
        assert_eq!("tdt".parse::<ProtocolVariant>().unwrap().to_string(), "unknown_states+tdt");
        assert!("bogus".parse::<ProtocolVariant>().is_err());
        assert!("clear-stage,commit-log".parse::<ProtocolVariant>().is_err());
        let raw = ProtocolVariant { tdt: true, ..Default::default() };
        assert_eq!(raw.validate(), Err(VariantError::TdtWithoutUnknown));
    }
}
