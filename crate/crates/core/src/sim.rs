//! Deterministic discrete-event simulator.
//!
//! Events fire in `(time, sequence)` order. The only randomness is message
//! delay jitter drawn from a ChaCha generator seeded by the configuration,
//! so a given setup and configuration always produce the same trace.
//!
//! Handlers are pure: the simulator runs each step on a copy of the context
//! and commits it only if the step may proceed. A step is deferred (and
//! retried later) while its context is blocked by a transfer, or when it
//! would append a 2PC log while its stream's transfer lock is held.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::ScenarioError;
use crate::log_engine::{AppendPurpose, LogStream};
use crate::metrics::{Causal, CausalPoint, TxnMetrics};
use crate::state_machine::{Env, Fidelity, Input, Mutation, Output, ProtocolVariant, TxnContext};
use crate::trace::{NodeProjection, Projection, Trace, TraceRecord};
use crate::transfer::{
    build_log_stream_tree, check_minimum_set, check_transfer_principle, LogStreamTree, PrincipleViolation,
    TransferEvent, TransferPhase, TransferState,
};
use crate::types::{
    LogEntry, LogEntryKind, LogStreamId, Message, MessageKind, MigratedContext, PartitionId, Time, Timestamp,
    TwoPcState, TxnId, UserOutcome,
};
use crate::unknown::{resolve_inquiry, LieDetector, Provenance, DEFAULT_TDT_RETENTION};

/// Largest world the abstract projection (and the checker) supports.
pub const MAX_ABSTRACT_STREAMS: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub msg_delay: Time,
    pub log_sync_delay: Time,
    /// Upper bound of a uniform addend to every message delay.
    pub jitter: Time,
    pub seed: u64,
    pub variant: ProtocolVariant,
    pub fidelity: Fidelity,
    pub mutation: Option<Mutation>,
    pub max_events: u64,
    /// Recorded partitions per context before every transfer out of the
    /// stream is treated as affecting the transaction.
    pub partition_cap: usize,
    pub tdt_retention: Time,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            msg_delay: 10,
            log_sync_delay: 5,
            jitter: 0,
            seed: 0,
            variant: ProtocolVariant::plain(),
            fidelity: Fidelity::Logged,
            mutation: None,
            max_events: 1_000_000,
            partition_cap: 64,
            tdt_retention: DEFAULT_TDT_RETENTION,
        }
    }
}

/// One transaction: the streams it touched (as a tree rooted at the
/// coordinator) and when the user asks to commit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxnSpec {
    pub id: TxnId,
    pub root: LogStreamId,
    pub partitions: Vec<PartitionId>,
    pub start: Time,
    pub commit_at: Time,
    /// (parent, child) edges of the initial participant tree.
    pub edges: Vec<(LogStreamId, LogStreamId)>,
    /// Streams whose local vote is NO.
    pub vote_no: Vec<LogStreamId>,
}

impl TxnSpec {
    pub fn participants(&self) -> BTreeSet<LogStreamId> {
        let mut s = BTreeSet::from([self.root]);
        for (p, c) in &self.edges {
            s.insert(*p);
            s.insert(*c);
        }
        s
    }

    pub fn children_of(&self, n: LogStreamId) -> BTreeSet<LogStreamId> {
        self.edges.iter().filter(|(p, _)| *p == n).map(|(_, c)| *c).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    /// Lose the first reply to the user; optionally retry the commit at
    /// `retry_at` with a recreated root.
    DropUserResponse {
        txn: TxnId,
        retry_at: Option<Time>,
    },
    ReclaimContext {
        at: Time,
        stream: LogStreamId,
        txn: TxnId,
    },
    Crash {
        at: Time,
        stream: LogStreamId,
    },
    InternalAbort {
        at: Time,
        stream: LogStreamId,
        txn: TxnId,
    },
    /// Deliver every matching message twice.
    Duplicate {
        txn: TxnId,
        kind: String,
        dst: Option<LogStreamId>,
    },
}

impl Fault {
    fn at(&self) -> Option<Time> {
        match self {
            Fault::ReclaimContext { at, .. } | Fault::Crash { at, .. } | Fault::InternalAbort { at, .. } => Some(*at),
            _ => None,
        }
    }
}

/// Everything the simulator runs: topology, transactions and schedules.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimSetup {
    pub streams: u32,
    pub homes: BTreeMap<PartitionId, LogStreamId>,
    pub txns: Vec<TxnSpec>,
    pub transfers: Vec<TransferEvent>,
    pub faults: Vec<Fault>,
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid(msg.into())
}

impl SimSetup {
    pub fn validate(&self, cfg: &SimConfig) -> Result<(), ScenarioError> {
        cfg.variant.validate()?;
        let abstract_mode = cfg.fidelity == Fidelity::Abstract;
        if self.streams == 0 {
            return Err(invalid("at least one stream is required"));
        }
        if abstract_mode && self.streams > MAX_ABSTRACT_STREAMS {
            return Err(invalid(format!("abstract mode supports at most {MAX_ABSTRACT_STREAMS} streams")));
        }
        if abstract_mode && (cfg.variant.unknown_states || cfg.variant.tdt) {
            return Err(invalid("abstract mode does not model unknown states or the TDT"));
        }
        let stream_ok = |s: LogStreamId, what: &str| {
            if s.0 < self.streams {
                Ok(())
            } else {
                Err(invalid(format!("{what} refers to unknown stream {s}")))
            }
        };
        for (p, s) in &self.homes {
            stream_ok(*s, &format!("partition {p}"))?;
        }
        let mut ids = BTreeSet::new();
        for t in &self.txns {
            let what = format!("txn {}", t.id);
            if !ids.insert(t.id) {
                return Err(invalid(format!("duplicate {what}")));
            }
            if t.start > t.commit_at {
                return Err(invalid(format!("{what} commits before it starts")));
            }
            stream_ok(t.root, &what)?;
            let mut has_parent = BTreeSet::new();
            for (p, c) in &t.edges {
                stream_ok(*p, &what)?;
                stream_ok(*c, &what)?;
                if p == c || *c == t.root || !has_parent.insert(*c) {
                    return Err(invalid(format!("{what}: edge {p}->{c} does not form a tree")));
                }
            }
            let mut reached = BTreeSet::from([t.root]);
            let mut queue = VecDeque::from([t.root]);
            while let Some(n) = queue.pop_front() {
                for c in t.children_of(n) {
                    if reached.insert(c) {
                        queue.push_back(c);
                    }
                }
            }
            if reached != t.participants() {
                return Err(invalid(format!("{what}: edges are not reachable from the root")));
            }
            for p in &t.partitions {
                let home = self.homes.get(p).ok_or_else(|| invalid(format!("{what} touches unknown partition {p}")))?;
                if !reached.contains(home) {
                    return Err(invalid(format!("{what}: partition {p} is homed on non-participant {home}")));
                }
            }
            if let Some(s) = t.vote_no.iter().find(|s| !reached.contains(s)) {
                return Err(invalid(format!("{what}: vote_no stream {s} is not a participant")));
            }
        }
        let mut homes = self.homes.clone();
        let mut order: Vec<&TransferEvent> = self.transfers.iter().collect();
        order.sort_by_key(|e| e.at);
        for e in order {
            let what = format!("transfer of partition {} at {}", e.partition, e.at);
            stream_ok(e.src, &what)?;
            stream_ok(e.dst, &what)?;
            if e.src == e.dst {
                return Err(invalid(format!("{what}: source equals destination")));
            }
            match homes.get(&e.partition) {
                Some(h) if *h == e.src => {
                    homes.insert(e.partition, e.dst);
                }
                Some(h) => return Err(invalid(format!("{what}: partition is on {h}, not {}", e.src))),
                None => return Err(invalid(format!("{what}: unknown partition"))),
            }
        }
        for f in &self.faults {
            let txn_ok = |t: &TxnId| {
                if ids.contains(t) {
                    Ok(())
                } else {
                    Err(invalid(format!("fault refers to unknown txn {t}")))
                }
            };
            match f {
                Fault::DropUserResponse { txn, .. } => txn_ok(txn)?,
                Fault::ReclaimContext { stream, txn, .. } | Fault::InternalAbort { stream, txn, .. } => {
                    txn_ok(txn)?;
                    stream_ok(*stream, "fault")?;
                }
                Fault::Crash { stream, .. } => stream_ok(*stream, "fault")?,
                Fault::Duplicate { txn, kind, dst } => {
                    txn_ok(txn)?;
                    if let Some(d) = dst {
                        stream_ok(*d, "fault")?;
                    }
                    const KINDS: [&str; 6] = ["PrepareReq", "PrepareResp", "Commit", "Abort", "Ack", "Release"];
                    if !KINDS.contains(&kind.as_str()) {
                        return Err(invalid(format!("unknown message kind {kind:?}")));
                    }
                }
            }
            let forbidden =
                matches!(f, Fault::DropUserResponse { .. } | Fault::ReclaimContext { .. } | Fault::Crash { .. });
            if abstract_mode && forbidden {
                return Err(invalid("abstract mode supports only internal_abort and duplicate faults"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Event {
    TxnStart(usize),
    UserCommit(usize),
    Deliver(Message),
    Persist { stream: LogStreamId, seq: u64, epoch: u64 },
    TransferStart(usize),
    Fault(usize),
    Retry(usize),
    Internal(LogStreamId, TxnId),
    Redeliver(LogStreamId, TxnId, Input),
}

/// Result of one simulation run.
#[derive(Debug, Clone)]
pub struct SimReport {
    /// Outcomes delivered to the user, per transaction, in order.
    pub outcomes: BTreeMap<TxnId, Vec<UserOutcome>>,
    /// Safety violations: inconsistent or unstable decisions, conflicting
    /// decision messages.
    pub violations: Vec<String>,
    /// Transactions that did not terminate, and other liveness failures.
    pub liveness: Vec<String>,
    /// Transactions for which the user observed ABORTED after a commit.
    pub lies: Vec<TxnId>,
    pub principle: Result<(), Vec<PrincipleViolation>>,
    pub minimum_set: BTreeMap<TxnId, Result<(), BTreeSet<LogStreamId>>>,
    pub trees: BTreeMap<TxnId, LogStreamTree>,
    pub trace: Trace,
    pub metrics: BTreeMap<TxnId, TxnMetrics>,
    pub streams: BTreeMap<LogStreamId, LogStream>,
    pub homes: BTreeMap<PartitionId, LogStreamId>,
    /// Per transaction: (phase, stream) to the transfer destinations merged
    /// into that stream's children on entering the phase.
    pub merged_at: BTreeMap<TxnId, BTreeMap<(String, LogStreamId), BTreeSet<LogStreamId>>>,
    /// Per transaction: phase to the streams that entered it.
    pub phase_members: BTreeMap<TxnId, BTreeMap<String, BTreeSet<LogStreamId>>>,
    pub transfers_completed: usize,
    pub events: u64,
    pub end_time: Time,
}

impl SimReport {
    pub fn final_outcome(&self, txn: TxnId) -> Option<UserOutcome> {
        self.outcomes.get(&txn).and_then(|v| v.last().copied())
    }

    /// No safety or liveness failure and the transfer checks passed.
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
            && self.liveness.is_empty()
            && self.principle.is_ok()
            && self.minimum_set.values().all(Result::is_ok)
    }

    pub fn logs(&self) -> BTreeMap<LogStreamId, Vec<LogEntry>> {
        self.streams.iter().map(|(id, s)| (*id, s.entries().to_vec())).collect()
    }
}

/// Validates and runs a setup to quiescence.
pub fn run(setup: &SimSetup, cfg: &SimConfig) -> Result<SimReport, ScenarioError> {
    setup.validate(cfg)?;
    let mut sim = Simulator::new(setup.clone(), *cfg);
    sim.run();
    Ok(sim.finish())
}

struct Simulator {
    cfg: SimConfig,
    setup: SimSetup,
    txn_index: BTreeMap<TxnId, usize>,
    now: Time,
    tick: u64,
    seq: u64,
    events: u64,
    queue: BTreeMap<(Time, u64), (Event, Causal)>,
    streams: BTreeMap<LogStreamId, LogStream>,
    epochs: BTreeMap<LogStreamId, u64>,
    homes: BTreeMap<PartitionId, LogStreamId>,
    transfers: Vec<TransferState>,
    lock_waiters: BTreeMap<LogStreamId, VecDeque<usize>>,
    deferred: BTreeMap<LogStreamId, Vec<(TxnId, Input, Causal)>>,
    internal_scheduled: BTreeSet<(LogStreamId, TxnId)>,
    rng: ChaCha8Rng,
    trace: Trace,
    metrics: BTreeMap<TxnId, TxnMetrics>,
    outcomes: BTreeMap<TxnId, Vec<UserOutcome>>,
    lie_detector: LieDetector,
    lies: Vec<TxnId>,
    violations: Vec<String>,
    inconsistent: BTreeSet<TxnId>,
    ghost: BTreeMap<(LogStreamId, TxnId), TwoPcState>,
    drops_armed: BTreeMap<TxnId, Option<Time>>,
    dropped_without_retry: BTreeSet<TxnId>,
    sent: BTreeMap<TxnId, BTreeSet<Message>>,
    last_proj: BTreeMap<TxnId, Projection>,
    merged_at: BTreeMap<TxnId, BTreeMap<(String, LogStreamId), BTreeSet<LogStreamId>>>,
    phase_members: BTreeMap<TxnId, BTreeMap<String, BTreeSet<LogStreamId>>>,
    liveness: Vec<String>,
}

impl Simulator {
    fn new(setup: SimSetup, cfg: SimConfig) -> Self {
        let mut streams = BTreeMap::new();
        for i in 0..setup.streams {
            let id = LogStreamId(i);
            let mut s = LogStream::new(id, cfg.tdt_retention);
            s.hosted = setup.homes.iter().filter(|(_, h)| **h == id).map(|(p, _)| *p).collect();
            streams.insert(id, s);
        }
        let mut sim = Simulator {
            txn_index: setup.txns.iter().enumerate().map(|(i, t)| (t.id, i)).collect(),
            homes: setup.homes.clone(),
            transfers: setup.transfers.iter().map(|e| TransferState::new(*e)).collect(),
            epochs: streams.keys().map(|k| (*k, 0)).collect(),
            streams,
            cfg,
            now: 0,
            tick: 0,
            seq: 0,
            events: 0,
            queue: BTreeMap::new(),
            lock_waiters: BTreeMap::new(),
            deferred: BTreeMap::new(),
            internal_scheduled: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            trace: Trace::default(),
            metrics: BTreeMap::new(),
            outcomes: BTreeMap::new(),
            lie_detector: LieDetector::default(),
            lies: Vec::new(),
            violations: Vec::new(),
            inconsistent: BTreeSet::new(),
            ghost: BTreeMap::new(),
            drops_armed: BTreeMap::new(),
            dropped_without_retry: BTreeSet::new(),
            sent: BTreeMap::new(),
            last_proj: BTreeMap::new(),
            merged_at: BTreeMap::new(),
            phase_members: BTreeMap::new(),
            liveness: Vec::new(),
            setup,
        };
        for i in 0..sim.setup.txns.len() {
            let t = &sim.setup.txns[i];
            let (start, commit_at) = (t.start, t.commit_at);
            sim.schedule(start, Event::TxnStart(i), Causal::default());
            sim.schedule(commit_at, Event::UserCommit(i), Causal::default());
        }
        for i in 0..sim.transfers.len() {
            sim.schedule(sim.transfers[i].event.at, Event::TransferStart(i), Causal::default());
        }
        for i in 0..sim.setup.faults.len() {
            match &sim.setup.faults[i] {
                Fault::DropUserResponse { txn, retry_at } => {
                    sim.drops_armed.insert(*txn, *retry_at);
                }
                f => {
                    if let Some(at) = f.at() {
                        sim.schedule(at, Event::Fault(i), Causal::default());
                    }
                }
            }
        }
        sim
    }

    fn abstract_mode(&self) -> bool {
        self.cfg.fidelity == Fidelity::Abstract
    }

    fn schedule(&mut self, at: Time, ev: Event, causal: Causal) {
        self.seq += 1;
        self.queue.insert((at, self.seq), (ev, causal));
    }

    fn root_of(&self, txn: TxnId) -> Option<LogStreamId> {
        self.txn_index.get(&txn).map(|i| self.setup.txns[*i].root)
    }

    fn run(&mut self) {
        while let Some(((t, _), (ev, causal))) = self.queue.pop_first() {
            self.events += 1;
            if self.events > self.cfg.max_events {
                self.liveness.push(format!("event bound {} exceeded at t={t}", self.cfg.max_events));
                return;
            }
            self.now = t;
            self.tick += 1;
            self.handle_event(ev, causal);
        }
    }

    fn handle_event(&mut self, ev: Event, causal: Causal) {
        match ev {
            Event::TxnStart(i) => self.start_txn(i),
            Event::UserCommit(i) => {
                let (root, txn) = (self.setup.txns[i].root, self.setup.txns[i].id);
                self.dispatch(root, txn, Input::UserCommit, causal);
            }
            Event::Deliver(m) => {
                if matches!(m.kind, MessageKind::Release | MessageKind::Commit) && Some(m.dst) != self.root_of(m.txn) {
                    let point = CausalPoint { time: self.now, causal };
                    self.metrics.entry(m.txn).or_default().lock_release.entry(m.dst).or_insert(point);
                }
                self.dispatch(m.dst, m.txn, Input::Msg(m), causal);
            }
            Event::Persist { stream, seq, epoch } => {
                if self.epochs[&stream] == epoch {
                    self.persist(stream, seq, causal);
                }
            }
            Event::TransferStart(i) => self.transfer_start(i),
            Event::Fault(i) => self.apply_fault(i),
            Event::Retry(i) => self.retry(i, causal),
            Event::Internal(s, t) => {
                self.internal_scheduled.remove(&(s, t));
                self.dispatch(s, t, Input::Internal, causal);
            }
            Event::Redeliver(s, t, input) => self.dispatch(s, t, input, causal),
        }
    }

    fn partitions_on(&self, txn: TxnId, stream: LogStreamId) -> BTreeSet<PartitionId> {
        let Some(i) = self.txn_index.get(&txn) else { return BTreeSet::new() };
        self.setup.txns[*i].partitions.iter().filter(|p| self.homes.get(p) == Some(&stream)).copied().collect()
    }

    fn set_partitions(&self, ctx: &mut TxnContext, parts: BTreeSet<PartitionId>) {
        ctx.partition_overflow = parts.len() > self.cfg.partition_cap;
        ctx.partitions = parts;
    }

    fn start_txn(&mut self, i: usize) {
        let spec = self.setup.txns[i].clone();
        self.metrics.entry(spec.id).or_default().commit_at = spec.commit_at;
        for n in spec.participants() {
            let mut ctx = TxnContext::new(spec.id, n).with_children(spec.children_of(n));
            ctx.is_root = n == spec.root;
            let parts = self.partitions_on(spec.id, n);
            self.set_partitions(&mut ctx, parts);
            if !self.abstract_mode() && spec.vote_no.contains(&n) {
                ctx.own_status = crate::types::VoteStatus::No;
            }
            self.streams.get_mut(&n).expect("validated").contexts.insert(spec.id, ctx);
            self.trace.push(TraceRecord::Handler {
                time: self.now,
                stream: n,
                txn: spec.id,
                handler: "txn_start",
                input: "start".into(),
                before: TwoPcState::Running,
                after: TwoPcState::Running,
                outputs: Vec::new(),
            });
        }
        self.emit_projection(spec.id);
        if self.abstract_mode() {
            for n in &spec.vote_no {
                self.dispatch(*n, spec.id, Input::InternalAbort, Causal::default());
            }
        }
    }

    fn env_for(&self, stream: LogStreamId, txn: TxnId) -> Env {
        let mut env = Env::new(self.cfg.variant, self.cfg.fidelity);
        env.mutation = self.cfg.mutation;
        env.inquiry = resolve_inquiry(&self.streams[&stream].tdt, txn, self.now, &self.cfg.variant);
        env
    }

    fn defer(
        &mut self,
        stream: LogStreamId,
        txn: TxnId,
        input: Input,
        causal: Causal,
        why: &'static str,
        state: TwoPcState,
    ) {
        self.trace.push(TraceRecord::Handler {
            time: self.now,
            stream,
            txn,
            handler: why,
            input: input_label(&input),
            before: state,
            after: state,
            outputs: Vec::new(),
        });
        self.deferred.entry(stream).or_default().push((txn, input, causal));
    }

    fn dispatch(&mut self, stream: LogStreamId, txn: TxnId, input: Input, causal: Causal) {
        let env = self.env_for(stream, txn);
        let st = &self.streams[&stream];
        let (mut ctx, transient) = match st.contexts.get(&txn) {
            Some(c) if c.blocked_from_logging => {
                let state = c.state;
                self.defer(stream, txn, input, causal, "defer_blocked", state);
                return;
            }
            Some(c) => (c.clone(), false),
            None if self.abstract_mode() => (TxnContext::new(txn, stream), false),
            None => {
                // No context: answer as a forgotten transaction.
                let mut c = TxnContext::new(txn, stream);
                c.state = TwoPcState::Tombstone;
                (c, true)
            }
        };
        let before = ctx.clone();
        let step = ctx.handle(&env, input.clone());
        if step.appends_2pc_log() && st.transfer_lock.is_some() {
            self.defer(stream, txn, input, causal, "defer_transfer_lock", before.state);
            return;
        }
        if step.handler == "internal_noop" {
            return;
        }
        if !transient {
            self.streams.get_mut(&stream).expect("stream").contexts.insert(txn, ctx.clone());
        }
        self.trace.push(TraceRecord::Handler {
            time: self.now,
            stream,
            txn,
            handler: step.handler,
            input: input_label(&input),
            before: before.state,
            after: ctx.state,
            outputs: step.outputs.iter().map(output_label).collect(),
        });
        self.track_phase(stream, &before, &ctx);
        self.process_outputs(stream, txn, step.outputs, causal);
        if !transient {
            self.after_step(stream, txn, &before, &ctx, &env, causal);
        }
        self.emit_projection(txn);
    }

    fn track_phase(&mut self, stream: LogStreamId, before: &TxnContext, after: &TxnContext) {
        let txn = after.txn;
        let phase = match after.state {
            TwoPcState::Running if after.prepare_started => "PREPARE",
            s => s.as_str(),
        };
        let merged: BTreeSet<LogStreamId> = after.incr_children.difference(&before.incr_children).copied().collect();
        if !merged.is_empty() {
            self.merged_at.entry(txn).or_default().entry((phase.to_string(), stream)).or_default().extend(merged);
        }
        let members = self.phase_members.entry(txn).or_default();
        if !before.prepare_started && after.prepare_started {
            members.entry("PREPARE".into()).or_default().insert(stream);
        }
        for s in [TwoPcState::Commit, TwoPcState::Abort] {
            if before.state != s && after.state == s {
                members.entry(s.as_str().into()).or_default().insert(stream);
            }
        }
    }

    fn after_step(
        &mut self,
        stream: LogStreamId,
        txn: TxnId,
        before: &TxnContext,
        ctx: &TxnContext,
        env: &Env,
        causal: Causal,
    ) {
        if ctx.state == TwoPcState::Commit && before.state != TwoPcState::Commit {
            self.lie_detector.node_committed(txn);
        }
        if ctx.state.is_decided() && ctx.state != TwoPcState::Tombstone {
            let prev = self.ghost.insert((stream, txn), ctx.state);
            if prev.is_some_and(|p| p != ctx.state) {
                self.violations.push(format!(
                    "t={} stream={stream} txn={txn}: decision changed from {} to {}",
                    self.now,
                    prev.expect("checked"),
                    ctx.state
                ));
            }
        }
        self.check_consistency(txn);
        if ctx.internal_enabled(env) && self.internal_scheduled.insert((stream, txn)) {
            self.schedule(self.now, Event::Internal(stream, txn), causal);
        }
    }

    fn check_consistency(&mut self, txn: TxnId) {
        let states: Vec<TwoPcState> =
            self.streams.values().filter_map(|s| s.contexts.get(&txn)).map(|c| c.state).collect();
        if states.contains(&TwoPcState::Commit) && states.contains(&TwoPcState::Abort) && self.inconsistent.insert(txn)
        {
            self.violations.push(format!("t={} txn={txn}: COMMIT and ABORT coexist", self.now));
        }
    }

    fn process_outputs(&mut self, stream: LogStreamId, txn: TxnId, outputs: Vec<Output>, causal: Causal) {
        let is_root = self.root_of(txn) == Some(stream);
        for o in outputs {
            match o {
                Output::Send(m) => self.send(m, causal),
                Output::Append { kind, purpose, sync } => {
                    let metrics = self.metrics.entry(txn).or_default();
                    if kind.is_2pc() {
                        metrics.sync_logs += 1;
                        if !is_root {
                            metrics.participant_sync_logs += 1;
                        }
                    } else {
                        metrics.async_logs += 1;
                    }
                    let delay = self.cfg.log_sync_delay;
                    let st = self.streams.get_mut(&stream).expect("stream");
                    match st.append(kind, Some(txn), sync, AppendPurpose::Txn(purpose), self.now, delay) {
                        Ok((seq, at)) => {
                            let epoch = self.epochs[&stream];
                            self.schedule(at, Event::Persist { stream, seq, epoch }, causal.sync());
                        }
                        Err(e) => self.violations.push(format!("t={} stream={stream}: {e}", self.now)),
                    }
                }
                Output::UserReply(outcome) => self.reply(txn, outcome, causal),
                Output::Violation(v) => self.violations.push(format!("t={} stream={stream} txn={txn}: {v}", self.now)),
                Output::Anomaly(_) => {}
            }
        }
    }

    fn send(&mut self, m: Message, causal: Causal) {
        *self.metrics.entry(m.txn).or_default().msgs_by_kind.entry(m.kind.name()).or_insert(0) += 1;
        if self.abstract_mode() {
            self.sent.entry(m.txn).or_default().insert(m);
        }
        let jitter = if self.cfg.jitter > 0 { self.rng.gen_range(0..=self.cfg.jitter) } else { 0 };
        let at = self.now + self.cfg.msg_delay + jitter;
        self.schedule(at, Event::Deliver(m), causal.hop());
        let dup = self.setup.faults.iter().any(|f| {
            matches!(f, Fault::Duplicate { txn, kind, dst }
                if *txn == m.txn && kind == m.kind.name() && dst.map_or(true, |d| d == m.dst))
        });
        if dup {
            self.trace.push(TraceRecord::Fault { time: self.now, detail: format!("duplicate {m}") });
            self.schedule(at + 1, Event::Deliver(m), causal.hop());
        }
    }

    fn reply(&mut self, txn: TxnId, outcome: UserOutcome, causal: Causal) {
        if let Some(retry_at) = self.drops_armed.remove(&txn) {
            self.trace.push(TraceRecord::Outcome { time: self.now, txn, outcome, delivered: false });
            match retry_at {
                Some(at) => {
                    let i = self.txn_index[&txn];
                    self.schedule(at.max(self.now), Event::Retry(i), Causal::default());
                }
                None => {
                    self.dropped_without_retry.insert(txn);
                }
            }
            return;
        }
        self.trace.push(TraceRecord::Outcome { time: self.now, txn, outcome, delivered: true });
        self.outcomes.entry(txn).or_default().push(outcome);
        if self.lie_detector.user_observed(txn, outcome) {
            self.lies.push(txn);
        }
        let metrics = self.metrics.entry(txn).or_default();
        if metrics.response.is_none() {
            metrics.response = Some(CausalPoint { time: self.now, causal });
        }
    }

    fn retry(&mut self, i: usize, causal: Causal) {
        let spec = self.setup.txns[i].clone();
        let mut ctx = TxnContext::root(spec.id, spec.root, spec.children_of(spec.root));
        ctx.provenance = Provenance::Recreated;
        let parts = self.partitions_on(spec.id, spec.root);
        self.set_partitions(&mut ctx, parts);
        self.streams.get_mut(&spec.root).expect("stream").contexts.insert(spec.id, ctx);
        self.ghost.remove(&(spec.root, spec.id));
        self.metrics.entry(spec.id).or_default().commit_at = self.now;
        self.trace.push(TraceRecord::Fault {
            time: self.now,
            detail: format!("retry txn={} root={} provenance=RECREATED", spec.id, spec.root),
        });
        self.dispatch(spec.root, spec.id, Input::UserCommit, causal);
    }

    fn persist(&mut self, stream: LogStreamId, seq: u64, causal: Causal) {
        let ts = Timestamp(self.tick);
        let Some((entry, purpose, _)) = self.streams.get_mut(&stream).expect("stream").complete(seq, ts) else {
            return;
        };
        self.trace.push(TraceRecord::Log { time: self.now, stream, entry: entry.clone() });
        match purpose {
            AppendPurpose::Txn(p) => {
                let txn = entry.txn.expect("2PC and clear logs name their transaction");
                let decided = match entry.kind {
                    LogEntryKind::Commit { .. } => Some(true),
                    LogEntryKind::Abort { .. } => Some(false),
                    _ => None,
                };
                if let Some(committed) = decided {
                    let now = self.now;
                    if let Err(prev) = self.streams.get_mut(&stream).expect("stream").tdt.record(txn, committed, now) {
                        self.violations.push(format!(
                            "t={now} stream={stream} txn={txn}: TDT holds committed={} but log says committed={committed}",
                            prev.committed
                        ));
                    }
                }
                self.dispatch(stream, txn, Input::LogPersisted { purpose: p, ts }, causal);
            }
            AppendPurpose::TransferOut(i) => self.transfer_out_persisted(i, ts),
            AppendPurpose::TransferIn(i) => self.transfer_in_persisted(i),
        }
        let draining: Vec<usize> = (0..self.transfers.len())
            .filter(|i| self.transfers[*i].event.src == stream && self.transfers[*i].phase == TransferPhase::Draining)
            .collect();
        for i in draining {
            self.try_collect(i);
        }
    }

    fn transfer_record(&mut self, i: usize, step: String) {
        let e = self.transfers[i].event;
        self.trace.push(TraceRecord::Transfer {
            time: self.now,
            index: i,
            partition: e.partition,
            src: e.src,
            dst: e.dst,
            step,
        });
    }

    fn lock_record(&mut self, stream: LogStreamId, scope: String, holder: usize, acquired: bool) {
        self.trace.push(TraceRecord::Lock { time: self.now, stream, scope, holder, acquired });
    }

    fn transfer_start(&mut self, i: usize) {
        let e = self.transfers[i].event;
        let earlier_failed = self.transfers[..i]
            .iter()
            .any(|t| t.event.partition == e.partition && t.phase == TransferPhase::RolledBack);
        if earlier_failed {
            self.transfers[i].phase = TransferPhase::RolledBack;
            self.transfer_record(i, "skipped_after_rollback".into());
            return;
        }
        if self.homes.get(&e.partition) != Some(&e.src) {
            self.transfer_record(i, "wait_partition".into());
            self.schedule(self.now + 1, Event::TransferStart(i), Causal::default());
            return;
        }
        let st = self.streams.get_mut(&e.src).expect("stream");
        if st.transfer_lock.is_some() {
            self.lock_waiters.entry(e.src).or_default().push_back(i);
            self.transfer_record(i, "wait_lock".into());
            return;
        }
        st.transfer_lock = Some(i);
        self.lock_record(e.src, "stream".into(), i, true);
        self.transfers[i].phase = TransferPhase::Draining;
        self.try_collect(i);
    }

    /// Blocks and collects the affected contexts once no 2PC log is in
    /// flight on the source, then submits the transfer-out log.
    fn try_collect(&mut self, i: usize) {
        let e = self.transfers[i].event;
        if self.streams[&e.src].has_pending_2pc() {
            return;
        }
        let affected: Vec<TxnId> = self.streams[&e.src]
            .contexts
            .values()
            .filter(|c| c.state != TwoPcState::Tombstone)
            .filter(|c| c.partitions.contains(&e.partition) || c.partition_overflow)
            .map(|c| c.txn)
            .collect();
        let mut migrated = Vec::new();
        for txn in &affected {
            let scope = format!("txn={txn}");
            self.lock_record(e.src, scope.clone(), i, true);
            let st = self.streams.get_mut(&e.src).expect("stream");
            let log_seqs = st.txn_log_seqs(*txn);
            let ctx = st.contexts.get_mut(txn).expect("affected context");
            ctx.blocked_from_logging = true;
            migrated.push(MigratedContext { txn: *txn, state: ctx.state, log_seqs });
            self.lock_record(e.src, scope, i, false);
        }
        let kind =
            LogEntryKind::TransferOut { partition: e.partition, dst: e.dst, txns: affected.iter().copied().collect() };
        self.submit_transfer_log(e.src, kind, AppendPurpose::TransferOut(i));
        self.transfers[i].affected = affected.into_iter().collect();
        self.transfers[i].phase = TransferPhase::OutPending { migrated };
        self.transfer_record(i, "transfer_out_submitted".into());
    }

    fn submit_transfer_log(&mut self, stream: LogStreamId, kind: LogEntryKind, purpose: AppendPurpose) {
        let delay = self.cfg.log_sync_delay;
        let st = self.streams.get_mut(&stream).expect("stream");
        let (seq, at) = st.append(kind, None, true, purpose, self.now, delay).expect("transfer logs never block");
        let epoch = self.epochs[&stream];
        self.schedule(at, Event::Persist { stream, seq, epoch }, Causal::default());
    }

    fn transfer_out_persisted(&mut self, i: usize, ts: Timestamp) {
        let TransferPhase::OutPending { migrated } = self.transfers[i].phase.clone() else {
            return;
        };
        let e = self.transfers[i].event;
        let kind = LogEntryKind::TransferIn { partition: e.partition, src: e.src, contexts: migrated.clone() };
        self.submit_transfer_log(e.dst, kind, AppendPurpose::TransferIn(i));
        self.transfers[i].phase = TransferPhase::InPending { ts, migrated };
        self.transfer_record(i, format!("transfer_out_persisted ts={ts}"));
    }

    fn transfer_in_persisted(&mut self, i: usize) {
        let TransferPhase::InPending { ts, migrated } = self.transfers[i].phase.clone() else {
            return;
        };
        let e = self.transfers[i].event;
        let (now, abstract_mode, cap) = (self.now, self.abstract_mode(), self.cfg.partition_cap);
        let dst = self.streams.get_mut(&e.dst).expect("stream");
        for mc in &migrated {
            if let Some(c) = dst.contexts.get_mut(&mc.txn) {
                c.partitions.insert(e.partition);
                c.partition_overflow |= c.partitions.len() > cap;
            } else if mc.state.is_decided() {
                if !abstract_mode {
                    let mut c = TxnContext::new(mc.txn, e.dst);
                    c.state = TwoPcState::Tombstone;
                    c.partitions.insert(e.partition);
                    dst.contexts.insert(mc.txn, c);
                    // A contradiction is impossible: the source decided first.
                    let _ = dst.tdt.record(mc.txn, mc.state == TwoPcState::Commit, now);
                }
            } else {
                let mut c = TxnContext::new(mc.txn, e.dst);
                c.partitions.insert(e.partition);
                dst.contexts.insert(mc.txn, c);
            }
        }
        let affected: Vec<TxnId> = self.transfers[i].affected.iter().copied().collect();
        for txn in &affected {
            let st = self.streams.get_mut(&e.src).expect("stream");
            let Some(c) = st.contexts.get_mut(txn) else { continue };
            let added = ts > c.last_2pc_log_ts && c.add_intermediate_participant(e.dst);
            c.blocked_from_logging = false;
            c.partitions.remove(&e.partition);
            self.transfer_record(i, format!("add_intermediate_participant txn={txn} added={added}"));
            self.emit_projection(*txn);
        }
        self.homes.insert(e.partition, e.dst);
        self.streams.get_mut(&e.src).expect("stream").hosted.remove(&e.partition);
        self.streams.get_mut(&e.dst).expect("stream").hosted.insert(e.partition);
        self.transfers[i].phase = TransferPhase::Done { ts };
        self.transfer_record(i, "done".into());
        self.release_lock(e.src, i);
        for txn in affected {
            self.poke(e.src, txn);
        }
    }

    /// Releases the source lock if `i` holds it, re-enqueues deferred inputs
    /// and hands the lock to the next waiting transfer.
    fn release_lock(&mut self, stream: LogStreamId, i: usize) {
        let st = self.streams.get_mut(&stream).expect("stream");
        if st.transfer_lock == Some(i) {
            st.transfer_lock = None;
            self.lock_record(stream, "stream".into(), i, false);
        }
        self.requeue(stream);
        if self.streams[&stream].transfer_lock.is_none() {
            if let Some(next) = self.lock_waiters.get_mut(&stream).and_then(VecDeque::pop_front) {
                self.schedule(self.now, Event::TransferStart(next), Causal::default());
            }
        }
    }

    fn requeue(&mut self, stream: LogStreamId) {
        for (txn, input, causal) in self.deferred.remove(&stream).unwrap_or_default() {
            self.schedule(self.now, Event::Redeliver(stream, txn, input), causal);
        }
    }

    /// Schedules an internal step for a context if one is enabled.
    fn poke(&mut self, stream: LogStreamId, txn: TxnId) {
        let env = self.env_for(stream, txn);
        let enabled = self.streams[&stream].contexts.get(&txn).is_some_and(|c| c.internal_enabled(&env));
        if enabled && self.internal_scheduled.insert((stream, txn)) {
            self.schedule(self.now, Event::Internal(stream, txn), Causal::default());
        }
    }

    fn apply_fault(&mut self, i: usize) {
        let f = self.setup.faults[i].clone();
        self.trace.push(TraceRecord::Fault { time: self.now, detail: format!("{f:?}") });
        match f {
            Fault::ReclaimContext { stream, txn, .. } => {
                self.streams.get_mut(&stream).expect("stream").reclaim_context(txn);
            }
            Fault::InternalAbort { stream, txn, .. } => {
                self.dispatch(stream, txn, Input::InternalAbort, Causal::default());
            }
            Fault::Crash { stream, .. } => self.crash(stream),
            Fault::DropUserResponse { .. } | Fault::Duplicate { .. } => {}
        }
    }

    fn crash(&mut self, stream: LogStreamId) {
        *self.epochs.get_mut(&stream).expect("stream") += 1;
        let txn_roots: BTreeMap<TxnId, LogStreamId> = self.setup.txns.iter().map(|t| (t.id, t.root)).collect();
        let (dropped, redrive) =
            self.streams.get_mut(&stream).expect("stream").crash_and_recover(|t| txn_roots.get(&t) == Some(&stream));
        self.internal_scheduled.retain(|(s, _)| *s != stream);
        for d in &dropped {
            match d.purpose {
                AppendPurpose::TransferOut(i) => self.roll_back(i),
                AppendPurpose::TransferIn(i) => {
                    let kind = d.kind.clone();
                    self.submit_transfer_log(stream, kind, AppendPurpose::TransferIn(i));
                    self.transfer_record(i, "transfer_in_resubmitted".into());
                }
                AppendPurpose::Txn(_) => {}
            }
        }
        let draining: Vec<usize> = (0..self.transfers.len())
            .filter(|i| self.transfers[*i].event.src == stream && self.transfers[*i].phase == TransferPhase::Draining)
            .collect();
        for i in draining {
            self.roll_back(i);
        }
        for (txn, outputs) in redrive {
            let parts = self.partitions_on(txn, stream);
            let mut ctx = self.streams[&stream].contexts[&txn].clone();
            self.set_partitions(&mut ctx, parts);
            let state = ctx.state;
            self.streams.get_mut(&stream).expect("stream").contexts.insert(txn, ctx);
            self.trace.push(TraceRecord::Handler {
                time: self.now,
                stream,
                txn,
                handler: "recover",
                input: "crash".into(),
                before: state,
                after: state,
                outputs: outputs.iter().map(output_label).collect(),
            });
            self.process_outputs(stream, txn, outputs, Causal::default());
            self.poke(stream, txn);
        }
        self.requeue(stream);
        if let Some(next) = self.lock_waiters.get_mut(&stream).and_then(VecDeque::pop_front) {
            self.schedule(self.now, Event::TransferStart(next), Causal::default());
        }
    }

    fn roll_back(&mut self, i: usize) {
        let e = self.transfers[i].event;
        for txn in self.transfers[i].affected.clone() {
            if let Some(c) = self.streams.get_mut(&e.src).expect("stream").contexts.get_mut(&txn) {
                c.blocked_from_logging = false;
            }
        }
        self.transfers[i].phase = TransferPhase::RolledBack;
        self.transfer_record(i, "rolled_back".into());
    }

    fn emit_projection(&mut self, txn: TxnId) {
        if !self.abstract_mode() {
            return;
        }
        let Some(root) = self.root_of(txn) else { return };
        let nodes = self
            .streams
            .values()
            .map(|s| s.contexts.get(&txn).map_or_else(NodeProjection::absent, NodeProjection::of))
            .collect();
        let proj = Projection { txn, root, nodes, msgs: self.sent.get(&txn).cloned().unwrap_or_default() };
        if self.last_proj.get(&txn) != Some(&proj) {
            self.trace.push(TraceRecord::Proj(proj.clone()));
            self.last_proj.insert(txn, proj);
        }
    }

    fn finish(mut self) -> SimReport {
        for t in &self.setup.txns {
            for (sid, s) in &self.streams {
                if let Some(c) = s.contexts.get(&t.id) {
                    if !matches!(c.state, TwoPcState::Commit | TwoPcState::Abort | TwoPcState::Tombstone) {
                        self.liveness.push(format!("txn {} ended in {} on stream {sid}", t.id, c.state));
                    }
                }
            }
            let answered = self.outcomes.get(&t.id).is_some_and(|o| !o.is_empty());
            if !answered && !self.dropped_without_retry.contains(&t.id) {
                self.liveness.push(format!("txn {} never answered the user", t.id));
            }
        }
        for (s, d) in &self.deferred {
            if !d.is_empty() {
                self.liveness.push(format!("{} inputs still deferred on stream {s}", d.len()));
            }
        }
        for (i, t) in self.transfers.iter().enumerate() {
            if !matches!(t.phase, TransferPhase::Done { .. } | TransferPhase::RolledBack) {
                self.liveness.push(format!("transfer {i} did not finish ({:?})", t.phase));
            }
        }
        let logs: BTreeMap<LogStreamId, Vec<LogEntry>> =
            self.streams.iter().map(|(id, s)| (*id, s.entries().to_vec())).collect();
        let principle = check_transfer_principle(&logs);
        let mut trees = BTreeMap::new();
        let mut minimum_set = BTreeMap::new();
        for t in &self.setup.txns {
            let tree = build_log_stream_tree(&self.streams, t.id, t.root);
            let required: BTreeSet<LogStreamId> =
                t.partitions.iter().filter_map(|p| self.homes.get(p)).copied().collect();
            minimum_set.insert(t.id, check_minimum_set(&required, &tree.nodes));
            trees.insert(t.id, tree);
        }
        let transfers_completed =
            self.transfers.iter().filter(|t| matches!(t.phase, TransferPhase::Done { .. })).count();
        SimReport {
            outcomes: self.outcomes,
            violations: self.violations,
            liveness: self.liveness,
            lies: self.lies,
            principle,
            minimum_set,
            trees,
            trace: self.trace,
            metrics: self.metrics,
            streams: self.streams,
            homes: self.homes,
            merged_at: self.merged_at,
            phase_members: self.phase_members,
            transfers_completed,
            events: self.events,
            end_time: self.now,
        }
    }
}

fn input_label(input: &Input) -> String {
    match input {
        Input::UserCommit => "user_commit".into(),
        Input::Msg(m) => m.to_string(),
        Input::LogPersisted { purpose, ts } => format!("persisted {purpose:?} ts={ts}"),
        Input::Internal => "internal".into(),
        Input::InternalAbort => "internal_abort".into(),
    }
}

fn output_label(o: &Output) -> String {
    match o {
        Output::Send(m) => format!("send {m}"),
        Output::Append { kind, sync, .. } => {
            format!("append {} {}", kind.name(), if *sync { "sync" } else { "async" })
        }
        Output::UserReply(u) => format!("reply {u}"),
        Output::Violation(v) => format!("violation {v}"),
        Output::Anomaly(a) => format!("anomaly {a}"),
    }
}
