//! Cost accounting: message and log counts per transaction and critical-path
//! lengths measured along the causal chain of simulator events.
//!
//! Every event carries a [`Causal`] tag: delivering a message adds one hop,
//! persisting a log adds one synchronization, and internal actions inherit
//! the tag of the step that enabled them. The tag of the step that replies
//! to the user is therefore the critical path to the response.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::ScenarioError;
use crate::sim::{run, SimConfig, SimReport, SimSetup, TxnSpec};
use crate::state_machine::{Fidelity, ProtocolVariant};
use crate::transfer::LogStreamTree;
use crate::types::{LogStreamId, PartitionId, Time, TxnId, UserOutcome};

/// Critical-path length of an event: message legs and log syncs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Causal {
    pub hops: u32,
    pub syncs: u32,
}

impl Causal {
    pub fn hop(self) -> Self {
        Causal { hops: self.hops + 1, ..self }
    }

    pub fn sync(self) -> Self {
        Causal { syncs: self.syncs + 1, ..self }
    }
}

/// A point on the critical path: when it happened and how it was reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalPoint {
    pub time: Time,
    pub causal: Causal,
}

/// Counters for one transaction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TxnMetrics {
    pub msgs_by_kind: BTreeMap<&'static str, u64>,
    /// Prepare, commit and abort logs.
    pub sync_logs: u64,
    /// Clear logs.
    pub async_logs: u64,
    /// Sync logs written by non-root streams.
    pub participant_sync_logs: u64,
    pub commit_at: Time,
    pub response: Option<CausalPoint>,
    /// First Release or Commit received by each non-root stream.
    pub lock_release: BTreeMap<LogStreamId, CausalPoint>,
}

impl TxnMetrics {
    pub fn msgs_total(&self) -> u64 {
        self.msgs_by_kind.values().sum()
    }

    pub fn msgs(&self, kind: &str) -> u64 {
        self.msgs_by_kind.get(kind).copied().unwrap_or(0)
    }

    /// The latest of the per-participant lock release points.
    pub fn lock_release_point(&self) -> Option<CausalPoint> {
        self.lock_release.values().copied().max_by_key(|p| (p.time, p.causal))
    }

    /// Ticks from the user's commit request to the reply.
    pub fn response_latency(&self) -> Option<Time> {
        self.response.map(|p| p.time - self.commit_at)
    }
}

/// Shape of a participant tree: `n` leaves at mean depth `h`.
///
/// For a broom (the root with `n` chains of `h` streams each) this is exact
/// and `n * h` equals the number of edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeShape {
    pub h: f64,
    pub n: usize,
    pub edges: usize,
}

impl TreeShape {
    pub fn of(tree: &LogStreamTree) -> Self {
        let mut children: BTreeMap<LogStreamId, Vec<LogStreamId>> = BTreeMap::new();
        for (p, c) in &tree.edges {
            children.entry(*p).or_default().push(*c);
        }
        let mut depths = Vec::new();
        let mut stack = vec![(tree.root, 0usize)];
        let mut seen = std::collections::BTreeSet::new();
        while let Some((node, d)) = stack.pop() {
            if !seen.insert(node) {
                continue;
            }
            let kids: Vec<LogStreamId> =
                children.get(&node).into_iter().flatten().filter(|c| !seen.contains(c)).copied().collect();
            if kids.is_empty() {
                if d > 0 {
                    depths.push(d);
                }
            } else {
                stack.extend(kids.into_iter().map(|c| (c, d + 1)));
            }
        }
        let n = depths.len();
        let h = if n == 0 { 0.0 } else { depths.iter().sum::<usize>() as f64 / n as f64 };
        TreeShape { h, n, edges: seen.len().saturating_sub(1) }
    }
}

/// Critical-path and volume counters of one committed transaction.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSummary {
    pub outcome: Option<UserOutcome>,
    pub shape: TreeShape,
    /// Message legs on the path to the user reply.
    pub response_rt: u32,
    pub response_syncs: u32,
    /// Message legs on the path to the last participant's lock release.
    pub lock_rt: u32,
    pub lock_syncs: u32,
    pub msgs_total: u64,
    pub sync_logs: u64,
    pub async_logs: u64,
    pub participant_sync_logs: u64,
    pub latency_ticks: Option<Time>,
}

impl CostSummary {
    /// Residuals against the closed forms for a transfer-free broom:
    /// `(response_rt - 2H, response_syncs - 1, lock_rt - 3H, msgs - kNH,
    /// participant_sync_logs - 2NH)` with `k` messages per edge.
    pub fn residuals(&self, msgs_per_edge: u64) -> [i64; 5] {
        let nh = self.shape.edges as i64;
        let h = self.shape.h.round() as i64;
        [
            self.response_rt as i64 - 2 * h,
            self.response_syncs as i64 - 1,
            self.lock_rt as i64 - 3 * h,
            self.msgs_total as i64 - msgs_per_edge as i64 * nh,
            self.participant_sync_logs as i64 - 2 * nh,
        ]
    }
}

pub fn summarize(report: &SimReport, txn: TxnId) -> CostSummary {
    let m = report.metrics.get(&txn).cloned().unwrap_or_default();
    let shape = report.trees.get(&txn).map_or(TreeShape { h: 0.0, n: 0, edges: 0 }, TreeShape::of);
    let response = m.response.map(|p| p.causal).unwrap_or_default();
    let lock = m.lock_release_point().map(|p| p.causal).unwrap_or_default();
    CostSummary {
        outcome: report.final_outcome(txn),
        shape,
        response_rt: response.hops,
        response_syncs: response.syncs,
        lock_rt: lock.hops,
        lock_syncs: lock.syncs,
        msgs_total: m.msgs_total(),
        sync_logs: m.sync_logs,
        async_logs: m.async_logs,
        participant_sync_logs: m.participant_sync_logs,
        latency_ticks: m.response_latency(),
    }
}

/// A broom: stream 0 is the root with `n` chains of `h` streams below it.
/// Every stream homes one partition the transaction touches.
pub fn broom(h: u32, n: u32) -> SimSetup {
    let streams = 1 + h * n;
    let mut edges = Vec::new();
    for chain in 0..n {
        let mut parent = LogStreamId(0);
        for depth in 0..h {
            let child = LogStreamId(1 + chain * h + depth);
            edges.push((parent, child));
            parent = child;
        }
    }
    SimSetup {
        streams,
        homes: (0..streams).map(|i| (PartitionId(i), LogStreamId(i))).collect(),
        txns: vec![TxnSpec {
            id: TxnId(1),
            root: LogStreamId(0),
            partitions: (0..streams).map(PartitionId).collect(),
            start: 0,
            commit_at: 100,
            edges,
            vote_no: Vec::new(),
        }],
        transfers: Vec::new(),
        faults: Vec::new(),
    }
}

/// Whether each log stream or each partition is a 2PC participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    LogStream,
    Partition,
}

/// A transaction over `partitions` partitions that all live on one log
/// stream, coordinated from a separate stream. At partition granularity
/// every partition is its own participant.
pub fn granularity_setup(partitions: u32, g: Granularity) -> SimSetup {
    let (streams, home): (u32, Box<dyn Fn(u32) -> u32>) = match g {
        Granularity::LogStream => (2, Box::new(|_| 1)),
        Granularity::Partition => (partitions + 1, Box::new(|p| p + 1)),
    };
    let homes: BTreeMap<PartitionId, LogStreamId> =
        (0..partitions).map(|p| (PartitionId(p), LogStreamId(home(p)))).collect();
    let edges = (1..streams).map(|s| (LogStreamId(0), LogStreamId(s))).collect();
    SimSetup {
        streams,
        homes,
        txns: vec![TxnSpec {
            id: TxnId(1),
            root: LogStreamId(0),
            partitions: (0..partitions).map(PartitionId).collect(),
            start: 0,
            commit_at: 100,
            edges,
            vote_no: Vec::new(),
        }],
        transfers: Vec::new(),
        faults: Vec::new(),
    }
}

/// Participants and prepare-phase messages of one granularity run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GranularityResult {
    pub participants: usize,
    pub prepare_msgs: u64,
    pub msgs_total: u64,
}

pub fn granularity_run(partitions: u32, g: Granularity, cfg: &SimConfig) -> Result<GranularityResult, ScenarioError> {
    let report = run(&granularity_setup(partitions, g), cfg)?;
    let m = report.metrics.get(&TxnId(1)).cloned().unwrap_or_default();
    Ok(GranularityResult {
        participants: report.trees[&TxnId(1)].nodes.len() - 1,
        prepare_msgs: m.msgs("PrepareReq") + m.msgs("PrepareResp"),
        msgs_total: m.msgs_total(),
    })
}

/// One CSV row of a shape sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variant: ProtocolVariant,
    pub mode: Fidelity,
    pub h: u32,
    pub n: u32,
    pub transfers: usize,
    pub summary: CostSummary,
}

pub const CSV_HEADER: &str =
    "variant,mode,H,N,transfers,response_rt,response_syncs,lock_rt,msgs_total,sync_logs,async_logs,latency_ticks";

impl SweepRow {
    pub fn csv(&self) -> String {
        let s = &self.summary;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.mode,
            self.h,
            self.n,
            self.transfers,
            s.response_rt,
            s.response_syncs,
            s.lock_rt,
            s.msgs_total,
            s.sync_logs,
            s.async_logs,
            s.latency_ticks.map_or_else(String::new, |t| t.to_string()),
        )
    }
}

/// Runs a broom for every `(h, n)` pair.
pub fn sweep(hs: &[u32], ns: &[u32], cfg: &SimConfig) -> Result<Vec<SweepRow>, ScenarioError> {
    let mut rows = Vec::new();
    for &h in hs {
        for &n in ns {
            let report = run(&broom(h, n), cfg)?;
            rows.push(SweepRow {
                variant: cfg.variant,
                mode: cfg.fidelity,
                h,
                n,
                transfers: report.transfers_completed,
                summary: summarize(&report, TxnId(1)),
            });
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    out
}
