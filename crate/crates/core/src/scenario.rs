//! Scenario files: a versioned TOML description of topology, transactions,
//! transfer and fault schedules, configuration and optional expectations.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::ScenarioError;
use crate::sim::{Fault, SimConfig, SimReport, SimSetup, TxnSpec};
use crate::state_machine::{Fidelity, ProtocolVariant};
use crate::transfer::TransferEvent;
use crate::types::{LogStreamId, PartitionId, Time, TxnId, UserOutcome};
use crate::unknown::DEFAULT_TDT_RETENTION;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub streams: u32,
    #[serde(default)]
    pub config: ConfigSpec,
    #[serde(default, rename = "partition")]
    pub partitions: Vec<PartitionSpec>,
    #[serde(default, rename = "txn")]
    pub txns: Vec<TxnEntry>,
    #[serde(default, rename = "transfer")]
    pub transfers: Vec<TransferEvent>,
    #[serde(default, rename = "fault")]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub expected: Option<Expected>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigSpec {
    pub mode: String,
    pub variant: String,
    pub msg_delay: Time,
    pub log_sync_delay: Time,
    pub jitter: Time,
    pub max_events: u64,
    pub partition_cap: usize,
    pub tdt_retention: Time,
}

impl Default for ConfigSpec {
    fn default() -> Self {
        let d = SimConfig::default();
        ConfigSpec {
            mode: d.fidelity.to_string(),
            variant: d.variant.to_string(),
            msg_delay: d.msg_delay,
            log_sync_delay: d.log_sync_delay,
            jitter: d.jitter,
            max_events: d.max_events,
            partition_cap: d.partition_cap,
            tdt_retention: DEFAULT_TDT_RETENTION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub id: PartitionId,
    pub home: LogStreamId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxnEntry {
    pub id: TxnId,
    pub root: LogStreamId,
    pub partitions: Vec<PartitionId>,
    #[serde(default)]
    pub start: Time,
    pub commit_at: Time,
    /// `[parent, child]` pairs.
    #[serde(default)]
    pub edges: Vec<(LogStreamId, LogStreamId)>,
    #[serde(default)]
    pub vote_no: Vec<LogStreamId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultSpec {
    DropUserResponse { txn: TxnId, retry_at: Option<Time> },
    ReclaimContext { at: Time, stream: LogStreamId, txn: TxnId },
    Crash { at: Time, stream: LogStreamId },
    InternalAbort { at: Time, stream: LogStreamId, txn: TxnId },
    Duplicate { txn: TxnId, message: String, dst: Option<LogStreamId> },
}

impl From<&FaultSpec> for Fault {
    fn from(f: &FaultSpec) -> Self {
        match f.clone() {
            FaultSpec::DropUserResponse { txn, retry_at } => Fault::DropUserResponse { txn, retry_at },
            FaultSpec::ReclaimContext { at, stream, txn } => Fault::ReclaimContext { at, stream, txn },
            FaultSpec::Crash { at, stream } => Fault::Crash { at, stream },
            FaultSpec::InternalAbort { at, stream, txn } => Fault::InternalAbort { at, stream, txn },
            FaultSpec::Duplicate { txn, message, dst } => Fault::Duplicate { txn, kind: message, dst },
        }
    }
}

/// Assertions a run must satisfy.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Expected {
    pub trace_hash: Option<String>,
    /// Every delivered outcome per transaction, in order.
    pub outcomes: Vec<ExpectedOutcome>,
    /// Whether safety violations are expected (a known-bad baseline).
    pub violations: bool,
    /// Transactions for which the user must observe ABORTED after a commit.
    pub lies: Vec<TxnId>,
    /// Streams that must enter each phase.
    pub phases: Vec<ExpectedPhase>,
    /// Transfer destinations merged into a stream's children in a phase.
    pub merged: Vec<ExpectedMerge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedOutcome {
    pub txn: TxnId,
    pub results: Vec<UserOutcome>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedPhase {
    pub txn: TxnId,
    pub phase: String,
    pub streams: BTreeSet<LogStreamId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectedMerge {
    pub txn: TxnId,
    pub phase: String,
    pub stream: LogStreamId,
    pub added: BTreeSet<LogStreamId>,
}

/// One failed expectation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mismatch {
    pub what: String,
    pub expected: String,
    pub actual: String,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: expected {}, got {}", self.what, self.expected, self.actual)
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub variant: Option<ProtocolVariant>,
    pub mode: Option<Fidelity>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        if s.version != SCENARIO_VERSION {
            return Err(ScenarioError::Version(s.version));
        }
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenarios always serialize")
    }

    pub fn config(&self, o: &Overrides) -> Result<SimConfig, ScenarioError> {
        let c = &self.config;
        let variant = match o.variant {
            Some(v) => v,
            None => c.variant.parse()?,
        };
        let fidelity = match o.mode {
            Some(m) => m,
            None => c.mode.parse().map_err(ScenarioError::Invalid)?,
        };
        Ok(SimConfig {
            msg_delay: c.msg_delay,
            log_sync_delay: c.log_sync_delay,
            jitter: c.jitter,
            seed: o.seed.unwrap_or(self.seed),
            variant,
            fidelity,
            mutation: None,
            max_events: c.max_events,
            partition_cap: c.partition_cap,
            tdt_retention: c.tdt_retention,
        })
    }

    pub fn setup(&self) -> Result<SimSetup, ScenarioError> {
        let mut homes = BTreeMap::new();
        for p in &self.partitions {
            if homes.insert(p.id, p.home).is_some() {
                return Err(ScenarioError::Invalid(format!("partition {} declared twice", p.id)));
            }
        }
        Ok(SimSetup {
            streams: self.streams,
            homes,
            txns: self
                .txns
                .iter()
                .map(|t| TxnSpec {
                    id: t.id,
                    root: t.root,
                    partitions: t.partitions.clone(),
                    start: t.start,
                    commit_at: t.commit_at,
                    edges: t.edges.clone(),
                    vote_no: t.vote_no.clone(),
                })
                .collect(),
            transfers: self.transfers.clone(),
            faults: self.faults.iter().map(Fault::from).collect(),
        })
    }

    /// Parses, validates and resolves a scenario into a runnable pair.
    pub fn load(text: &str, o: &Overrides) -> Result<(Self, SimSetup, SimConfig), ScenarioError> {
        let s = Self::parse(text)?;
        let cfg = s.config(o)?;
        let setup = s.setup()?;
        setup.validate(&cfg)?;
        Ok((s, setup, cfg))
    }
}

fn fmt_set(s: &BTreeSet<LogStreamId>) -> String {
    let v: Vec<String> = s.iter().map(ToString::to_string).collect();
    format!("{{{}}}", v.join(","))
}

impl Expected {
    pub fn check(&self, report: &SimReport) -> Vec<Mismatch> {
        let mut out = Vec::new();
        let mut push = |what: String, expected: String, actual: String| {
            if expected != actual {
                out.push(Mismatch { what, expected, actual });
            }
        };
        if let Some(h) = &self.trace_hash {
            push("trace_hash".into(), h.clone(), report.trace.hash());
        }
        for o in &self.outcomes {
            let actual = report.outcomes.get(&o.txn).cloned().unwrap_or_default();
            push(format!("outcomes of txn {}", o.txn), format!("{:?}", o.results), format!("{actual:?}"));
        }
        push("violations present".into(), self.violations.to_string(), (!report.violations.is_empty()).to_string());
        let lies: BTreeSet<TxnId> = report.lies.iter().copied().collect();
        let want: BTreeSet<TxnId> = self.lies.iter().copied().collect();
        push("lies".into(), format!("{want:?}"), format!("{lies:?}"));
        for p in &self.phases {
            let actual = report.phase_members.get(&p.txn).and_then(|m| m.get(&p.phase)).cloned().unwrap_or_default();
            push(format!("txn {} {} set", p.txn, p.phase), fmt_set(&p.streams), fmt_set(&actual));
        }
        for m in &self.merged {
            let actual = report
                .merged_at
                .get(&m.txn)
                .and_then(|x| x.get(&(m.phase.clone(), m.stream)))
                .cloned()
                .unwrap_or_default();
            push(format!("txn {} merged at {} on {}", m.txn, m.phase, m.stream), fmt_set(&m.added), fmt_set(&actual));
        }
        out
    }
}
