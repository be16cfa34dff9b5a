use std::collections::BTreeSet;

use treecommit::sim::{run, Fault, SimConfig, SimSetup, TxnSpec};
use treecommit::state_machine::{Fidelity, ProtocolVariant};
use treecommit::transfer::TransferEvent;
use treecommit::types::{LogStreamId, PartitionId, TxnId, UserOutcome};

fn s(i: u32) -> LogStreamId {
    LogStreamId(i)
}

fn p(i: u32) -> PartitionId {
    PartitionId(i)
}

/// Root 0 with children 1 and 2; 2 has child 3. One partition per stream.
fn small_tree() -> SimSetup {
    SimSetup {
        streams: 4,
        homes: (0..4).map(|i| (p(i), s(i))).collect(),
        txns: vec![TxnSpec {
            id: TxnId(1),
            root: s(0),
            partitions: (0..4).map(p).collect(),
            start: 0,
            commit_at: 100,
            edges: vec![(s(0), s(1)), (s(0), s(2)), (s(2), s(3))],
            vote_no: vec![],
        }],
        transfers: vec![],
        faults: vec![],
    }
}

#[test]
fn all_yes_commits_everywhere() {
    let r = run(&small_tree(), &SimConfig::default()).unwrap();
    assert!(r.is_clean(), "{:?} {:?}", r.violations, r.liveness);
    assert_eq!(r.final_outcome(TxnId(1)), Some(UserOutcome::Committed));
    let commit = &r.phase_members[&TxnId(1)]["COMMIT"];
    assert_eq!(commit, &(0..4).map(s).collect::<BTreeSet<_>>());
}

#[test]
fn a_no_vote_aborts() {
    let mut setup = small_tree();
    setup.txns[0].vote_no = vec![s(3)];
    let r = run(&setup, &SimConfig::default()).unwrap();
    assert!(r.is_clean(), "{:?} {:?}", r.violations, r.liveness);
    assert_eq!(r.final_outcome(TxnId(1)), Some(UserOutcome::Aborted));
    assert!(!r.phase_members[&TxnId(1)].contains_key("COMMIT"));
}

#[test]
fn runs_are_deterministic() {
    let cfg = SimConfig { jitter: 7, seed: 42, ..SimConfig::default() };
    let mut setup = small_tree();
    setup.transfers = vec![TransferEvent { at: 20, partition: p(1), src: s(1), dst: s(2) }];
    let a = run(&setup, &cfg).unwrap();
    let b = run(&setup, &cfg).unwrap();
    assert_eq!(a.trace.hash(), b.trace.hash());
    assert!(a.is_clean(), "{:?} {:?}", a.violations, a.liveness);
}

#[test]
fn transfer_before_commit_adds_the_destination() {
    let mut setup = small_tree();
    setup.streams = 5;
    setup.transfers = vec![TransferEvent { at: 10, partition: p(1), src: s(1), dst: s(4) }];
    let r = run(&setup, &SimConfig::default()).unwrap();
    assert!(r.is_clean(), "{:?} {:?} {:?}", r.violations, r.liveness, r.principle);
    assert_eq!(r.final_outcome(TxnId(1)), Some(UserOutcome::Committed));
    assert!(r.phase_members[&TxnId(1)]["COMMIT"].contains(&s(4)));
    assert_eq!(r.homes[&p(1)], s(4));
}

#[test]
fn abstract_mode_emits_projections() {
    let cfg = SimConfig { fidelity: Fidelity::Abstract, ..SimConfig::default() };
    let r = run(&small_tree(), &cfg).unwrap();
    assert!(r.is_clean(), "{:?} {:?}", r.violations, r.liveness);
    assert!(r.trace.projections().count() > 5);
}

#[test]
fn variants_commit_cleanly() {
    for v in [
        ProtocolVariant::release(),
        ProtocolVariant::commit_log(),
        ProtocolVariant { d2pc_clear: true, ..ProtocolVariant::plain() },
        ProtocolVariant { clear_stage: true, ..ProtocolVariant::plain() },
        ProtocolVariant { unknown_states: true, tdt: true, ..ProtocolVariant::plain() },
    ] {
        let cfg = SimConfig { variant: v, ..SimConfig::default() };
        let r = run(&small_tree(), &cfg).unwrap();
        assert!(r.is_clean(), "{v:?}: {:?} {:?}", r.violations, r.liveness);
        assert_eq!(r.final_outcome(TxnId(1)), Some(UserOutcome::Committed), "{v:?}");
    }
}

#[test]
fn crash_of_a_participant_recovers() {
    let mut setup = small_tree();
    setup.faults = vec![Fault::Crash { at: 118, stream: s(3) }];
    let r = run(&setup, &SimConfig::default()).unwrap();
    assert!(r.violations.is_empty(), "{:?}", r.violations);
}
