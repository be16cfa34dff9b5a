//! Acceptance criteria, one pass/fail line each. Runs without the libtest
//! harness so the lines always reach the output.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treecommit::metrics::{broom, granularity_run, summarize, Granularity};
use treecommit::scenario::{Overrides, Scenario};
use treecommit::sim::{run, SimConfig, SimReport, SimSetup, TxnSpec};
use treecommit::state_machine::{Fidelity, Mutation, ProtocolVariant};
use treecommit::trace::TraceRecord;
use treecommit::transfer::{check_minimum_set, check_transfer_principle, TransferEvent};
use treecommit::types::{
    LogEntry, LogEntryKind, LogStreamId, MigratedContext, PartitionId, Timestamp, TwoPcState, TxnId, UserOutcome,
    VoteStatus,
};
use treecommit_checker::explore::{all_trees, explore, Budget, Report, TreeConfig, Verdict};
use treecommit_checker::replay::conformance_replay;

type Outcome = Result<String, String>;

fn s(i: u32) -> LogStreamId {
    LogStreamId(i)
}

fn scenario_text(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"));
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn run_scenario(
    name: &str,
    o: &Overrides,
    tweak: impl FnOnce(&mut SimConfig),
) -> Result<(Scenario, SimReport), String> {
    let (sc, setup, mut cfg) = Scenario::load(&scenario_text(name), o).map_err(|e| format!("{name}: {e}"))?;
    tweak(&mut cfg);
    let r = run(&setup, &cfg).map_err(|e| format!("{name}: {e}"))?;
    Ok((sc, r))
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Explores every tree once per addition bound; shared by the safety and
/// liveness criteria.
fn exhaustive_reports() -> Vec<(u8, Report, Duration)> {
    let mut out = Vec::new();
    for adds in [0, 1] {
        for t in all_trees(4, 3) {
            let budget = Budget { max_dynamic_adds: adds, ..Budget::default() };
            let start = Instant::now();
            let r = explore(&t, &budget, None).expect("valid tree");
            out.push((adds, r, start.elapsed()));
        }
    }
    out
}

fn criterion_1(reports: &[(u8, Report, Duration)]) -> Outcome {
    let limit = Budget::default().max_states;
    for (adds, r, took) in reports {
        ensure(!r.truncated && r.states <= limit, || format!("adds={adds} {r}: budget exhausted"))?;
        ensure(r.consistency == Verdict::Pass && r.stability == Verdict::Pass, || format!("adds={adds} {r}"))?;
        ensure(*took < Duration::from_secs(60), || format!("adds={adds} {r}: took {took:?}"))?;
    }
    let (_, big, _) = reports.iter().max_by_key(|(_, r, _)| r.states).unwrap();
    let slowest = reports.iter().map(|(_, _, d)| *d).max().unwrap();
    Ok(format!(
        "{} configurations, no Consistency or stability violation; largest {} states ({} concrete), slowest {:.1?}",
        reports.len(),
        big.states,
        big.concrete_states,
        slowest
    ))
}

fn criterion_2(reports: &[(u8, Report, Duration)]) -> Outcome {
    for (adds, r, _) in reports {
        ensure(r.liveness == Verdict::Pass, || format!("adds={adds} {r}"))?;
    }
    Ok(format!("{} configurations, every fair maximal path ends terminal and in agreement", reports.len()))
}

fn criterion_3() -> Outcome {
    let cfg = SimConfig { variant: ProtocolVariant::release(), ..SimConfig::default() };
    let mut cases = 0;
    for h in 1..=3u32 {
        for n in [1u32, 2, 4, 8] {
            let r = run(&broom(h, n), &cfg).map_err(|e| e.to_string())?;
            let c = summarize(&r, TxnId(1));
            let nh = (n * h) as u64;
            let got = (c.response_rt, c.response_syncs, c.lock_rt, c.msgs_total, c.participant_sync_logs);
            let want = (2 * h, 1, 3 * h, 5 * nh, 2 * nh);
            ensure(c.outcome == Some(UserOutcome::Committed), || format!("H={h} N={n}: {:?}", c.outcome))?;
            ensure(got == want, || format!("H={h} N={n}: got {got:?}, closed form {want:?}"))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} trees: response 2H legs and 1 sync, lock release 3H legs, 5NH messages, 2NH participant syncs"))
}

fn criterion_4() -> Outcome {
    let cfg = SimConfig { variant: ProtocolVariant::release(), ..SimConfig::default() };
    for n in [1u32, 2, 3, 4, 8, 16] {
        let c = summarize(&run(&broom(1, n), &cfg).map_err(|e| e.to_string())?, TxnId(1));
        let n = n as u64;
        let got = (c.msgs_total, c.sync_logs, c.async_logs);
        ensure(got == (5 * n, 2 * n + 1, 1), || format!("N={n}: got {got:?}, want {:?}", (5 * n, 2 * n + 1, 1)))?;
    }
    Ok("flat trees N in {1,2,3,4,8,16}: 5N messages, 2N+1 sync logs, 1 async log".into())
}

fn criterion_5() -> Outcome {
    let cfg = SimConfig::default();
    let stream = granularity_run(100, Granularity::LogStream, &cfg).map_err(|e| e.to_string())?;
    let part = granularity_run(100, Granularity::Partition, &cfg).map_err(|e| e.to_string())?;
    ensure(stream.participants == 1 && part.participants == 100, || {
        format!("participants {} vs {}", stream.participants, part.participants)
    })?;
    // Reduction of at least 99%: stream * 100 <= partition.
    ensure(stream.prepare_msgs * 100 <= part.prepare_msgs, || {
        format!("prepare messages {} vs {}", stream.prepare_msgs, part.prepare_msgs)
    })?;
    let pct = 100.0 * (1.0 - stream.prepare_msgs as f64 / part.prepare_msgs as f64);
    Ok(format!(
        "1 vs 100 participants, prepare-phase messages {} vs {} ({pct:.1}% fewer)",
        stream.prepare_msgs, part.prepare_msgs
    ))
}

/// Independent re-check of a finished run: minimum set against the final
/// homes and the transfer principle over the persisted logs.
fn transfer_checks(r: &SimReport, txns: &[(TxnId, Vec<PartitionId>)]) -> Result<(), String> {
    for (txn, parts) in txns {
        let required: BTreeSet<LogStreamId> = parts.iter().map(|p| r.homes[p]).collect();
        let tree = r.trees.get(txn).ok_or_else(|| format!("no tree for txn {txn}"))?;
        check_minimum_set(&required, &tree.nodes).map_err(|m| format!("txn {txn} misses {m:?}"))?;
    }
    check_transfer_principle(&r.logs()).map_err(|v| format!("{v:?}"))
}

/// Two streams, two transactions, each partition moved away and back.
fn interleaving(rng: &mut ChaCha8Rng) -> SimSetup {
    let homes: BTreeMap<PartitionId, LogStreamId> =
        [(1, 0), (2, 1), (3, 1), (4, 0)].into_iter().map(|(p, h)| (PartitionId(p), s(h))).collect();
    let mut when = |lo: u64| {
        let a = rng.gen_range(lo..lo + 150);
        (a, a + rng.gen_range(1..100))
    };
    let (a1, a2) = when(0);
    let (b1, b2) = when(0);
    let commit1 = rng.gen_range(20..250);
    let commit2 = rng.gen_range(20..250);
    SimSetup {
        streams: 2,
        homes,
        txns: vec![
            TxnSpec {
                id: TxnId(1),
                root: s(0),
                partitions: vec![PartitionId(1), PartitionId(2)],
                start: 0,
                commit_at: commit1,
                edges: vec![(s(0), s(1))],
                vote_no: vec![],
            },
            TxnSpec {
                id: TxnId(2),
                root: s(1),
                partitions: vec![PartitionId(3), PartitionId(4)],
                start: 0,
                commit_at: commit2,
                edges: vec![(s(1), s(0))],
                vote_no: vec![],
            },
        ],
        transfers: vec![
            TransferEvent { at: a1, partition: PartitionId(1), src: s(0), dst: s(1) },
            TransferEvent { at: a2, partition: PartitionId(1), src: s(1), dst: s(0) },
            TransferEvent { at: b1, partition: PartitionId(3), src: s(1), dst: s(0) },
            TransferEvent { at: b2, partition: PartitionId(3), src: s(0), dst: s(1) },
        ],
        faults: vec![],
    }
}

/// Logs where a prepare entry precedes a transfer-out but the transfer-in
/// migrates nothing.
fn violating_logs() -> BTreeMap<LogStreamId, Vec<LogEntry>> {
    let entry = |seq, txn, kind| LogEntry { kind, txn, seq, ts: Timestamp(seq + 1) };
    let prepare = LogEntryKind::Prepare {
        parent: Some(s(2)),
        participants: BTreeSet::new(),
        incr_parts: BTreeSet::new(),
        status: VoteStatus::Ok,
    };
    let out = LogEntryKind::TransferOut { partition: PartitionId(1), dst: s(1), txns: BTreeSet::from([TxnId(1)]) };
    let stale = LogEntryKind::TransferIn {
        partition: PartitionId(1),
        src: s(0),
        contexts: vec![MigratedContext { txn: TxnId(1), state: TwoPcState::Running, log_seqs: vec![] }],
    };
    BTreeMap::from([
        (s(0), vec![entry(0, Some(TxnId(1)), prepare), entry(1, None, out)]),
        (s(1), vec![entry(0, None, stale)]),
    ])
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let (sc, r) = run_scenario("fig4_transfer", &Overrides::default(), |_| {})?;
    let expected = sc.expected.as_ref().ok_or("fig4_transfer has no expected block")?;
    let mismatches = expected.check(&r);
    ensure(mismatches.is_empty(), || format!("fig4_transfer: {}", mismatches[0]))?;
    ensure(!expected.phases.is_empty() && !expected.merged.is_empty(), || "fig4_transfer pins no phase sets".into())?;
    let txns: Vec<(TxnId, Vec<PartitionId>)> = sc.txns.iter().map(|t| (t.id, t.partitions.clone())).collect();
    transfer_checks(&r, &txns).map_err(|e| format!("fig4_transfer: {e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut transfers = 0;
    for seed in 0..1000u64 {
        let setup = interleaving(&mut rng);
        let cfg = SimConfig { seed, jitter: rng.gen_range(0..8), ..SimConfig::default() };
        let r = run(&setup, &cfg).map_err(|e| format!("interleaving {seed}: {e}"))?;
        ensure(r.is_clean(), || format!("interleaving {seed}: {:?} {:?}", r.violations, r.liveness))?;
        let txns: Vec<(TxnId, Vec<PartitionId>)> = setup.txns.iter().map(|t| (t.id, t.partitions.clone())).collect();
        transfer_checks(&r, &txns).map_err(|e| format!("interleaving {seed}: {e}"))?;
        for t in &setup.txns {
            ensure(r.final_outcome(t.id) == Some(UserOutcome::Committed), || {
                format!("interleaving {seed}: txn {} ended {:?}", t.id, r.final_outcome(t.id))
            })?;
        }
        transfers += r.transfers_completed;
    }
    ensure(check_transfer_principle(&violating_logs()).is_err(), || "violating fixture passed".into())?;
    let took = start.elapsed();
    ensure(took < Duration::from_secs(120), || format!("took {took:?}"))?;
    Ok(format!(
        "fig4_transfer phase sets exact; 1000 interleavings ({transfers} transfers) pass both checks; fixture rejected; {took:.1?}"
    ))
}

fn criterion_7() -> Outcome {
    let (_, r) = run_scenario("circular", &Overrides::default(), |_| {})?;
    ensure(r.is_clean(), || format!("{:?} {:?}", r.violations, r.liveness))?;
    ensure(r.final_outcome(TxnId(1)) == Some(UserOutcome::Committed), || format!("{:?}", r.final_outcome(TxnId(1))))?;
    // A (stream 1) gets a second PrepareReq from B (stream 2). It must answer
    // OK once its own prepare log is durable and before B's vote reaches it.
    let records = &r.trace.records;
    let persisted = records
        .iter()
        .position(
            |x| matches!(x, TraceRecord::Handler { stream, handler: "prepare_log_persisted", .. } if *stream == s(1)),
        )
        .ok_or("A never persisted its prepare log")?;
    let direct = records
        .iter()
        .position(|x| {
            matches!(x, TraceRecord::Handler { stream, input, outputs, .. }
                if *stream == s(1)
                    && input.contains("kind=PrepareReq src=2 dst=1")
                    && outputs.iter().any(|o| o.contains("kind=PrepareResp status=OK src=1 dst=2")))
        })
        .ok_or("A never answered B's PrepareReq directly")?;
    let downstream = records
        .iter()
        .position(|x| {
            matches!(x, TraceRecord::Handler { stream, input, .. }
                if *stream == s(1) && input.contains("kind=PrepareResp status=OK src=2 dst=1"))
        })
        .ok_or("B never voted to A")?;
    ensure(persisted < direct && direct < downstream, || {
        format!("order persisted={persisted} reply={direct} downstream={downstream}")
    })?;
    Ok("A->B->A commits; A answers B's PrepareReq after its own prepare log and before B's vote".into())
}

fn criterion_8() -> Outcome {
    let (_, base) = run_scenario("fig6_lying_baseline", &Overrides::default(), |_| {})?;
    let everyone: BTreeSet<LogStreamId> = (0..3).map(s).collect();
    ensure(base.phase_members[&TxnId(1)].get("COMMIT") == Some(&everyone), || {
        format!("baseline: not all participants committed: {:?}", base.phase_members[&TxnId(1)])
    })?;
    ensure(base.final_outcome(TxnId(1)) == Some(UserOutcome::Aborted) && base.lies == vec![TxnId(1)], || {
        format!("baseline: outcome {:?}, lies {:?}", base.final_outcome(TxnId(1)), base.lies)
    })?;
    let unknown: ProtocolVariant = "unknown".parse().map_err(|e| format!("{e}"))?;
    for seed in 0..1000u64 {
        let o = Overrides { seed: Some(seed), variant: Some(unknown), mode: None };
        let (_, r) = run_scenario("fig6_lying_baseline", &o, |c| c.jitter = seed % 4)?;
        let seen = r.outcomes.get(&TxnId(1)).cloned().unwrap_or_default();
        ensure(r.lies.is_empty() && !seen.contains(&UserOutcome::Aborted), || format!("seed {seed}: saw {seen:?}"))?;
        ensure(r.final_outcome(TxnId(1)) == Some(UserOutcome::TransUnknown), || format!("seed {seed}: saw {seen:?}"))?;
    }
    let (_, tdt) = run_scenario("tdt_within_retention", &Overrides::default(), |_| {})?;
    ensure(tdt.final_outcome(TxnId(1)) == Some(UserOutcome::Committed) && tdt.lies.is_empty(), || {
        format!("tdt: {:?}", tdt.outcomes)
    })?;
    Ok("baseline lie reproduced and flagged; unknown mode TRANS_UNKNOWN on 1000 seeds; tdt COMMITTED".into())
}

fn criterion_9() -> Outcome {
    let cfg = SimConfig { variant: ProtocolVariant::release(), ..SimConfig::default() };
    let latency = |h: u32, n: u32| -> Result<u64, String> {
        let r = run(&broom(h, n), &cfg).map_err(|e| e.to_string())?;
        summarize(&r, TxnId(1)).latency_ticks.ok_or_else(|| format!("H={h} N={n}: no reply"))
    };
    let mut depth = Vec::new();
    for h in 1..=6u32 {
        let l = latency(h, 2)?;
        let closed = 2 * h as u64 * cfg.msg_delay + cfg.log_sync_delay;
        ensure(l == closed, || format!("H={h}: latency {l}, closed form {closed}"))?;
        depth.push(l);
    }
    ensure(depth.windows(2).all(|w| w[0] < w[1]), || format!("depth sweep not increasing: {depth:?}"))?;
    let width: Vec<u64> = [1u32, 2, 4, 8, 16].iter().map(|n| latency(2, *n)).collect::<Result<_, _>>()?;
    ensure(width.iter().all(|l| *l == width[0]), || format!("width sweep varies: {width:?}"))?;
    Ok(format!("depth H=1..6 latencies {depth:?} match 2H*m+s exactly; width N=1..16 constant at {}", width[0]))
}

fn criterion_10() -> Outcome {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut names: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.path().file_stem().map(|x| x.to_string_lossy().into_owned()))
        .collect();
    names.sort();
    let mut replayed = 0;
    let mut steps = 0;
    for name in &names {
        let sc = Scenario::parse(&scenario_text(name)).map_err(|e| format!("{name}: {e}"))?;
        if sc.config.mode != Fidelity::Abstract.to_string() {
            continue;
        }
        let (_, r) = run_scenario(name, &Overrides::default(), |_| {})?;
        let ps: Vec<_> = r.trace.projections().cloned().collect();
        let rep = conformance_replay(&ps).map_err(|e| format!("{name}: {e}"))?;
        replayed += 1;
        steps += rep.transitions();
    }
    ensure(replayed > 0, || "no abstract scenarios in the corpus".into())?;

    // Mutation control: commit despite a NO vote.
    let mutant =
        explore(&TreeConfig::flat(3), &Budget::default(), Some(Mutation::CommitOnNo)).map_err(|e| e.to_string())?;
    ensure(!mutant.passed(), || format!("mutant passed exploration: {mutant}"))?;
    let (_, r) = run_scenario("abstract_abort", &Overrides::default(), |c| c.mutation = Some(Mutation::CommitOnNo))?;
    let ps: Vec<_> = r.trace.projections().cloned().collect();
    ensure(conformance_replay(&ps).is_err(), || "mutant trace replayed cleanly".into())?;
    Ok(format!("{replayed} abstract scenarios conform ({steps} steps); mutant fails exploration and replay"))
}

fn main() -> ExitCode {
    let reports = exhaustive_reports();
    let results: Vec<(u32, Outcome)> = vec![
        (1, criterion_1(&reports)),
        (2, criterion_2(&reports)),
        (3, criterion_3()),
        (4, criterion_4()),
        (5, criterion_5()),
        (6, criterion_6()),
        (7, criterion_7()),
        (8, criterion_8()),
        (9, criterion_9()),
        (10, criterion_10()),
    ];
    let mut failed = 0;
    for (n, r) in &results {
        match r {
            Ok(detail) => println!("criterion {n:>2}: PASS: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2}: FAIL: {why}");
            }
        }
    }
    println!("acceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
