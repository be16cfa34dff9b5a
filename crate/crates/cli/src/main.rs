//! Command-line runner: scenario runs with golden checks, exhaustive model
//! checking, cost sweeps and trace conformance replay.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use treecommit::error::ScenarioError;
use treecommit::metrics::{granularity_run, summarize, sweep, to_csv, Granularity};
use treecommit::scenario::{Overrides, Scenario};
use treecommit::sim::{run, SimConfig, SimReport};
use treecommit::state_machine::{Fidelity, Mutation, ProtocolVariant};
use treecommit::trace::parse_projections;
use treecommit::types::LogStreamId;
use treecommit_checker::explore::{all_trees, explore, Budget, TreeConfig, Verdict};
use treecommit_checker::replay::conformance_replay;

/// Process exit statuses.
mod status {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const PARSE: u8 = 2;
    pub const VALIDATION: u8 = 3;
    pub const INVARIANT: u8 = 4;
    pub const LIVENESS: u8 = 5;
    pub const MISMATCH: u8 = 6;
    pub const INCONCLUSIVE: u8 = 7;
}

#[derive(Parser)]
#[command(name = "treecommit", version, about = "Tree-shaped 2PC over log streams: simulate, check, measure")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and check its invariants and expectations.
    Run(RunArgs),
    /// Exhaustively explore the abstract model for small trees.
    Check(CheckArgs),
    /// Sweep tree shapes and print cost counters as CSV.
    Bench(BenchArgs),
    /// Replay a trace file of abstract projections against the model.
    Replay(ReplayArgs),
    /// Print one stream's persisted log after running a scenario.
    LogDump(LogDumpArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated variant flags or presets, e.g. `release` or `unknown`.
    #[arg(long)]
    variant: Option<String>,
    /// `abstract` or `logged`.
    #[arg(long)]
    mode: Option<String>,
    /// Deliberately broken rule for negative controls (`commit-on-no`).
    #[arg(long)]
    mutant: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Directory for trace.txt, metrics.csv and logs.txt.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Exact number of nodes; every tree of that size is checked.
    #[arg(long, default_value_t = 3)]
    nodes: usize,
    /// Maximum tree depth.
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// `all`, `chain` or `flat`.
    #[arg(long, default_value = "all")]
    shape: String,
    #[arg(long, default_value_t = 1)]
    dynamic_adds: u8,
    /// Bound on InternalAbort firings; `none` leaves them unbounded.
    #[arg(long, default_value = "1")]
    internal_aborts: String,
    /// Maximum number of stored states per tree.
    #[arg(long, default_value_t = 1_000_000)]
    budget: usize,
    #[arg(long, default_value_t = 1_000)]
    max_depth: usize,
    /// Explore every labelling separately instead of one per orbit.
    #[arg(long)]
    no_symmetry: bool,
    #[arg(long)]
    mutant: Option<String>,
    /// Directory for counterexample traces.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated tree depths.
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    heights: Vec<u32>,
    /// Comma-separated numbers of chains under the root.
    #[arg(long, default_value = "1,2,4,8", value_delimiter = ',')]
    fanouts: Vec<u32>,
    #[arg(long, default_value = "release")]
    variant: String,
    #[arg(long, default_value = "logged")]
    mode: String,
    /// Also compare stream and partition granularity over this many
    /// partitions on one stream.
    #[arg(long)]
    granularity: Option<u32>,
    /// Write sweep.csv (and granularity.csv) here instead of stdout.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// File of projection lines; other lines are ignored.
    #[arg(long)]
    trace: PathBuf,
}

#[derive(Args)]
struct LogDumpArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    stream: u32,
}

/// A failure with the exit status it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Failure { code, msg: msg.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::new(status::USAGE, format!("{e:#}"))
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        let code = if e.is_parse() { status::PARSE } else { status::VALIDATION };
        Failure::new(code, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Run(a) => cmd_run(&a),
        Command::Check(a) => cmd_check(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Replay(a) => cmd_replay(&a),
        Command::LogDump(a) => cmd_log_dump(&a),
    };
    match result {
        Ok(()) => ExitCode::from(status::OK),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn parse_mutant(m: &Option<String>) -> Result<Option<Mutation>, Failure> {
    m.as_deref().map(str::parse).transpose().map_err(|e: String| Failure::new(status::USAGE, e))
}

fn load(a: &ScenarioArgs) -> Result<(Scenario, SimReport), Failure> {
    let text = fs::read_to_string(&a.scenario).with_context(|| format!("reading {}", a.scenario.display()))?;
    let variant = a
        .variant
        .as_deref()
        .map(str::parse::<ProtocolVariant>)
        .transpose()
        .map_err(|e| Failure::new(status::USAGE, e.to_string()))?;
    let mode = a.mode.as_deref().map(str::parse::<Fidelity>).transpose().map_err(|e| Failure::new(status::USAGE, e))?;
    let o = Overrides { seed: a.seed, variant, mode };
    let (sc, setup, cfg) = Scenario::load(&text, &o)?;
    let cfg = SimConfig { mutation: parse_mutant(&a.mutant)?, ..cfg };
    let report = run(&setup, &cfg)?;
    Ok((sc, report))
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn metrics_csv(r: &SimReport) -> String {
    let mut out = String::from(
        "txn,outcome,participants,H,N,response_rt,response_syncs,lock_rt,lock_syncs,msgs_total,sync_logs,async_logs,participant_sync_logs,latency_ticks\n",
    );
    for (txn, tree) in &r.trees {
        let s = summarize(r, *txn);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            txn,
            s.outcome.map_or_else(String::new, |o| o.to_string()),
            tree.nodes.len(),
            s.shape.h,
            s.shape.n,
            s.response_rt,
            s.response_syncs,
            s.lock_rt,
            s.lock_syncs,
            s.msgs_total,
            s.sync_logs,
            s.async_logs,
            s.participant_sync_logs,
            s.latency_ticks.map_or_else(String::new, |t| t.to_string()),
        );
    }
    out
}

fn cmd_run(a: &RunArgs) -> Result<(), Failure> {
    let (sc, r) = load(&a.scenario)?;
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_file(dir, "trace.txt", &r.trace.render())?;
        write_file(dir, "metrics.csv", &metrics_csv(&r))?;
        let logs: String = r.streams.values().map(|s| s.dump()).collect();
        write_file(dir, "logs.txt", &logs)?;
    }
    println!("scenario {}: {} events, end time {}", sc.name, r.events, r.end_time);
    for (txn, outcomes) in &r.outcomes {
        let v: Vec<String> = outcomes.iter().map(ToString::to_string).collect();
        println!("txn {txn}: {}", v.join(" then "));
    }
    println!("trace hash {}", r.trace.hash());
    for v in &r.violations {
        println!("violation: {v}");
    }
    for l in &r.liveness {
        println!("liveness: {l}");
    }
    for t in &r.lies {
        println!("lie: user saw ABORTED for txn {t} after it committed");
    }
    let expected = sc.expected.as_ref();
    if let Some(e) = expected {
        let mismatches = e.check(&r);
        for m in &mismatches {
            println!("mismatch: {m}");
        }
        if !mismatches.is_empty() {
            return Err(Failure::new(status::MISMATCH, format!("{} expectation(s) not met", mismatches.len())));
        }
    }
    // Violations and lies listed in the expected block are the point of the
    // scenario, not failures.
    let expect_violations = expected.is_some_and(|e| e.violations);
    let unexpected_lies = r.lies.iter().any(|t| !expected.is_some_and(|e| e.lies.contains(t)));
    let mut invariant = Vec::new();
    if !r.violations.is_empty() && !expect_violations {
        invariant.push(format!("{} safety violation(s)", r.violations.len()));
    }
    if unexpected_lies {
        invariant.push("user observed ABORTED after commit".to_string());
    }
    if let Err(v) = &r.principle {
        invariant.push(format!("transfer principle violated {} time(s)", v.len()));
    }
    for (txn, res) in &r.minimum_set {
        if let Err(missing) = res {
            invariant.push(format!("txn {txn} misses final homes {missing:?}"));
        }
    }
    if !invariant.is_empty() {
        return Err(Failure::new(status::INVARIANT, invariant.join("; ")));
    }
    if !r.liveness.is_empty() {
        return Err(Failure::new(status::LIVENESS, format!("{} liveness failure(s)", r.liveness.len())));
    }
    println!("ok");
    Ok(())
}

fn cmd_check(a: &CheckArgs) -> Result<(), Failure> {
    if a.budget == 0 {
        return Err(Failure::new(status::USAGE, "budget must be positive"));
    }
    let internal_aborts = match a.internal_aborts.as_str() {
        "none" => None,
        n => Some(n.parse().map_err(|_| Failure::new(status::USAGE, format!("bad --internal-aborts {n:?}")))?),
    };
    let budget = Budget {
        max_states: a.budget,
        max_depth: a.max_depth,
        max_dynamic_adds: a.dynamic_adds,
        max_internal_aborts: internal_aborts,
        symmetry: !a.no_symmetry,
    };
    let trees: Vec<TreeConfig> = match a.shape.as_str() {
        "all" => all_trees(a.nodes, a.depth).into_iter().filter(|t| t.nodes == a.nodes).collect(),
        "chain" => vec![TreeConfig::chain(a.nodes)],
        "flat" => vec![TreeConfig::flat(a.nodes)],
        other => return Err(Failure::new(status::USAGE, format!("unknown shape {other:?}"))),
    };
    let mutation = parse_mutant(&a.mutant)?;
    let mut worst = status::OK;
    for (i, t) in trees.iter().enumerate() {
        let start = Instant::now();
        let r = explore(t, &budget, mutation).map_err(|e| Failure::new(status::USAGE, e.to_string()))?;
        println!("{r} in {:.2?}", start.elapsed());
        if let Some(ce) = &r.counterexample {
            match &a.out_dir {
                Some(dir) => {
                    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                    let name = format!("counterexample-{i}.txt");
                    write_file(dir, &name, &ce.render())?;
                    println!("counterexample ({} steps) written to {}", ce.steps.len(), dir.join(name).display());
                }
                None => print!("{}", ce.render()),
            }
        }
        let code = if r.consistency == Verdict::Fail || r.stability == Verdict::Fail {
            status::INVARIANT
        } else if r.liveness == Verdict::Fail {
            status::LIVENESS
        } else if r.inconclusive() {
            status::INCONCLUSIVE
        } else {
            status::OK
        };
        // Invariant beats liveness beats an exhausted budget.
        let rank = |c: u8| {
            [status::OK, status::INCONCLUSIVE, status::LIVENESS, status::INVARIANT].iter().position(|x| *x == c)
        };
        if rank(code) > rank(worst) {
            worst = code;
        }
    }
    match worst {
        status::OK => Ok(()),
        code => Err(Failure::new(code, "model check failed")),
    }
}

fn cmd_bench(a: &BenchArgs) -> Result<(), Failure> {
    let variant: ProtocolVariant =
        a.variant.parse().map_err(|e: treecommit::error::VariantError| Failure::new(status::USAGE, e.to_string()))?;
    let fidelity: Fidelity = a.mode.parse().map_err(|e| Failure::new(status::USAGE, e))?;
    let cfg = SimConfig { variant, fidelity, ..SimConfig::default() };
    let rows = sweep(&a.heights, &a.fanouts, &cfg)?;
    let csv = to_csv(&rows);
    let gran = match a.granularity {
        Some(p) => {
            let s = granularity_run(p, Granularity::LogStream, &cfg)?;
            let q = granularity_run(p, Granularity::Partition, &cfg)?;
            let reduction = 1.0 - s.prepare_msgs as f64 / q.prepare_msgs as f64;
            Some(format!(
                "granularity,partitions,participants,prepare_msgs,msgs_total\nlog_stream,{p},{},{},{}\npartition,{p},{},{},{}\n# prepare message reduction {:.2}%\n",
                s.participants,
                s.prepare_msgs,
                s.msgs_total,
                q.participants,
                q.prepare_msgs,
                q.msgs_total,
                reduction * 100.0
            ))
        }
        None => None,
    };
    match &a.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            write_file(dir, "sweep.csv", &csv)?;
            if let Some(g) = &gran {
                write_file(dir, "granularity.csv", g)?;
            }
        }
        None => {
            print!("{csv}");
            if let Some(g) = &gran {
                print!("{g}");
            }
        }
    }
    Ok(())
}

fn cmd_replay(a: &ReplayArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&a.trace).with_context(|| format!("reading {}", a.trace.display()))?;
    let projections = parse_projections(&text).map_err(|e| Failure::new(status::PARSE, e.to_string()))?;
    if projections.is_empty() {
        return Err(Failure::new(status::PARSE, "no projection lines in trace"));
    }
    match conformance_replay(&projections) {
        Ok(r) => {
            let stutters: usize = r.steps.values().flatten().filter(|s| s.is_none()).count();
            println!(
                "conformant: {} transaction(s), {} step(s), {} stutter(s)",
                r.steps.len(),
                r.transitions(),
                stutters
            );
            Ok(())
        }
        Err(e) => Err(Failure::new(status::INVARIANT, e.to_string())),
    }
}

fn cmd_log_dump(a: &LogDumpArgs) -> Result<(), Failure> {
    let (_, r) = load(&a.scenario)?;
    let stream = r
        .streams
        .get(&LogStreamId(a.stream))
        .ok_or_else(|| Failure::new(status::USAGE, format!("no stream {}", a.stream)))?;
    print!("{}", stream.dump());
    Ok(())
}
