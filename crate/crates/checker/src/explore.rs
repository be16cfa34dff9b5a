//! Breadth-first exploration of the reachable state space with per-state
//! invariants, per-edge decision stability and bounded liveness.
//!
//! States are reduced modulo the automorphisms of the initial tree: sibling
//! subtrees of equal shape are interchangeable, so only the least state of
//! each orbit is stored. The quotient graph preserves invariants, sinks and
//! cycles, and counterexamples are mapped back to concrete paths.
//!
//! Liveness is checked on the explored graph with self-loops removed: the
//! graph must be acyclic (so every fair path is finite) and every sink must
//! have all nodes decided or forgotten, in agreement.

use std::collections::VecDeque;
use std::fmt;

use indexmap::IndexSet;
use treecommit::state_machine::Mutation;
use treecommit::types::TwoPcState;

use crate::actions::{successors, Action, ActionBounds};
use crate::state::{StateError, WorldState, MAX_NODES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub max_states: usize,
    pub max_depth: usize,
    pub max_dynamic_adds: u8,
    pub max_internal_aborts: Option<u8>,
    /// Reduce modulo tree automorphisms.
    pub symmetry: bool,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            max_states: 1_000_000,
            max_depth: 1_000,
            max_dynamic_adds: 1,
            max_internal_aborts: Some(1),
            symmetry: true,
        }
    }
}

/// A participant tree: `parent[i]` for every non-root node `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TreeConfig {
    pub nodes: usize,
    pub root: usize,
    pub edges: Vec<(usize, usize)>,
}

impl TreeConfig {
    pub fn chain(nodes: usize) -> Self {
        TreeConfig { nodes, root: 0, edges: (1..nodes).map(|i| (i - 1, i)).collect() }
    }

    pub fn flat(nodes: usize) -> Self {
        TreeConfig { nodes, root: 0, edges: (1..nodes).map(|i| (0, i)).collect() }
    }

    /// Permutations of the nodes that fix the root and map the tree onto
    /// itself, the identity first. At most `cap` are returned; any subset
    /// still yields a sound reduction.
    pub fn automorphisms(&self, cap: usize) -> Vec<Vec<usize>> {
        let parent = |c: usize| self.edges.iter().find(|(_, x)| *x == c).map(|(p, _)| *p);
        let kids = |p: usize| -> Vec<usize> { self.edges.iter().filter(|(x, _)| *x == p).map(|(_, c)| *c).collect() };
        // Breadth-first order from the root; detached nodes stay fixed.
        let mut order = vec![self.root];
        let mut i = 0;
        while i < order.len() {
            order.extend(kids(order[i]));
            i += 1;
        }
        let mut out = Vec::new();
        let mut perm: Vec<usize> = (0..self.nodes).collect();
        let mut used = vec![false; self.nodes];
        for x in (0..self.nodes).filter(|x| !order.contains(x)) {
            used[x] = true;
        }
        used[self.root] = true;
        fn go(
            k: usize,
            order: &[usize],
            parent: &dyn Fn(usize) -> Option<usize>,
            kids: &dyn Fn(usize) -> Vec<usize>,
            perm: &mut Vec<usize>,
            used: &mut Vec<bool>,
            out: &mut Vec<Vec<usize>>,
            cap: usize,
        ) {
            if out.len() >= cap {
                return;
            }
            if k == order.len() {
                out.push(perm.clone());
                return;
            }
            let x = order[k];
            let px = parent(x).expect("non-root nodes in the order have parents");
            for y in kids(perm[px]) {
                if !used[y] && kids(y).len() == kids(x).len() {
                    used[y] = true;
                    perm[x] = y;
                    go(k + 1, order, parent, kids, perm, used, out, cap);
                    used[y] = false;
                    perm[x] = x;
                }
            }
        }
        go(1, &order, &parent, &kids, &mut perm, &mut used, &mut out, cap.max(1));
        // Identity first.
        if let Some(p) = out.iter().position(|p| p.iter().enumerate().all(|(i, x)| i == *x)) {
            out.swap(0, p);
        }
        out
    }

    pub fn depth(&self) -> usize {
        (0..self.nodes)
            .map(|mut i| {
                let mut d = 0;
                while let Some((p, _)) = self.edges.iter().find(|(_, c)| *c == i) {
                    i = *p;
                    d += 1;
                }
                d
            })
            .max()
            .unwrap_or(0)
    }
}

impl fmt::Display for TreeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let e: Vec<String> = self.edges.iter().map(|(p, c)| format!("{p}->{c}")).collect();
        write!(f, "nodes={} root={} edges=[{}]", self.nodes, self.root, e.join(","))
    }
}

/// Every tree rooted at node 0 over `1..=max_nodes` nodes with depth at
/// most `max_depth`, each node included.
pub fn all_trees(max_nodes: usize, max_depth: usize) -> Vec<TreeConfig> {
    let mut out = Vec::new();
    for n in 1..=max_nodes.min(MAX_NODES) {
        // Parent choices for nodes 1..n, kept when they form a tree.
        let mut parents = vec![0usize; n.saturating_sub(1)];
        loop {
            let edges: Vec<(usize, usize)> = parents.iter().enumerate().map(|(i, p)| (*p, i + 1)).collect();
            let acyclic = (1..n).all(|start| {
                let mut cur = start;
                for _ in 0..n {
                    if cur == 0 {
                        return true;
                    }
                    cur = parents[cur - 1];
                }
                false
            });
            let valid = acyclic && parents.iter().enumerate().all(|(i, p)| *p != i + 1);
            if valid {
                let t = TreeConfig { nodes: n, root: 0, edges };
                if t.depth() <= max_depth {
                    out.push(t);
                }
            }
            // Next assignment in base n.
            let mut i = 0;
            while i < parents.len() {
                parents[i] += 1;
                if parents[i] < n {
                    break;
                }
                parents[i] = 0;
                i += 1;
            }
            if i == parents.len() {
                break;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    /// The budget ran out before the check could be completed.
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "FAIL",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// A path from the initial state to a violation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Counterexample {
    pub property: &'static str,
    pub init: WorldState,
    pub steps: Vec<(Action, WorldState)>,
}

impl Counterexample {
    /// One projection line per state, replayable by the conformance checker.
    pub fn render(&self) -> String {
        let txn = treecommit::types::TxnId(1);
        let mut s = format!("# counterexample to {}\n", self.property);
        s.push_str(&format!("{}\n", self.init.to_projection(txn)));
        for (a, w) in &self.steps {
            s.push_str(&format!("# {a}\n{}\n", w.to_projection(txn)));
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub config: TreeConfig,
    /// Distinct protocol states stored, one per symmetry orbit.
    pub states: usize,
    /// Concrete protocol states the stored orbits stand for.
    pub concrete_states: usize,
    pub symmetries: usize,
    pub edges: usize,
    pub diameter: usize,
    pub truncated: bool,
    pub consistency: Verdict,
    pub stability: Verdict,
    pub liveness: Verdict,
    pub counterexample: Option<Counterexample>,
}

impl Report {
    pub fn passed(&self) -> bool {
        [self.consistency, self.stability, self.liveness].iter().all(|v| *v == Verdict::Pass)
    }

    pub fn inconclusive(&self) -> bool {
        !self.passed() && [self.consistency, self.stability, self.liveness].iter().all(|v| *v != Verdict::Fail)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: states={} (concrete {}, {} symmetries) edges={} diameter={}{} consistency={} stability={} liveness={}",
            self.config,
            self.states,
            self.concrete_states,
            self.symmetries,
            self.edges,
            self.diameter,
            if self.truncated { " (truncated)" } else { "" },
            self.consistency,
            self.stability,
            self.liveness
        )
    }
}

fn stable(from: TwoPcState, to: TwoPcState) -> bool {
    match from {
        TwoPcState::Commit => matches!(to, TwoPcState::Commit | TwoPcState::Tombstone),
        TwoPcState::Abort => matches!(to, TwoPcState::Abort | TwoPcState::Tombstone),
        _ => true,
    }
}

/// Explored graph. Vertices are protocol states; the InternalAbort counter
/// is tracked as a per-state level so that states differing only in that
/// bookkeeping share one entry. A node of the level graph is
/// `state * levels + level`.
struct Graph {
    states: IndexSet<WorldState>,
    levels: usize,
    /// Levels reached per state, as a bitmask.
    reached: Vec<u64>,
    pred: Vec<Option<u32>>,
    depth: Vec<u32>,
    /// Non-self edges between level-graph nodes.
    edges: Vec<(u32, u32)>,
    autos: Vec<Vec<usize>>,
    bounds: ActionBounds,
}

impl Graph {
    fn state_of(&self, node: usize) -> WorldState {
        let mut w = self.states[node / self.levels].clone();
        w.internal_aborts = (node % self.levels) as u8;
        w
    }

    /// The least member of the orbit of `s`, with the counter cleared.
    fn canonical(&self, s: &WorldState) -> WorldState {
        let mut s = s.clone();
        s.internal_aborts = 0;
        self.autos[1..].iter().map(|p| s.permute(p)).fold(s.clone(), |a, b| a.min(b))
    }

    fn orbit_size(&self, s: &WorldState) -> usize {
        let mut images: Vec<WorldState> = self.autos.iter().map(|p| s.permute(p)).collect();
        images.sort_unstable();
        images.dedup();
        images.len()
    }

    /// A concrete path from the initial state to some member of the orbit
    /// of `node`.
    fn path(&self, node: usize, property: &'static str) -> Counterexample {
        let mut chain = vec![node];
        while let Some(p) = self.pred[*chain.last().unwrap()] {
            chain.push(p as usize);
        }
        chain.reverse();
        let init = self.state_of(chain[0]);
        let mut cur = init.clone();
        let mut steps = Vec::new();
        for &next in &chain[1..] {
            let level = (next % self.levels) as u8;
            let target = &self.states[next / self.levels];
            let (a, s) = successors(&cur, &self.bounds)
                .into_iter()
                .find(|(_, s)| (self.levels == 1 || s.internal_aborts == level) && self.canonical(s) == *target)
                .expect("every stored edge has a concrete witness");
            steps.push((a, s.clone()));
            cur = s;
        }
        Counterexample { property, init, steps }
    }

    /// Registers `node` if its level is new for its state.
    fn visit(&mut self, node: usize, pred: Option<u32>, depth: u32) -> bool {
        let (i, k) = (node / self.levels, node % self.levels);
        if self.reached[i] & (1 << k) != 0 {
            return false;
        }
        self.reached[i] |= 1 << k;
        self.pred[node] = pred;
        self.depth[node] = depth;
        true
    }

    fn add_state(&mut self, s: WorldState) -> usize {
        let (i, _) = self.states.insert_full(s);
        self.reached.push(0);
        self.pred.extend(std::iter::repeat(None).take(self.levels));
        self.depth.extend(std::iter::repeat(u32::MAX).take(self.levels));
        i
    }
}

/// Automorphisms considered per tree; the full group of any tree with at
/// most seven nodes fits.
const MAX_SYMMETRIES: usize = 720;

pub fn explore(config: &TreeConfig, budget: &Budget, mutation: Option<Mutation>) -> Result<Report, StateError> {
    let init = WorldState::init(config.nodes, config.root, &config.edges)?;
    let bounds = ActionBounds {
        max_dynamic_adds: budget.max_dynamic_adds,
        max_internal_aborts: budget.max_internal_aborts.map(|b| b.min(62)),
        mutation,
    };
    let levels = bounds.max_internal_aborts.map_or(1, |b| b as usize + 1);
    let autos = if budget.symmetry { config.automorphisms(MAX_SYMMETRIES) } else { vec![(0..config.nodes).collect()] };
    let mut g = Graph {
        states: IndexSet::new(),
        levels,
        reached: Vec::new(),
        pred: Vec::new(),
        depth: Vec::new(),
        edges: Vec::new(),
        autos,
        bounds,
    };
    let mut report = Report {
        config: config.clone(),
        states: 0,
        concrete_states: 0,
        symmetries: g.autos.len(),
        edges: 0,
        diameter: 0,
        truncated: false,
        consistency: Verdict::Pass,
        stability: Verdict::Pass,
        liveness: Verdict::Pass,
        counterexample: None,
    };
    let consistent_init = init.consistent();
    report.concrete_states += g.orbit_size(&init);
    let init = g.canonical(&init);
    g.add_state(init);
    g.visit(0, None, 0);
    let mut failed = false;
    if !consistent_init {
        report.consistency = Verdict::Fail;
        report.counterexample = Some(g.path(0, "Consistency"));
        failed = true;
    }
    let mut queue = VecDeque::from([0usize]);
    while let Some(node) = queue.pop_front() {
        if failed {
            break;
        }
        let d = g.depth[node];
        let from = g.state_of(node);
        for (_, s) in successors(&from, &g.bounds) {
            if d as usize + 1 > budget.max_depth {
                report.truncated = true;
                continue;
            }
            let level = s.internal_aborts as usize;
            let unstable = from.nodes.iter().zip(s.nodes.iter()).any(|(a, b)| !stable(a.rm, b.rm));
            let s = g.canonical(&s);
            let (i, fresh) = match g.states.get_index_of(&s) {
                Some(i) => (i, false),
                None => {
                    if g.states.len() >= budget.max_states {
                        report.truncated = true;
                        continue;
                    }
                    report.concrete_states += g.orbit_size(&s);
                    (g.add_state(s), true)
                }
            };
            let to = i * levels + level;
            if to != node {
                g.edges.push((node as u32, to as u32));
            }
            if g.visit(to, Some(node as u32), d + 1) {
                queue.push_back(to);
            }
            if unstable && !failed {
                report.stability = Verdict::Fail;
                let mut ce = g.path(node, "decision stability");
                let last = ce.steps.last().map_or(&ce.init, |(_, w)| w).clone();
                let bad = successors(&last, &g.bounds)
                    .into_iter()
                    .find(|(_, s)| last.nodes.iter().zip(s.nodes.iter()).any(|(a, b)| !stable(a.rm, b.rm)))
                    .expect("orbit members have the same unstable steps");
                ce.steps.push(bad);
                report.counterexample = Some(ce);
                failed = true;
            }
            if fresh && !g.states[i].consistent() && !failed {
                report.consistency = Verdict::Fail;
                report.counterexample = Some(g.path(to, "Consistency"));
                failed = true;
            }
        }
    }
    report.states = g.states.len();
    report.edges = g.edges.len();
    report.diameter = g.depth.iter().copied().filter(|d| *d != u32::MAX).max().unwrap_or(0) as usize;
    if failed {
        report.liveness = Verdict::Inconclusive;
        return Ok(report);
    }
    if report.truncated {
        report.consistency = Verdict::Inconclusive;
        report.stability = Verdict::Inconclusive;
        report.liveness = Verdict::Inconclusive;
        return Ok(report);
    }
    check_liveness(&mut g, &mut report);
    Ok(report)
}

fn check_liveness(g: &mut Graph, report: &mut Report) {
    let n = g.states.len() * g.levels;
    let exists = |g: &Graph, node: usize| g.reached[node / g.levels] & (1 << (node % g.levels)) != 0;
    g.edges.sort_unstable();
    g.edges.dedup();
    let mut offsets = vec![0u32; n + 1];
    for &(f, _) in &g.edges {
        offsets[f as usize + 1] += 1;
    }
    for i in 0..n {
        offsets[i + 1] += offsets[i];
    }
    let succ = |i: usize| g.edges[offsets[i] as usize..offsets[i + 1] as usize].iter().map(|(_, t)| *t as usize);
    for node in 0..n {
        if exists(g, node) && succ(node).next().is_none() && !g.states[node / g.levels].terminal_agreement() {
            report.liveness = Verdict::Fail;
            report.counterexample = Some(g.path(node, "termination with agreement"));
            return;
        }
    }
    // Kahn's algorithm: a leftover node lies on or leads into a cycle.
    let mut indegree = vec![0u32; n];
    for &(_, t) in &g.edges {
        indegree[t as usize] += 1;
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|i| exists(g, *i) && indegree[*i] == 0).collect();
    let mut removed = 0;
    while let Some(i) = queue.pop_front() {
        removed += 1;
        for t in succ(i) {
            indegree[t] -= 1;
            if indegree[t] == 0 {
                queue.push_back(t);
            }
        }
    }
    let total = (0..n).filter(|i| exists(g, *i)).count();
    if removed < total {
        report.liveness = Verdict::Fail;
        let on_cycle = (0..n).find(|i| indegree[*i] > 0).expect("a node remains");
        report.counterexample = Some(g.path(on_cycle, "termination (cycle reachable)"));
    }
}
