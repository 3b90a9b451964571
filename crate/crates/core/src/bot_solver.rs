//! Minimizers of the branched-transport energy over a candidate library.
//!
//! Restricted to nonnegative balanced flows, the concave energy attains its
//! minimum on flows whose support is a forest, so both solvers work with
//! forest supports:
//!
//! * [`oracle_solve`] enumerates every forest edge subset, solves the
//!   balance equations on each tree by leaf elimination and keeps the best
//!   admissible flow. Exact but exponential, guarded by a size budget.
//! * [`local_search`] starts from seeded admissible flows, reduces them to
//!   forest supports by cycle cancellation and then applies single-edge
//!   pivot moves until no move improves the energy, over several restarts.
//!
//! Both report infeasibility with a vertex witness obtained from a max-flow
//! computation.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph_core::{EmbeddedGraph, Exponent, FlowVector, GraphError, SUPPORT_EPS};

/// Largest number of forest subsets the oracle agrees to enumerate.
pub const ORACLE_FOREST_BUDGET: f64 = 2e7;

/// Relative tolerance under which two energies count as tied.
pub const ENERGY_TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("no admissible flow exists; {witness:?} carry unmet divergence")]
    Infeasible { witness: Vec<usize> },
    #[error("forest enumeration would visit about {estimate:.3e} subsets, over the {budget:.3e} budget")]
    TooLarge { estimate: f64, budget: f64 },
    #[error("could not construct an admissible starting flow")]
    NoAdmissibleStart,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Knobs for [`local_search`]; results are a pure function of these values.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub alpha: Exponent,
    /// Base seed; restart `i` uses `seed + i`.
    pub seed: u64,
    /// Number of independent starts (the first is the max-flow start).
    pub restarts: usize,
    /// Safety cap on pivot moves within one restart.
    pub max_pivots_per_restart: usize,
}

impl SolveConfig {
    pub fn new(alpha: Exponent, seed: u64) -> Self {
        Self { alpha, seed, restarts: 32, max_pivots_per_restart: 10_000 }
    }
}

/// What a solver can promise about its output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Certificate {
    /// Every forest support was enumerated; the flow is a global minimizer
    /// over vertex-supported admissible flows.
    GlobalForestOptimum { forests_evaluated: u64 },
    /// No single-edge pivot move improves the energy.
    LocalOptimum { restarts: usize, pivot_moves: u64, distinct_optima: usize },
}

/// An admissible flow together with its energy and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub flow: FlowVector,
    pub energy: f64,
    /// Sorted edge indices carrying flow above the support threshold.
    pub support: Vec<usize>,
    pub alpha: f64,
    pub certificate: Certificate,
}

/// Outcome of the admissibility pre-check.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// Mass actually routable from sources to sinks.
    pub max_flow: f64,
    /// Total source mass that must be routed.
    pub supply: f64,
    /// Terminal vertices left with unmet divergence (empty when feasible).
    pub witness: Vec<usize>,
}

fn energies_tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= ENERGY_TIE_RTOL * a.abs().max(b.abs()).max(1.0)
}

/// `candidate` strictly precedes `incumbent` under (energy, support) order.
fn improves(candidate: (f64, &[usize]), incumbent: (f64, &[usize])) -> bool {
    if energies_tied(candidate.0, incumbent.0) {
        candidate.1 < incumbent.1
    } else {
        candidate.0 < incumbent.0
    }
}

// ---------------------------------------------------------------------------
// Feasibility via max flow
// ---------------------------------------------------------------------------

/// Residual network for Edmonds-Karp; edges are stored in twin pairs.
struct ResidualNetwork {
    to: Vec<usize>,
    cap: Vec<f64>,
    out: Vec<Vec<usize>>,
}

impl ResidualNetwork {
    fn new(n: usize) -> Self {
        Self { to: Vec::new(), cap: Vec::new(), out: vec![Vec::new(); n] }
    }

    fn add_edge(&mut self, u: usize, v: usize, capacity: f64) -> usize {
        let id = self.to.len();
        self.to.push(v);
        self.cap.push(capacity);
        self.out[u].push(id);
        self.to.push(u);
        self.cap.push(0.0);
        self.out[v].push(id + 1);
        id
    }

    /// Shortest-augmenting-path max flow from `s` to `t`.
    fn max_flow(&mut self, s: usize, t: usize) -> f64 {
        let n = self.out.len();
        let mut total = 0.0;
        loop {
            // Breadth-first search for an augmenting path.
            let mut pred: Vec<Option<usize>> = vec![None; n];
            let mut queue = std::collections::VecDeque::new();
            queue.push_back(s);
            let mut seen = vec![false; n];
            seen[s] = true;
            while let Some(u) = queue.pop_front() {
                if u == t {
                    break;
                }
                for &e in &self.out[u] {
                    let v = self.to[e];
                    if !seen[v] && self.cap[e] > 0.0 {
                        seen[v] = true;
                        pred[v] = Some(e);
                        queue.push_back(v);
                    }
                }
            }
            if !seen[t] {
                return total;
            }
            let mut bottleneck = f64::INFINITY;
            let mut v = t;
            while v != s {
                let e = pred[v].expect("path reaches the source");
                bottleneck = bottleneck.min(self.cap[e]);
                v = self.to[e ^ 1];
            }
            let mut v = t;
            while v != s {
                let e = pred[v].expect("path reaches the source");
                self.cap[e] -= bottleneck;
                if self.cap[e] < 0.0 || self.cap[e].abs() < f64::MIN_POSITIVE {
                    self.cap[e] = 0.0;
                }
                self.cap[e ^ 1] += bottleneck;
                v = self.to[e ^ 1];
            }
            total += bottleneck;
        }
    }
}

/// Decides whether any admissible flow exists by routing the source masses
/// towards the sinks through the directed candidate edges. When infeasible,
/// the witness lists the terminals whose divergence cannot be met.
pub fn feasibility_check(graph: &EmbeddedGraph) -> FeasibilityReport {
    let (report, _) = feasibility_with_flow(graph);
    report
}

/// Feasibility report plus, when feasible, one admissible flow.
fn feasibility_with_flow(graph: &EmbeddedGraph) -> (FeasibilityReport, Option<FlowVector>) {
    let n = graph.n_vertices();
    let b = graph.divergence();
    let supply: f64 = b.iter().filter(|&&x| x > 0.0).sum();
    let tol = graph.kirchhoff_tolerance();
    if supply <= tol {
        // Nothing to route; the zero flow is admissible.
        let report = FeasibilityReport {
            feasible: true,
            max_flow: 0.0,
            supply,
            witness: Vec::new(),
        };
        return (report, Some(vec![0.0; graph.n_edges()]));
    }

    let source = n;
    let sink = n + 1;
    let mut net = ResidualNetwork::new(n + 2);
    let mut terminal_edges: Vec<(usize, usize)> = Vec::new();
    for (v, &bv) in b.iter().enumerate() {
        if bv > 0.0 {
            terminal_edges.push((v, net.add_edge(source, v, bv)));
        } else if bv < 0.0 {
            terminal_edges.push((v, net.add_edge(v, sink, -bv)));
        }
    }
    // An acyclic admissible flow never carries more than the total supply on
    // any single edge, so this capacity does not cut off feasible routings.
    let mut inner_edges = Vec::with_capacity(graph.n_edges());
    for e in graph.edges() {
        inner_edges.push(net.add_edge(e.tail, e.head, supply));
    }

    let max_flow = net.max_flow(source, sink);
    let feasible = max_flow >= supply - tol;
    let witness = if feasible {
        Vec::new()
    } else {
        terminal_edges
            .iter()
            .filter(|&&(_, e)| net.cap[e] > tol)
            .map(|&(v, _)| v)
            .collect()
    };
    let flow = feasible.then(|| {
        inner_edges
            .iter()
            .map(|&e| net.cap[e ^ 1]) // accumulated flow sits on the twin
            .collect()
    });
    (FeasibilityReport { feasible, max_flow, supply, witness }, flow)
}

// ---------------------------------------------------------------------------
// Exact oracle: forest enumeration
// ---------------------------------------------------------------------------

/// Union-find with rollback and no path compression.
struct UndoableDsu {
    parent: Vec<usize>,
    size: Vec<usize>,
    history: Vec<usize>,
}

impl UndoableDsu {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n], history: Vec::new() }
    }

    fn find(&self, mut v: usize) -> usize {
        while self.parent[v] != v {
            v = self.parent[v];
        }
        v
    }

    /// Returns `false` when the edge would close a cycle.
    fn union(&mut self, u: usize, v: usize) -> bool {
        let (mut ru, mut rv) = (self.find(u), self.find(v));
        if ru == rv {
            return false;
        }
        if self.size[ru] < self.size[rv] {
            std::mem::swap(&mut ru, &mut rv);
        }
        self.parent[rv] = ru;
        self.size[ru] += self.size[rv];
        self.history.push(rv);
        true
    }

    fn undo(&mut self) {
        let rv = self.history.pop().expect("undo matches a union");
        let ru = self.parent[rv];
        self.parent[rv] = rv;
        self.size[ru] -= self.size[rv];
    }
}

/// Scratch space for solving the balance equations on a forest support.
struct ForestEvaluator {
    degree: Vec<usize>,
    residual: Vec<f64>,
    processed: Vec<bool>,
    incident: Vec<Vec<usize>>,
    edge_alive: Vec<bool>,
    leaves: Vec<usize>,
    flow: Vec<f64>,
}

impl ForestEvaluator {
    fn new(graph: &EmbeddedGraph) -> Self {
        Self {
            degree: vec![0; graph.n_vertices()],
            residual: vec![0.0; graph.n_vertices()],
            processed: vec![false; graph.n_vertices()],
            incident: vec![Vec::new(); graph.n_vertices()],
            edge_alive: vec![false; graph.n_edges()],
            leaves: Vec::new(),
            flow: vec![0.0; graph.n_edges()],
        }
    }

    /// Unique flow supported on the forest `subset` with `A w = b`, or
    /// `None` when that flow is negative or unbalanced. Tiny negative values
    /// within the Kirchhoff tolerance are clamped to zero.
    fn solve(&mut self, graph: &EmbeddedGraph, subset: &[usize]) -> Option<FlowVector> {
        let tol = graph.kirchhoff_tolerance();
        let edges = graph.edges();
        let b = graph.divergence();
        let touched: Vec<usize> = subset
            .iter()
            .flat_map(|&j| [edges[j].tail, edges[j].head])
            .collect();
        for &v in &touched {
            self.degree[v] = 0;
            self.incident[v].clear();
            self.processed[v] = false;
            self.residual[v] = b[v];
        }
        for &j in subset {
            let e = &edges[j];
            self.degree[e.tail] += 1;
            self.degree[e.head] += 1;
            self.incident[e.tail].push(j);
            self.incident[e.head].push(j);
            self.edge_alive[j] = true;
            self.flow[j] = 0.0;
        }
        self.leaves.clear();
        for &v in &touched {
            if self.degree[v] == 1 {
                self.leaves.push(v);
            }
        }
        // Peel leaves: each elimination fixes exactly one edge flow. Popped
        // vertices whose last edge was meanwhile taken by the neighbor are
        // stale and skipped (duplicate queue entries are harmless for the
        // same reason).
        let mut ok = true;
        while let Some(v) = self.leaves.pop() {
            if self.degree[v] != 1 || self.processed[v] {
                continue;
            }
            let &j = self.incident[v]
                .iter()
                .find(|&&j| self.edge_alive[j])
                .expect("a degree-one vertex has one live incident edge");
            let e = &edges[j];
            let u = if e.tail == v { e.head } else { e.tail };
            let w = if e.tail == v {
                let w = self.residual[v];
                self.residual[u] += w;
                w
            } else {
                let w = -self.residual[v];
                self.residual[u] -= w;
                w
            };
            if w < -tol {
                ok = false;
                break;
            }
            self.flow[j] = w.max(0.0);
            self.processed[v] = true;
            self.edge_alive[j] = false;
            self.degree[v] -= 1;
            self.degree[u] -= 1;
            if self.degree[u] == 1 {
                self.leaves.push(u);
            }
        }
        // Each tree component leaves one unprocessed root; its residual must
        // vanish or the component's divergence cannot be balanced.
        if ok {
            for &v in &touched {
                if !self.processed[v] && self.residual[v].abs() > tol {
                    ok = false;
                    break;
                }
            }
        }
        // Reset shared scratch for the next call.
        for &j in subset {
            self.edge_alive[j] = false;
        }
        if !ok {
            for &j in subset {
                self.flow[j] = 0.0;
            }
            return None;
        }
        let mut out = vec![0.0; graph.n_edges()];
        for &j in subset {
            out[j] = self.flow[j];
            self.flow[j] = 0.0;
        }
        Some(out)
    }
}

/// Upper bound on the number of forest subsets of `m` edges over `n`
/// vertices: all subsets of size at most `n - 1`.
fn forest_count_bound(n_vertices: usize, n_edges: usize) -> f64 {
    let k_max = n_edges.min(n_vertices.saturating_sub(1));
    let mut total = 0.0f64;
    let mut choose = 1.0f64; // C(m, 0)
    for k in 0..=k_max {
        if k > 0 {
            choose *= (n_edges - k + 1) as f64 / k as f64;
        }
        total += choose;
        if total > 1e18 {
            return total;
        }
    }
    total
}

struct OracleState<'g> {
    graph: &'g EmbeddedGraph,
    alpha: Exponent,
    evaluator: ForestEvaluator,
    dsu: UndoableDsu,
    subset: Vec<usize>,
    forests_evaluated: u64,
    /// Best solutions so far: sorted by (energy, support), at most `pool`.
    best: Vec<(f64, Vec<usize>, FlowVector)>,
    pool: usize,
}

impl<'g> OracleState<'g> {
    fn consider(&mut self, flow: FlowVector) {
        if !self.graph.is_admissible(&flow).expect("flow length matches") {
            return;
        }
        let energy = self.graph.energy(&flow, self.alpha).expect("flow length matches");
        let support = self.graph.support(&flow);
        // Supports can repeat when a subset edge carries zero flow and the
        // smaller subset is also enumerated; keep one entry per support.
        if self
            .best
            .iter()
            .any(|(e, s, _)| energies_tied(*e, energy) && *s == support)
        {
            return;
        }
        let pos = self
            .best
            .iter()
            .position(|(e, s, _)| !improves((*e, s), (energy, &support)))
            .unwrap_or(self.best.len());
        if pos < self.pool {
            self.best.insert(pos, (energy, support, flow));
            self.best.truncate(self.pool);
        }
    }

    fn recurse(&mut self, next_edge: usize) {
        let edges = self.graph.edges();
        let max_size = self.graph.n_vertices() - 1;
        for (j, edge) in edges.iter().enumerate().skip(next_edge) {
            if self.subset.len() >= max_size {
                break;
            }
            if self.dsu.union(edge.tail, edge.head) {
                self.subset.push(j);
                self.forests_evaluated += 1;
                if let Some(flow) = self.evaluator.solve(self.graph, &self.subset) {
                    self.consider(flow);
                }
                self.recurse(j + 1);
                self.subset.pop();
                self.dsu.undo();
            }
        }
    }
}

/// Exhaustively minimizes the energy over all forest-supported admissible
/// flows. Fails with [`SolveError::TooLarge`] when the enumeration would
/// exceed [`ORACLE_FOREST_BUDGET`] subsets and with
/// [`SolveError::Infeasible`] when no admissible flow exists.
pub fn oracle_solve(graph: &EmbeddedGraph, alpha: Exponent) -> Result<Solution, SolveError> {
    let mut pool = oracle_pool(graph, alpha, 1)?;
    Ok(pool.remove(0))
}

/// The `pool_size` best distinct forest solutions, sorted by (energy,
/// support). Ties between supports resolve to the lexicographically
/// smallest index set.
pub fn oracle_pool(
    graph: &EmbeddedGraph,
    alpha: Exponent,
    pool_size: usize,
) -> Result<Vec<Solution>, SolveError> {
    assert!(pool_size >= 1, "pool must hold at least one solution");
    let report = feasibility_check(graph);
    if !report.feasible {
        return Err(SolveError::Infeasible { witness: report.witness });
    }
    let estimate = forest_count_bound(graph.n_vertices(), graph.n_edges());
    if estimate > ORACLE_FOREST_BUDGET {
        return Err(SolveError::TooLarge { estimate, budget: ORACLE_FOREST_BUDGET });
    }

    let mut state = OracleState {
        graph,
        alpha,
        evaluator: ForestEvaluator::new(graph),
        dsu: UndoableDsu::new(graph.n_vertices()),
        subset: Vec::new(),
        forests_evaluated: 1, // the empty forest below
        best: Vec::new(),
        pool: pool_size,
    };
    state.consider(vec![0.0; graph.n_edges()]);
    state.recurse(0);
    let forests = state.forests_evaluated;
    if state.best.is_empty() {
        // Feasible but no forest-supported flow: cannot happen, since cycle
        // removal turns any admissible flow into a forest-supported one.
        return Err(SolveError::NoAdmissibleStart);
    }
    Ok(state
        .best
        .into_iter()
        .map(|(energy, support, flow)| Solution {
            flow,
            energy,
            support,
            alpha: alpha.get(),
            certificate: Certificate::GlobalForestOptimum { forests_evaluated: forests },
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Local search
// ---------------------------------------------------------------------------

/// Signed cycle step: edge index and `+1`/`-1` for traversal with/against
/// the edge direction.
type SignedCycle = Vec<(usize, f64)>;

/// Energy change of moving `t` along a signed cycle (`w + sigma t`).
fn cycle_energy_delta(graph: &EmbeddedGraph, w: &[f64], cycle: &[(usize, f64)], t: f64, alpha: f64) -> f64 {
    let edges = graph.edges();
    cycle
        .iter()
        .map(|&(j, sigma)| {
            let old = w[j].max(0.0);
            let new = (w[j] + sigma * t).max(0.0);
            edges[j].beta * (new.powf(alpha) - old.powf(alpha))
        })
        .sum()
}

/// Applies `w += sigma t` along the cycle, snapping exhausted edges to zero.
fn apply_cycle(w: &mut [f64], cycle: &[(usize, f64)], t: f64) {
    for &(j, sigma) in cycle {
        w[j] += sigma * t;
        if w[j] <= SUPPORT_EPS {
            w[j] = 0.0;
        }
    }
}

/// Finds one undirected cycle in the support of `w`, as a signed edge list
/// (`+1` along the edge direction, `-1` against it).
///
/// Builds a breadth-first spanning forest of the support; any support edge
/// outside the forest closes exactly one cycle, recovered by walking both
/// endpoints up to their lowest common ancestor.
fn find_undirected_support_cycle(graph: &EmbeddedGraph, w: &[f64]) -> Option<SignedCycle> {
    let n = graph.n_vertices();
    let edges = graph.edges();
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n]; // (edge, other endpoint)
    let mut support: Vec<usize> = Vec::new();
    for (j, e) in edges.iter().enumerate() {
        if w[j] > SUPPORT_EPS {
            adjacency[e.tail].push((j, e.head));
            adjacency[e.head].push((j, e.tail));
            support.push(j);
        }
    }
    let mut entry: Vec<Option<(usize, usize)>> = vec![None; n]; // (edge, parent)
    let mut depth = vec![0usize; n];
    let mut component = vec![usize::MAX; n];
    for root in 0..n {
        if component[root] != usize::MAX || adjacency[root].is_empty() {
            continue;
        }
        component[root] = root;
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            for &(j, u) in &adjacency[v] {
                if component[u] == usize::MAX {
                    component[u] = root;
                    entry[u] = Some((j, v));
                    depth[u] = depth[v] + 1;
                    queue.push_back(u);
                }
            }
        }
    }
    // A support edge is a tree edge exactly when it is the entry edge of one
    // of its endpoints (parallel edges compare by index, so a twin of a tree
    // edge correctly counts as a cycle-closing edge).
    let is_tree_edge = |j: usize| {
        let e = &edges[j];
        entry[e.tail].is_some_and(|(ej, _)| ej == j)
            || entry[e.head].is_some_and(|(ej, _)| ej == j)
    };
    let j = *support.iter().find(|&&j| !is_tree_edge(j))?;
    let (a, b) = (edges[j].tail, edges[j].head);

    // Close the cycle: push along j (a -> b), return b -> ... -> lca -> ... -> a.
    let mut cycle: SignedCycle = vec![(j, 1.0)];
    let mut up_from_b: Vec<(usize, f64)> = Vec::new(); // walked b -> lca
    let mut down_to_a: Vec<(usize, f64)> = Vec::new(); // walked lca -> a, collected a -> lca
    let (mut x, mut y) = (b, a); // x walks up from b, y up from a
    while depth[x] > depth[y] {
        let (e, p) = entry[x].expect("deeper vertex has a parent");
        up_from_b.push((e, if edges[e].tail == x { 1.0 } else { -1.0 }));
        x = p;
    }
    while depth[y] > depth[x] {
        let (e, p) = entry[y].expect("deeper vertex has a parent");
        // Walk direction in the cycle is p -> y (downhill towards a).
        down_to_a.push((e, if edges[e].tail == p { 1.0 } else { -1.0 }));
        y = p;
    }
    while x != y {
        let (ex, px) = entry[x].expect("vertices below the lca have parents");
        up_from_b.push((ex, if edges[ex].tail == x { 1.0 } else { -1.0 }));
        x = px;
        let (ey, py) = entry[y].expect("vertices below the lca have parents");
        down_to_a.push((ey, if edges[ey].tail == py { 1.0 } else { -1.0 }));
        y = py;
    }
    cycle.extend(up_from_b);
    cycle.extend(down_to_a.into_iter().rev());
    Some(cycle)
}

/// Cancels undirected support cycles until the support is a forest, moving
/// to whichever cycle endpoint has lower energy. Admissibility is preserved
/// exactly and the energy never increases (the energy is concave along each
/// cycle direction).
fn reduce_to_forest(graph: &EmbeddedGraph, w: &mut FlowVector, alpha: Exponent) {
    let a = alpha.get();
    while let Some(cycle) = find_undirected_support_cycle(graph, w) {
        // Feasible interval [-t_minus, t_plus]: forward edges limit negative
        // movement, backward edges limit positive movement.
        let mut t_plus = f64::INFINITY;
        let mut t_minus = f64::INFINITY;
        for &(j, sigma) in &cycle {
            if sigma < 0.0 {
                t_plus = t_plus.min(w[j]);
            } else {
                t_minus = t_minus.min(w[j]);
            }
        }
        let candidates = [t_plus, -t_minus];
        let mut best_t = None;
        let mut best_delta = f64::INFINITY;
        for &t in &candidates {
            if !t.is_finite() {
                continue;
            }
            let delta = cycle_energy_delta(graph, w, &cycle, t, a);
            if delta < best_delta {
                best_delta = delta;
                best_t = Some(t);
            }
        }
        let t = best_t.expect("support cycles always admit a canceling move");
        apply_cycle(w, &cycle, t);
    }
}

/// Path through the support forest from `from` to `to`, as signed edges
/// (positive when traversed tail-to-head). `None` when disconnected.
fn forest_path(
    graph: &EmbeddedGraph,
    w: &[f64],
    from: usize,
    to: usize,
) -> Option<SignedCycle> {
    let n = graph.n_vertices();
    let edges = graph.edges();
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (j, e) in edges.iter().enumerate() {
        if w[j] > SUPPORT_EPS {
            adjacency[e.tail].push((j, e.head));
            adjacency[e.head].push((j, e.tail));
        }
    }
    let mut entry: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut visited = vec![false; n];
    visited[from] = true;
    let mut queue = std::collections::VecDeque::from([from]);
    while let Some(v) = queue.pop_front() {
        if v == to {
            break;
        }
        for &(j, u) in &adjacency[v] {
            if !visited[u] {
                visited[u] = true;
                entry[u] = Some((j, v));
                queue.push_back(u);
            }
        }
    }
    if !visited[to] {
        return None;
    }
    let mut path = Vec::new();
    let mut cur = to;
    while cur != from {
        let (j, p) = entry[cur].expect("walk reaches the origin");
        // Traversed p -> cur: positive when the edge points that way.
        let sigma = if edges[j].tail == p { 1.0 } else { -1.0 };
        path.push((j, sigma));
        cur = p;
    }
    path.reverse();
    Some(path)
}

/// Admissible flows exactly one pivot move away from `flow`: for every edge
/// outside the support that closes a cycle through the support with at least
/// one counter-flowing edge, the bottleneck amount is pushed around that
/// cycle, swapping the entering edge against a zeroed one. The list order is
/// deterministic (by entering edge index). Callers evaluating objectives
/// beyond the plain energy use this as their pivot neighborhood.
pub fn adjacent_forest_flows(graph: &EmbeddedGraph, flow: &FlowVector) -> Vec<FlowVector> {
    let edges = graph.edges();
    let mut out = Vec::new();
    for (f, e) in edges.iter().enumerate() {
        if flow[f] > SUPPORT_EPS {
            continue;
        }
        let Some(back) = forest_path(graph, flow, e.head, e.tail) else {
            continue;
        };
        let mut cycle: SignedCycle = Vec::with_capacity(back.len() + 1);
        cycle.push((f, 1.0));
        cycle.extend(back);
        let mut t_max = f64::INFINITY;
        for &(j, sigma) in &cycle[1..] {
            if sigma < 0.0 {
                t_max = t_max.min(flow[j]);
            }
        }
        if !t_max.is_finite() || t_max <= SUPPORT_EPS {
            continue;
        }
        let mut w = flow.clone();
        apply_cycle(&mut w, &cycle, t_max);
        out.push(w);
    }
    out
}

/// One best-improvement pivot: adds an off-support edge, pushes flow around
/// the unique support cycle to the concave-optimal endpoint, returns whether
/// a strictly improving move was applied.
fn pivot_improve(graph: &EmbeddedGraph, w: &mut FlowVector, alpha: Exponent) -> bool {
    let a = alpha.get();
    let edges = graph.edges();
    let mut best: Option<(f64, usize, SignedCycle, f64)> = None; // (delta, edge, cycle, t)
    for (f, e) in edges.iter().enumerate() {
        if w[f] > SUPPORT_EPS {
            continue;
        }
        // Candidate cycle: f from tail to head, then back through the forest.
        let Some(back) = forest_path(graph, w, e.head, e.tail) else {
            continue;
        };
        let mut cycle: SignedCycle = Vec::with_capacity(back.len() + 1);
        cycle.push((f, 1.0));
        cycle.extend(back);
        let mut t_max = f64::INFINITY;
        for &(j, sigma) in &cycle[1..] {
            if sigma < 0.0 {
                t_max = t_max.min(w[j]);
            }
        }
        if !t_max.is_finite() || t_max <= SUPPORT_EPS {
            // No counter-flowing tree edge: every cycle edge would gain
            // flow, so the energy can only grow.
            continue;
        }
        let delta = cycle_energy_delta(graph, w, &cycle, t_max, a);
        if delta < -ENERGY_TIE_RTOL
            && best.as_ref().is_none_or(|(bd, ..)| delta < *bd)
        {
            best = Some((delta, f, cycle, t_max));
        }
    }
    if let Some((_, _, cycle, t)) = best {
        apply_cycle(w, &cycle, t);
        true
    } else {
        false
    }
}

/// Routes terminal masses along random simple paths until every source is
/// drained. Returns `None` when a greedy dead end is reached.
fn random_routing_start(
    graph: &EmbeddedGraph,
    rng: &mut ChaCha8Rng,
) -> Option<FlowVector> {
    let n = graph.n_vertices();
    let edges = graph.edges();
    let tol = graph.kirchhoff_tolerance();
    let mut out: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (j, e) in edges.iter().enumerate() {
        out[e.tail].push((j, e.head));
    }
    let mut supply: Vec<f64> = graph.divergence().to_vec();
    let mut w = vec![0.0; edges.len()];
    let max_paths = 4 * n + 16;
    for _ in 0..max_paths {
        let Some(s) = (0..n).filter(|&v| supply[v] > tol).choose(rng) else {
            return Some(w); // all supply routed
        };
        // Random depth-first walk from s until some needy sink is reached.
        let mut visited = vec![false; n];
        visited[s] = true;
        let mut stack: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
        let mut order = out[s].clone();
        order.shuffle(rng);
        stack.push((s, order));
        let mut path_edges: Vec<usize> = Vec::new();
        let mut reached: Option<usize> = None;
        while let Some((v, order)) = stack.last_mut() {
            if supply[*v] < -tol && *v != s {
                reached = Some(*v);
                break;
            }
            if let Some((j, u)) = order.pop() {
                if !visited[u] {
                    visited[u] = true;
                    path_edges.push(j);
                    let mut next = out[u].clone();
                    next.shuffle(rng);
                    stack.push((u, next));
                }
            } else {
                stack.pop();
                path_edges.pop();
            }
        }
        let t = reached?;
        let amount = supply[s].min(-supply[t]);
        for &j in &path_edges {
            w[j] += amount;
        }
        supply[s] -= amount;
        supply[t] += amount;
    }
    supply.iter().all(|&x| x.abs() <= tol).then_some(w)
}

/// Multi-start local minimization of the energy.
///
/// Each restart builds an admissible flow (restart 0 reuses the max-flow
/// routing; later restarts route along random paths), reduces it to a
/// forest support and pivots to a local optimum. The best local optimum
/// under the (energy, lexicographic support) order is returned after a
/// final cycle sweep. The result is deterministic in the configuration.
pub fn local_search(graph: &EmbeddedGraph, config: &SolveConfig) -> Result<Solution, SolveError> {
    let mut pool = local_search_pool(graph, config)?;
    Ok(pool.remove(0))
}

/// All distinct local optima discovered by [`local_search`], best first.
pub fn local_search_pool(
    graph: &EmbeddedGraph,
    config: &SolveConfig,
) -> Result<Vec<Solution>, SolveError> {
    assert!(config.restarts >= 1, "at least one restart is required");
    let (report, maxflow_start) = feasibility_with_flow(graph);
    if !report.feasible {
        return Err(SolveError::Infeasible { witness: report.witness });
    }
    let maxflow_start = maxflow_start.expect("feasible graphs yield a flow");

    let alpha = config.alpha;
    let mut optima: Vec<(f64, Vec<usize>, FlowVector)> = Vec::new();
    let mut pivot_moves: u64 = 0;
    for restart in 0..config.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(restart as u64));
        let mut w = if restart == 0 {
            maxflow_start.clone()
        } else {
            random_routing_start(graph, &mut rng).unwrap_or_else(|| maxflow_start.clone())
        };
        reduce_to_forest(graph, &mut w, alpha);
        for _ in 0..config.max_pivots_per_restart {
            if !pivot_improve(graph, &mut w, alpha) {
                break;
            }
            pivot_moves += 1;
            reduce_to_forest(graph, &mut w, alpha);
        }
        debug_assert!(graph.is_admissible(&w)?);
        let energy = graph.energy(&w, alpha)?;
        let support = graph.support(&w);
        if !optima.iter().any(|(e, s, _)| energies_tied(*e, energy) && *s == support) {
            optima.push((energy, support, w));
        }
    }
    optima.sort_by(|(ea, sa, _), (eb, sb, _)| {
        if energies_tied(*ea, *eb) {
            sa.cmp(sb)
        } else {
            ea.partial_cmp(eb).expect("energies are finite")
        }
    });
    let distinct = optima.len();
    Ok(optima
        .into_iter()
        .map(|(_, _, mut flow)| {
            // Final safety sweep: outputs are certified cycle-free.
            let (clean, _) = graph
                .remove_cycles(&flow, alpha)
                .expect("flow length matches");
            flow = clean;
            let energy = graph.energy(&flow, alpha).expect("flow length matches");
            let support = graph.support(&flow);
            Solution {
                flow,
                energy,
                support,
                alpha: alpha.get(),
                certificate: Certificate::LocalOptimum {
                    restarts: config.restarts,
                    pivot_moves,
                    distinct_optima: distinct,
                },
            }
        })
        .collect())
}
