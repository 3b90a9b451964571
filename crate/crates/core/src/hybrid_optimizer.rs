//! Joint geometric-dynamic optimization over the admissible library.
//!
//! The hybrid objective adds a steering penalty to the concave transport
//! energy: for a weighting `lambda >= 0`,
//!
//! ```text
//! F_lambda(w) = E_alpha(w) + lambda * J_dyn(w)
//! ```
//!
//! where `J_dyn` is the Gaussian bridge cost of the dynamics induced by the
//! flow. The dynamic term is treated as a black box: candidates come from
//! forest enumeration (or local-search optima when the library is too big),
//! each is scored in parallel, and a pivot descent then walks the full
//! objective between adjacent forests. No derivatives of `J_dyn` are used.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rayon::prelude::*;
use thiserror::Error;

use crate::bot_solver::{
    adjacent_forest_flows, local_search_pool, oracle_pool, SolveConfig, SolveError,
};
use crate::gaussian_bridge::{
    dynamic_cost, BridgeError, BridgeOptions, GaussianMarginalPair, Stimulus,
};
use crate::graph_core::{EmbeddedGraph, FlowVector, GraphError};
use crate::graph_dynamics::DynamicsParams;

/// Default number of low-energy candidates scored dynamically.
pub const DEFAULT_CANDIDATE_POOL: usize = 16;

/// Weights are quantized at this resolution for the evaluation cache.
pub const WEIGHT_QUANTUM: f64 = 1e-9;

/// Relative tolerance under which two objective values count as tied.
const TOTAL_TIE_RTOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum HybridError {
    #[error("invalid hybrid configuration: {0}")]
    InvalidConfig(String),
    #[error("the flow is not admissible for the library")]
    NotAdmissible,
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Everything a hybrid solve needs besides the library itself.
#[derive(Debug, Clone)]
pub struct HybridConfig {
    /// Weight of the dynamic term; zero recovers the geometric problem.
    pub lambda: f64,
    /// Geometric solver settings (exponent, seed, restarts).
    pub solve: SolveConfig,
    /// Parameters of the induced dynamics.
    pub dynamics: DynamicsParams,
    /// Endpoint marginals, held fixed across candidates.
    pub marginals: GaussianMarginalPair,
    /// Optional exogenous drift, also held fixed across candidates.
    pub stimulus: Option<Stimulus>,
    /// Bridge discretization and descent settings.
    pub bridge: BridgeOptions,
    /// How many low-energy candidates are scored dynamically.
    pub candidate_pool: usize,
}

impl HybridConfig {
    pub fn new(
        lambda: f64,
        solve: SolveConfig,
        dynamics: DynamicsParams,
        marginals: GaussianMarginalPair,
    ) -> Result<Self, HybridError> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(HybridError::InvalidConfig(format!(
                "lambda must be a nonnegative real, got {lambda}"
            )));
        }
        Ok(Self {
            lambda,
            solve,
            dynamics,
            marginals,
            stimulus: None,
            bridge: BridgeOptions::default(),
            candidate_pool: DEFAULT_CANDIDATE_POOL,
        })
    }
}

/// Components of the hybrid objective at one flow.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridObjective {
    pub geometric: f64,
    pub dynamic: f64,
    /// `geometric + lambda * dynamic`.
    pub total: f64,
}

/// One scored candidate; on a forest support the flow is determined by the
/// support, so the support identifies the candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub support: Vec<usize>,
    pub geometric: f64,
    pub dynamic: f64,
    pub total: f64,
}

/// Best candidate found together with the full evaluation trace.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridSolution {
    pub flow: FlowVector,
    pub support: Vec<usize>,
    pub geometric_cost: f64,
    pub dynamic_cost_value: f64,
    pub total: f64,
    /// Every distinct candidate evaluated, in discovery order; the returned
    /// solution dominates all of them.
    pub pool_trace: Vec<PoolEntry>,
    pub pivot_moves: u64,
    pub cache_hits: u64,
}

/// Evaluates both objective components on an admissible flow.
pub fn hybrid_objective(
    graph: &EmbeddedGraph,
    flow: &[f64],
    config: &HybridConfig,
) -> Result<HybridObjective, HybridError> {
    if !graph.is_admissible(flow)? {
        return Err(HybridError::NotAdmissible);
    }
    let geometric = graph.energy(flow, config.solve.alpha)?;
    let bridge = dynamic_cost(
        graph,
        flow,
        &config.dynamics,
        &config.marginals,
        config.stimulus.as_ref(),
        &config.bridge,
    )?;
    let dynamic = bridge.total_cost;
    Ok(HybridObjective { geometric, dynamic, total: geometric + config.lambda * dynamic })
}

/// Concurrent memo of dynamic costs keyed by quantized weights. Identical
/// keys always carry identical values, so last-writer-wins inserts are safe.
struct DynamicCostCache {
    map: Mutex<HashMap<Vec<i64>, f64>>,
    hits: AtomicU64,
}

impl DynamicCostCache {
    fn new() -> Self {
        Self { map: Mutex::new(HashMap::new()), hits: AtomicU64::new(0) }
    }

    fn key(flow: &[f64]) -> Vec<i64> {
        flow.iter().map(|w| (w / WEIGHT_QUANTUM).round() as i64).collect()
    }

    fn get(&self, key: &[i64]) -> Option<f64> {
        let found = self.map.lock().expect("cache lock").get(key).copied();
        if found.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        found
    }

    fn insert(&self, key: Vec<i64>, value: f64) {
        self.map.lock().expect("cache lock").insert(key, value);
    }
}

/// Scores one candidate, memoizing the dynamic term.
fn score(
    graph: &EmbeddedGraph,
    flow: &FlowVector,
    config: &HybridConfig,
    cache: &DynamicCostCache,
) -> Result<PoolEntry, HybridError> {
    let geometric = graph.energy(flow, config.solve.alpha)?;
    let key = DynamicCostCache::key(flow);
    let dynamic = match cache.get(&key) {
        Some(v) => v,
        None => {
            let v = dynamic_cost(
                graph,
                flow,
                &config.dynamics,
                &config.marginals,
                config.stimulus.as_ref(),
                &config.bridge,
            )?
            .total_cost;
            cache.insert(key, v);
            v
        }
    };
    Ok(PoolEntry {
        support: graph.support(flow),
        geometric,
        dynamic,
        total: geometric + config.lambda * dynamic,
    })
}

/// `candidate` strictly precedes `incumbent` under (total, support) order,
/// with ties at relative tolerance resolving lexicographically.
fn entry_improves(candidate: &PoolEntry, incumbent: &PoolEntry) -> bool {
    let scale = candidate.total.abs().max(incumbent.total.abs()).max(1.0);
    if (candidate.total - incumbent.total).abs() <= TOTAL_TIE_RTOL * scale {
        candidate.support < incumbent.support
    } else {
        candidate.total < incumbent.total
    }
}

/// Minimizes the hybrid objective over the library.
///
/// The candidate pool holds every forest-support solution when the library
/// is small enough to enumerate, otherwise the distinct optima found by the
/// multi-start geometric search. All candidates are scored in parallel;
/// a best-improvement pivot descent on the full objective then runs from
/// the best pool member. The returned solution dominates every entry in its
/// own trace.
pub fn hybrid_solve(
    graph: &EmbeddedGraph,
    config: &HybridConfig,
) -> Result<HybridSolution, HybridError> {
    if config.candidate_pool < 1 {
        return Err(HybridError::InvalidConfig(
            "candidate_pool must be at least 1".to_string(),
        ));
    }
    if !config.lambda.is_finite() || config.lambda < 0.0 {
        return Err(HybridError::InvalidConfig(format!(
            "lambda must be a nonnegative real, got {}",
            config.lambda
        )));
    }
    let pool = match oracle_pool(graph, config.solve.alpha, config.candidate_pool) {
        Ok(pool) => pool,
        Err(SolveError::TooLarge { .. }) => {
            let mut pool = local_search_pool(graph, &config.solve)?;
            pool.truncate(config.candidate_pool);
            pool
        }
        Err(e) => return Err(e.into()),
    };

    let cache = DynamicCostCache::new();
    let scored: Vec<Result<(FlowVector, PoolEntry), HybridError>> = pool
        .par_iter()
        .map(|sol| Ok((sol.flow.clone(), score(graph, &sol.flow, config, &cache)?)))
        .collect();

    let mut trace: Vec<PoolEntry> = Vec::new();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut best: Option<(FlowVector, PoolEntry)> = None;
    for result in scored {
        let (flow, entry) = result?;
        if seen.insert(entry.support.clone()) {
            trace.push(entry.clone());
        }
        if best.as_ref().is_none_or(|(_, b)| entry_improves(&entry, b)) {
            best = Some((flow, entry));
        }
    }
    let (mut flow, mut current) = best.expect("pool holds at least one solution");

    // Pivot descent on the full objective from the best pool member.
    let mut pivot_moves = 0u64;
    for _ in 0..config.solve.max_pivots_per_restart {
        let neighbors = adjacent_forest_flows(graph, &flow);
        if neighbors.is_empty() {
            break;
        }
        let scored: Vec<Result<(FlowVector, PoolEntry), HybridError>> = neighbors
            .into_par_iter()
            .map(|w| {
                let entry = score(graph, &w, config, &cache)?;
                Ok((w, entry))
            })
            .collect();
        let mut step_best: Option<(FlowVector, PoolEntry)> = None;
        for result in scored {
            let (w, entry) = result?;
            if seen.insert(entry.support.clone()) {
                trace.push(entry.clone());
            }
            if step_best.as_ref().is_none_or(|(_, b)| entry_improves(&entry, b)) {
                step_best = Some((w, entry));
            }
        }
        match step_best {
            Some((w, entry)) if entry_improves(&entry, &current) => {
                flow = w;
                current = entry;
                pivot_moves += 1;
            }
            _ => break,
        }
    }

    Ok(HybridSolution {
        flow,
        support: current.support,
        geometric_cost: current.geometric,
        dynamic_cost_value: current.dynamic,
        total: current.total,
        pool_trace: trace,
        pivot_moves,
        cache_hits: cache.hits.load(Ordering::Relaxed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bot_solver::oracle_solve;
    use crate::fixtures;
    use crate::gaussian_bridge::{discretize, GaussianState};
    use crate::graph_core::Exponent;
    use crate::graph_dynamics::canonical_dynamics;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    fn identity_marginals(n: usize, horizon: f64) -> GaussianMarginalPair {
        GaussianMarginalPair::new(
            GaussianState::new(DVector::zeros(n), DMatrix::identity(n, n)).unwrap(),
            GaussianState::new(DVector::zeros(n), DMatrix::identity(n, n)).unwrap(),
            horizon,
        )
        .unwrap()
    }

    fn quick_config(lambda: f64, n: usize, alpha: f64) -> HybridConfig {
        let mut cfg = HybridConfig::new(
            lambda,
            SolveConfig::new(Exponent::new(alpha).unwrap(), 7),
            DynamicsParams::new(1.0, 0.5, 0.6, 0.3).unwrap(),
            identity_marginals(n, 1.0),
        )
        .unwrap();
        cfg.bridge.n_steps = 40;
        cfg
    }

    #[test]
    fn lambda_zero_reproduces_the_geometric_minimizer() {
        for graph in [fixtures::y_versus_v(), fixtures::diamond()] {
            let cfg = quick_config(0.0, graph.n_vertices(), 0.5);
            let hybrid = hybrid_solve(&graph, &cfg).unwrap();
            let geometric = oracle_solve(&graph, cfg.solve.alpha).unwrap();
            assert_eq!(hybrid.support, geometric.support);
            assert_abs_diff_eq!(hybrid.total, geometric.energy, epsilon = 1e-9);
            assert_abs_diff_eq!(hybrid.geometric_cost, geometric.energy, epsilon = 1e-12);
        }
    }

    #[test]
    fn objective_is_affine_and_nondecreasing_in_lambda() {
        let graph = fixtures::two_node(1.0, 2.0);
        let flow = vec![2.0];
        let at = |lambda: f64| {
            let cfg = quick_config(lambda, 2, 0.5);
            hybrid_objective(&graph, &flow, &cfg).unwrap()
        };
        let (o0, o1, o2) = (at(0.0), at(1.0), at(2.0));
        assert_abs_diff_eq!(o0.total, o0.geometric, epsilon = 0.0);
        assert!(o1.dynamic >= 0.0);
        assert_abs_diff_eq!(o0.geometric, o1.geometric, epsilon = 0.0);
        assert_abs_diff_eq!(o0.dynamic, o1.dynamic, epsilon = 0.0);
        // Affine: equal increments in lambda give equal increments in total.
        assert_abs_diff_eq!(o2.total - o1.total, o1.total - o0.total, epsilon = 1e-12);
        assert!(o2.total >= o1.total && o1.total >= o0.total);
    }

    #[test]
    fn pushforward_marginals_zero_the_dynamic_term() {
        let graph = fixtures::two_node(1.0, 2.0);
        let flow = vec![2.0];
        let params = DynamicsParams::new(1.0, 1.0, 0.5, 0.25).unwrap();
        let matrices = canonical_dynamics(&graph, &flow, &params).unwrap();
        let horizon = 1.0;
        let n_steps = 40;
        let sys = discretize(&matrices.drift, &matrices.noise, horizon, n_steps, None).unwrap();

        // Push the initial marginal through the uncontrolled dynamics.
        let m0 = DVector::from_column_slice(&[0.4, -0.2]);
        let s0 = DMatrix::identity(2, 2);
        let mut m = m0.clone();
        let mut s = s0.clone();
        for _ in 0..n_steps {
            m = &sys.a_d * m;
            s = &sys.a_d * s * sys.a_d.transpose() + &sys.q_d;
        }
        let marginals = GaussianMarginalPair::new(
            GaussianState::new(m0, s0).unwrap(),
            GaussianState::new(m, s).unwrap(),
            horizon,
        )
        .unwrap();

        let mut cfg = HybridConfig::new(
            3.0,
            SolveConfig::new(Exponent::new(0.5).unwrap(), 7),
            params,
            marginals,
        )
        .unwrap();
        cfg.bridge.n_steps = n_steps;
        let objective = hybrid_objective(&graph, &flow, &cfg).unwrap();
        assert!(objective.dynamic <= 1e-6, "dynamic cost {}", objective.dynamic);
        assert_abs_diff_eq!(objective.total, objective.geometric, epsilon = 3e-6);
    }

    #[test]
    fn rejects_inadmissible_flows_and_bad_config() {
        let graph = fixtures::two_node(1.0, 2.0);
        let cfg = quick_config(1.0, 2, 0.5);
        assert!(matches!(
            hybrid_objective(&graph, &[1.0], &cfg),
            Err(HybridError::NotAdmissible)
        ));
        assert!(matches!(
            HybridConfig::new(
                -0.5,
                cfg.solve.clone(),
                cfg.dynamics.clone(),
                cfg.marginals.clone()
            ),
            Err(HybridError::InvalidConfig(_))
        ));
        let mut bad = quick_config(1.0, 2, 0.5);
        bad.candidate_pool = 0;
        assert!(matches!(hybrid_solve(&graph, &bad), Err(HybridError::InvalidConfig(_))));
    }

    /// Marginals that ask vertex 2 of the tied fixture to move: the route
    /// through vertex 2 couples it to the network (extra noise and paths),
    /// making the move cheaper than on the route that leaves it isolated.
    fn vertex2_marginals() -> GaussianMarginalPair {
        let mut target = DVector::zeros(4);
        target[2] = 1.0;
        GaussianMarginalPair::new(
            GaussianState::new(DVector::zeros(4), DMatrix::identity(4, 4)).unwrap(),
            GaussianState::new(target, DMatrix::identity(4, 4)).unwrap(),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn positive_lambda_switches_the_geometric_tie() {
        let graph = fixtures::tied_pair();
        let make = |lambda: f64| {
            let mut cfg = HybridConfig::new(
                lambda,
                SolveConfig::new(Exponent::new(0.5).unwrap(), 7),
                DynamicsParams::new(1.0, 0.8, 0.4, 0.6).unwrap(),
                vertex2_marginals(),
            )
            .unwrap();
            cfg.bridge.n_steps = 40;
            cfg
        };

        // Fixture sanity: the two candidates tie geometrically but differ
        // dynamically, with the lexicographic loser dynamically cheaper.
        let cfg1 = make(1.0);
        let via_1 = hybrid_objective(&graph, &[1.0, 1.0, 0.0, 0.0], &cfg1).unwrap();
        let via_2 = hybrid_objective(&graph, &[0.0, 0.0, 1.0, 1.0], &cfg1).unwrap();
        assert_abs_diff_eq!(via_1.geometric, via_2.geometric, epsilon = 1e-12);
        assert!(
            via_2.dynamic < via_1.dynamic,
            "route through vertex 2 should steer it cheaper: {} vs {}",
            via_2.dynamic,
            via_1.dynamic
        );

        // At lambda = 0 the geometric tie-break picks {0, 1}; any positive
        // lambda flips the choice to the dynamically cheaper {2, 3}.
        let at_zero = hybrid_solve(&graph, &make(0.0)).unwrap();
        assert_eq!(at_zero.support, vec![0, 1]);
        for lambda in [0.25, 1.0, 4.0] {
            let solved = hybrid_solve(&graph, &make(lambda)).unwrap();
            assert_eq!(solved.support, vec![2, 3], "lambda = {lambda}");
        }
    }

    #[test]
    fn value_envelope_is_concave_and_nondecreasing() {
        let graph = fixtures::y_versus_v();
        let grid = [0.0, 0.5, 1.0, 2.0];
        let values: Vec<f64> = grid
            .iter()
            .map(|&lambda| {
                let cfg = quick_config(lambda, 4, 0.5);
                hybrid_solve(&graph, &cfg).unwrap().total
            })
            .collect();
        for pair in values.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "envelope must be non-decreasing");
        }
        let slopes: Vec<f64> = values
            .windows(2)
            .zip(grid.windows(2))
            .map(|(v, l)| (v[1] - v[0]) / (l[1] - l[0]))
            .collect();
        for pair in slopes.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "envelope must be concave");
        }
    }

    #[test]
    fn solution_dominates_its_trace_and_reuses_the_cache() {
        let graph = fixtures::diamond();
        let cfg = quick_config(0.7, 4, 0.5);
        let solved = hybrid_solve(&graph, &cfg).unwrap();
        assert!(solved.pool_trace.len() >= 2);
        for entry in &solved.pool_trace {
            assert!(
                solved.total <= entry.total + 1e-12,
                "solution {} beaten by trace entry {}",
                solved.total,
                entry.total
            );
            assert_abs_diff_eq!(
                entry.total,
                entry.geometric + cfg.lambda * entry.dynamic,
                epsilon = 1e-9
            );
        }
        // The pivot neighborhood of the diamond's best support includes the
        // direct edge, which the pool already scored: the memo must fire.
        assert!(solved.cache_hits >= 1);
    }

    #[test]
    fn solving_is_deterministic() {
        let graph = fixtures::y_versus_v();
        let cfg = quick_config(0.9, 4, 0.5);
        let a = hybrid_solve(&graph, &cfg).unwrap();
        let b = hybrid_solve(&graph, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
