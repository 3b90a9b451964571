//! Shared test fixtures: small candidate libraries with known optima and a
//! generator for random feasible instances.
//!
//! Available to integration tests and downstream crates through the
//! `test-util` feature.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::geometry::Point;
use crate::graph_core::EmbeddedGraph;

/// Two unit-mass terminals joined by one edge of coefficient `beta`.
pub fn two_node(beta: f64, mass: f64) -> EmbeddedGraph {
    EmbeddedGraph::with_straight_edges(
        vec![Point::new(0.0, 0.0, 0.0), Point::new(1.0, 0.0, 0.0)],
        &[(0, 1)],
        &[beta],
        vec![mass, -mass],
    )
    .expect("two-node fixture is valid")
}

/// Two half-mass sources that can either ship directly to the sink (the "V")
/// or merge at a hub first (the "Y").
///
/// Vertices: `0 = (0, 1)`, `1 = (0, -1)` (sources, mass `1/2` each),
/// `2 = (1, 0)` (hub), `3 = (2, 0)` (sink, mass `1`). Edges `0..=4`:
/// `0->2`, `1->2`, `2->3`, `0->3`, `1->3` with coefficients equal to their
/// Euclidean lengths (`sqrt 2`, `sqrt 2`, `1`, `sqrt 5`, `sqrt 5`).
///
/// The merged tree costs `2 sqrt(2) 2^-alpha + 1` and the direct pair costs
/// `2 sqrt(5) 2^-alpha`; the merge wins for small `alpha` (aggregation pays)
/// and loses near `alpha = 1`.
pub fn y_versus_v() -> EmbeddedGraph {
    let sqrt2 = 2f64.sqrt();
    let sqrt5 = 5f64.sqrt();
    EmbeddedGraph::with_straight_edges(
        vec![
            Point::new(0.0, 1.0, 0.0),
            Point::new(0.0, -1.0, 0.0),
            Point::new(1.0, 0.0, 0.0),
            Point::new(2.0, 0.0, 0.0),
        ],
        &[(0, 2), (1, 2), (2, 3), (0, 3), (1, 3)],
        &[sqrt2, sqrt2, 1.0, sqrt5, sqrt5],
        vec![0.5, 0.5, 0.0, -1.0],
    )
    .expect("y-versus-v fixture is valid")
}

/// Edge indices of the merged-tree and direct supports of [`y_versus_v`].
pub const Y_SUPPORT: [usize; 3] = [0, 1, 2];
pub const V_SUPPORT: [usize; 2] = [3, 4];

/// Unit source and sink joined by two internally disjoint two-hop routes of
/// equal total coefficient `2`, plus a direct edge of coefficient `2.5`.
/// Splitting mass across the routes is never optimal for concave energies,
/// so both extreme routes tie at energy `2` and the direct edge loses.
pub fn diamond() -> EmbeddedGraph {
    EmbeddedGraph::with_straight_edges(
        vec![
            Point::new(0.0, 0.0, 0.0),
            Point::new(1.0, 1.0, 0.0),
            Point::new(1.0, -1.0, 0.0),
            Point::new(2.0, 0.0, 0.0),
        ],
        &[(0, 1), (1, 3), (0, 2), (2, 3), (0, 3)],
        &[1.0, 1.0, 1.0, 1.0, 2.5],
        vec![1.0, 0.0, 0.0, -1.0],
    )
    .expect("diamond fixture is valid")
}

/// Two routes with identical energy at every exponent: a deliberate tie used
/// to exercise deterministic tie-breaking (the lexicographically smaller
/// support, edges `{0, 1}`, must win).
pub fn tied_pair() -> EmbeddedGraph {
    EmbeddedGraph::with_straight_edges(
        vec![
            Point::new(0.0, 0.0, 0.0),
            Point::new(1.0, 1.0, 0.0),
            Point::new(1.0, -1.0, 0.0),
            Point::new(2.0, 0.0, 0.0),
        ],
        &[(0, 1), (1, 3), (0, 2), (2, 3)],
        &[1.0, 1.0, 1.0, 1.0],
        vec![1.0, 0.0, 0.0, -1.0],
    )
    .expect("tied fixture is valid")
}

/// Random connected library with a feasible divergence.
///
/// Vertices are scattered in the unit square; a random spanning tree plus
/// `extra_edges` chords give the candidate set, and the divergence is
/// manufactured as `b = A w0` from a random nonnegative flow `w0`, so at
/// least one admissible flow always exists. Terminal count and masses vary
/// with the seed.
pub fn random_library(seed: u64, n_vertices: usize, extra_edges: usize) -> EmbeddedGraph {
    assert!(n_vertices >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<Point> = (0..n_vertices)
        .map(|_| Point::new(rng.gen::<f64>(), rng.gen::<f64>(), 0.0))
        .collect();

    // Random spanning tree: attach each vertex to an earlier one.
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for v in 1..n_vertices {
        let u = rng.gen_range(0..v);
        if rng.gen_bool(0.5) {
            pairs.push((u, v));
        } else {
            pairs.push((v, u));
        }
    }
    let mut attempts = 0;
    while pairs.len() < n_vertices - 1 + extra_edges && attempts < 100 * (extra_edges + 1) {
        attempts += 1;
        let u = rng.gen_range(0..n_vertices);
        let v = rng.gen_range(0..n_vertices);
        if u != v && !pairs.contains(&(u, v)) {
            pairs.push((u, v));
        }
    }

    let betas: Vec<f64> = pairs
        .iter()
        .map(|&(u, v)| (positions[u] - positions[v]).norm().max(1e-3) * rng.gen_range(0.5..1.5))
        .collect();

    // Feasibility by construction: push random flow through a few edges and
    // read the divergence off the incidence map.
    let mut divergence = vec![0.0; n_vertices];
    for &(u, v) in &pairs {
        if rng.gen_bool(0.6) {
            let w = rng.gen_range(0.0..2.0);
            divergence[u] += w;
            divergence[v] -= w;
        }
    }
    // Clear float dust so the total balances exactly.
    let imbalance: f64 = divergence.iter().sum();
    divergence[0] -= imbalance;

    EmbeddedGraph::with_straight_edges(positions, &pairs, &betas, divergence)
        .expect("random library construction is valid")
}

/// Reference linear-cost routing (successive shortest augmenting paths with
/// Bellman-Ford distances), used to cross-check the concave solver as its
/// exponent approaches one. Returns the flow and its linear cost
/// `sum_e beta_e w_e`. Panics when the instance is infeasible.
pub fn min_cost_flow_reference(graph: &EmbeddedGraph) -> (Vec<f64>, f64) {
    let n = graph.n_vertices();
    let b = graph.divergence();
    let supply: f64 = b.iter().filter(|&&x| x > 0.0).sum();
    let n_nodes = n + 2;
    let (source, sink) = (n, n + 1);

    // Residual arcs in twin pairs: forward even, backward odd.
    let mut to: Vec<usize> = Vec::new();
    let mut cap: Vec<f64> = Vec::new();
    let mut cost: Vec<f64> = Vec::new();
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    let add_arc = |u: usize, v: usize, c: f64, price: f64,
                       to: &mut Vec<usize>,
                       cap: &mut Vec<f64>,
                       cost: &mut Vec<f64>,
                       out: &mut Vec<Vec<usize>>| {
        let id = to.len();
        to.push(v);
        cap.push(c);
        cost.push(price);
        out[u].push(id);
        to.push(u);
        cap.push(0.0);
        cost.push(-price);
        out[v].push(id + 1);
        id
    };
    for (v, &bv) in b.iter().enumerate() {
        if bv > 0.0 {
            add_arc(source, v, bv, 0.0, &mut to, &mut cap, &mut cost, &mut out);
        } else if bv < 0.0 {
            add_arc(v, sink, -bv, 0.0, &mut to, &mut cap, &mut cost, &mut out);
        }
    }
    let inner: Vec<usize> = graph
        .edges()
        .iter()
        .map(|e| add_arc(e.tail, e.head, supply, e.beta, &mut to, &mut cap, &mut cost, &mut out))
        .collect();

    let mut routed = 0.0;
    loop {
        // Bellman-Ford from the super source over positive-residual arcs.
        let mut dist = vec![f64::INFINITY; n_nodes];
        let mut pred: Vec<Option<usize>> = vec![None; n_nodes];
        dist[source] = 0.0;
        for _ in 0..n_nodes {
            let mut changed = false;
            for u in 0..n_nodes {
                if !dist[u].is_finite() {
                    continue;
                }
                for &e in &out[u] {
                    if cap[e] > 0.0 && dist[u] + cost[e] < dist[to[e]] - 1e-15 {
                        dist[to[e]] = dist[u] + cost[e];
                        pred[to[e]] = Some(e);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if !dist[sink].is_finite() {
            break;
        }
        let mut bottleneck = f64::INFINITY;
        let mut v = sink;
        while v != source {
            let e = pred[v].expect("path reaches the source");
            bottleneck = bottleneck.min(cap[e]);
            v = to[e ^ 1];
        }
        let mut v = sink;
        while v != source {
            let e = pred[v].expect("path reaches the source");
            cap[e] -= bottleneck;
            if cap[e] < f64::MIN_POSITIVE {
                cap[e] = 0.0;
            }
            cap[e ^ 1] += bottleneck;
            v = to[e ^ 1];
        }
        routed += bottleneck;
    }
    assert!(
        routed >= supply - 1e-9 * supply.max(1.0),
        "reference routing expects feasible instances"
    );
    let flow: Vec<f64> = inner.iter().map(|&e| cap[e ^ 1]).collect();
    let total_cost = graph
        .edges()
        .iter()
        .zip(&flow)
        .map(|(e, w)| e.beta * w)
        .sum();
    (flow, total_cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_core::Exponent;
    use approx::assert_abs_diff_eq;

    #[test]
    fn y_fixture_energies_match_closed_forms() {
        let g = y_versus_v();
        let alpha = Exponent::new(0.5).unwrap();
        let y_flow = vec![0.5, 0.5, 1.0, 0.0, 0.0];
        let v_flow = vec![0.0, 0.0, 0.0, 0.5, 0.5];
        assert!(g.is_admissible(&y_flow).unwrap());
        assert!(g.is_admissible(&v_flow).unwrap());
        // 2 sqrt(2) / sqrt(2) + 1 = 3 exactly.
        assert_abs_diff_eq!(g.energy(&y_flow, alpha).unwrap(), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            g.energy(&v_flow, alpha).unwrap(),
            2.0 * 5f64.sqrt() * 0.5f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn random_libraries_are_feasible_by_construction() {
        for seed in 0..20 {
            let g = random_library(seed, 8, 5);
            let total: f64 = g.divergence().iter().sum();
            assert!(total.abs() <= 1e-9);
        }
    }
}
