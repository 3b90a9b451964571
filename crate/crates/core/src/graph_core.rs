//! Embedded candidate graphs, transport energies and flow admissibility.
//!
//! A library graph carries vertex embeddings, directed edges with embedded
//! polyline geometry and positive traversal coefficients, and a prescribed
//! vertex divergence. Flows live on edges; admissible flows are nonnegative
//! and satisfy the Kirchhoff balance `A w = b` up to a scaled tolerance.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::cost_field::Polyline;
use crate::geometry::Point;

/// Edge weights below this threshold are treated as absent from the support.
pub const SUPPORT_EPS: f64 = 1e-12;

/// Relative slack allowed in the total divergence (sum of `b`).
pub const DIVERGENCE_RTOL: f64 = 1e-10;

/// Base tolerance for the Kirchhoff residual, scaled by `max(1, |b|_inf)`.
pub const KIRCHHOFF_TOL: f64 = 1e-9;

/// How closely an edge polyline must meet its endpoint embeddings.
pub const ENDPOINT_TOL: f64 = 1e-9;

/// Edge flow values, indexed like [`EmbeddedGraph::edges`].
pub type FlowVector = Vec<f64>;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge {edge} references vertex {index} but the graph has {n_vertices} vertices")]
    VertexOutOfRange { edge: usize, index: usize, n_vertices: usize },
    #[error("edge {edge} is a self-loop on vertex {vertex}")]
    SelfLoop { edge: usize, vertex: usize },
    #[error("edge {edge} has non-positive coefficient {beta}")]
    NonPositiveCoefficient { edge: usize, beta: f64 },
    #[error("edge {edge} geometry misses its vertex embedding by {distance}")]
    EndpointMismatch { edge: usize, distance: f64 },
    #[error("divergence entries sum to {imbalance}, which exceeds the balance tolerance")]
    UnbalancedDivergence { imbalance: f64 },
    #[error("expected {expected} divergence entries, got {got}")]
    DivergenceLength { expected: usize, got: usize },
    #[error("expected {expected} flow entries, got {got}")]
    FlowLength { expected: usize, got: usize },
    #[error("diminishing-returns exponent must lie strictly between 0 and 1, got {alpha}")]
    InvalidExponent { alpha: f64 },
}

/// Concavity exponent of the transport energy, restricted to `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exponent(f64);

impl Exponent {
    pub fn new(alpha: f64) -> Result<Self, GraphError> {
        if alpha.is_finite() && 0.0 < alpha && alpha < 1.0 {
            Ok(Self(alpha))
        } else {
            Err(GraphError::InvalidExponent { alpha })
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Directed edge with embedded geometry and traversal coefficient.
#[derive(Debug, Clone)]
pub struct Edge {
    /// Tail vertex `e^-` (flow leaves here when `w_e > 0`).
    pub tail: usize,
    /// Head vertex `e^+` (flow arrives here).
    pub head: usize,
    /// Embedded polyline from the tail to the head embedding.
    pub path: Polyline,
    /// Positive traversal coefficient (anisotropic length).
    pub beta: f64,
}

/// Candidate library: embedded vertices, directed candidate edges and the
/// prescribed divergence `b` (positive at sources, negative at sinks).
#[derive(Debug, Clone)]
pub struct EmbeddedGraph {
    positions: Vec<Point>,
    edges: Vec<Edge>,
    divergence: Vec<f64>,
}

impl EmbeddedGraph {
    pub fn new(
        positions: Vec<Point>,
        edges: Vec<Edge>,
        divergence: Vec<f64>,
    ) -> Result<Self, GraphError> {
        let n = positions.len();
        if divergence.len() != n {
            return Err(GraphError::DivergenceLength { expected: n, got: divergence.len() });
        }
        for (idx, e) in edges.iter().enumerate() {
            for v in [e.tail, e.head] {
                if v >= n {
                    return Err(GraphError::VertexOutOfRange {
                        edge: idx,
                        index: v,
                        n_vertices: n,
                    });
                }
            }
            if e.tail == e.head {
                return Err(GraphError::SelfLoop { edge: idx, vertex: e.tail });
            }
            if e.beta <= 0.0 || !e.beta.is_finite() {
                return Err(GraphError::NonPositiveCoefficient { edge: idx, beta: e.beta });
            }
            let d_tail = (e.path.first() - positions[e.tail]).norm();
            let d_head = (e.path.last() - positions[e.head]).norm();
            let distance = d_tail.max(d_head);
            if distance > ENDPOINT_TOL {
                return Err(GraphError::EndpointMismatch { edge: idx, distance });
            }
        }
        let imbalance: f64 = divergence.iter().sum();
        let scale: f64 = divergence.iter().map(|b| b.abs()).sum();
        if imbalance.abs() > DIVERGENCE_RTOL * scale.max(1.0) {
            return Err(GraphError::UnbalancedDivergence { imbalance });
        }
        Ok(Self { positions, edges, divergence })
    }

    /// Builds a graph whose edges are straight segments between embeddings.
    pub fn with_straight_edges(
        positions: Vec<Point>,
        pairs: &[(usize, usize)],
        betas: &[f64],
        divergence: Vec<f64>,
    ) -> Result<Self, GraphError> {
        assert_eq!(pairs.len(), betas.len(), "one coefficient per edge");
        let edges = pairs
            .iter()
            .zip(betas)
            .enumerate()
            .map(|(idx, (&(tail, head), &beta))| {
                let n = positions.len();
                if tail >= n || head >= n {
                    return Err(GraphError::VertexOutOfRange {
                        edge: idx,
                        index: tail.max(head),
                        n_vertices: n,
                    });
                }
                if tail == head {
                    return Err(GraphError::SelfLoop { edge: idx, vertex: tail });
                }
                let path = Polyline::new(vec![positions[tail], positions[head]])
                    .expect("distinct embeddings give a valid segment");
                Ok(Edge { tail, head, path, beta })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(positions, edges, divergence)
    }

    pub fn n_vertices(&self) -> usize {
        self.positions.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn divergence(&self) -> &[f64] {
        &self.divergence
    }

    /// Signed vertex-edge incidence matrix: `+1` at the tail, `-1` at the
    /// head of each edge, so that `(A w)_v` is the net outflow at `v`.
    pub fn incidence_matrix(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_vertices(), self.n_edges());
        for (j, e) in self.edges.iter().enumerate() {
            a[(e.tail, j)] = 1.0;
            a[(e.head, j)] = -1.0;
        }
        a
    }

    /// Kirchhoff residual `A w - b`.
    pub fn kirchhoff_residual(&self, flow: &[f64]) -> Result<DVector<f64>, GraphError> {
        self.check_flow_len(flow)?;
        let mut r = DVector::from_column_slice(&self.divergence);
        r.neg_mut();
        for (j, e) in self.edges.iter().enumerate() {
            r[e.tail] += flow[j];
            r[e.head] -= flow[j];
        }
        Ok(r)
    }

    /// Admissibility tolerance on the residual, scaled to the data.
    pub fn kirchhoff_tolerance(&self) -> f64 {
        let b_inf = self.divergence.iter().fold(0.0f64, |m, b| m.max(b.abs()));
        KIRCHHOFF_TOL * b_inf.max(1.0)
    }

    /// A flow is admissible when it is nonnegative and balances `b`.
    pub fn is_admissible(&self, flow: &[f64]) -> Result<bool, GraphError> {
        let r = self.kirchhoff_residual(flow)?;
        if flow.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Ok(false);
        }
        Ok(r.amax() <= self.kirchhoff_tolerance())
    }

    /// Branched-transport energy `sum_e beta_e w_e^alpha` with `0^alpha = 0`.
    pub fn energy(&self, flow: &[f64], alpha: Exponent) -> Result<f64, GraphError> {
        self.check_flow_len(flow)?;
        let a = alpha.get();
        Ok(self
            .edges
            .iter()
            .zip(flow)
            .map(|(e, &w)| if w > 0.0 { e.beta * w.powf(a) } else { 0.0 })
            .sum())
    }

    /// Edge indices carrying more than [`SUPPORT_EPS`] flow.
    pub fn support(&self, flow: &[f64]) -> Vec<usize> {
        flow.iter()
            .enumerate()
            .filter(|(_, &w)| w > SUPPORT_EPS)
            .map(|(j, _)| j)
            .collect()
    }

    fn check_flow_len(&self, flow: &[f64]) -> Result<(), GraphError> {
        if flow.len() != self.n_edges() {
            return Err(GraphError::FlowLength { expected: self.n_edges(), got: flow.len() });
        }
        Ok(())
    }

    /// Finds one directed cycle in the support of `flow`, as edge indices.
    fn find_support_cycle(&self, flow: &[f64]) -> Option<Vec<usize>> {
        let n = self.n_vertices();
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (j, e) in self.edges.iter().enumerate() {
            if flow[j] > SUPPORT_EPS {
                adjacency[e.tail].push(j);
            }
        }
        // Iterative three-color depth-first search over the support.
        const WHITE: u8 = 0;
        const GRAY: u8 = 1;
        const BLACK: u8 = 2;
        let mut color = vec![WHITE; n];
        let mut entry_edge: Vec<Option<usize>> = vec![None; n];
        for start in 0..n {
            if color[start] != WHITE {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
            color[start] = GRAY;
            while let Some(&mut (v, ref mut next)) = stack.last_mut() {
                if *next < adjacency[v].len() {
                    let j = adjacency[v][*next];
                    *next += 1;
                    let u = self.edges[j].head;
                    match color[u] {
                        WHITE => {
                            color[u] = GRAY;
                            entry_edge[u] = Some(j);
                            stack.push((u, 0));
                        }
                        GRAY => {
                            // Back edge closes a cycle u -> ... -> v -> u.
                            let mut cycle = vec![j];
                            let mut cur = v;
                            while cur != u {
                                let e = entry_edge[cur].expect("gray vertices have entry edges");
                                cycle.push(e);
                                cur = self.edges[e].tail;
                            }
                            cycle.reverse();
                            return Some(cycle);
                        }
                        _ => {}
                    }
                } else {
                    color[v] = BLACK;
                    stack.pop();
                }
            }
        }
        None
    }

    /// Cancels directed cycles in the support by subtracting the minimum
    /// cycle flow until the support is acyclic. The residual `A w - b` is
    /// untouched and the energy never increases; each pass empties at least
    /// one support edge, so at most `|E|` passes run.
    pub fn remove_cycles(&self, flow: &[f64], _alpha: Exponent) -> Result<(FlowVector, usize), GraphError> {
        self.check_flow_len(flow)?;
        let mut w = flow.to_vec();
        let mut cancelled = 0;
        while let Some(cycle) = self.find_support_cycle(&w) {
            let eps = cycle
                .iter()
                .map(|&j| w[j])
                .fold(f64::INFINITY, f64::min);
            for &j in &cycle {
                w[j] -= eps;
                if w[j] <= SUPPORT_EPS {
                    w[j] = 0.0;
                }
            }
            cancelled += 1;
        }
        Ok((w, cancelled))
    }
}
