//! Linear network dynamics induced by a transported flow.
//!
//! A reaction map with edge weights `w` couples regional activity through
//! the symmetrized weight matrix. The canonical model is the
//! Ornstein-Uhlenbeck system
//!
//! ```text
//! dX = (A X + s(t)) dt + C dW,
//! A = -kappa I - beta L,      L = D - S,   S = (W + W')/2,
//! C = sigma0 I + sigma1 D^(1/2),
//! ```
//!
//! with `W_ij` the total flow on edges from `i` to `j` and `D` the diagonal
//! of symmetrized degrees. `L` is positive semidefinite, so all modes decay
//! at least at rate `kappa`, and `C` is uniformly elliptic with smallest
//! eigenvalue at least `sigma0`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::graph_core::{EmbeddedGraph, GraphError};

/// Slack allowed when checking positive semidefiniteness of the Laplacian.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("dynamics parameter {name} = {value} is out of range")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("edge {edge} carries negative flow {value}")]
    NegativeFlow { edge: usize, value: f64 },
    #[error("induced Laplacian has eigenvalue {min_eigenvalue}, below the PSD tolerance")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Coefficients of the canonical dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsParams {
    /// Leak rate; every mode decays at least this fast. Must be positive.
    pub kappa: f64,
    /// Diffusive coupling strength along the inferred map. Nonnegative.
    pub beta: f64,
    /// Baseline noise amplitude; keeps the noise uniformly elliptic.
    pub sigma0: f64,
    /// Degree-scaled noise amplitude. Nonnegative.
    pub sigma1: f64,
}

impl DynamicsParams {
    pub fn new(kappa: f64, beta: f64, sigma0: f64, sigma1: f64) -> Result<Self, DynamicsError> {
        let check = |name: &'static str, value: f64, strictly: bool| {
            let ok = value.is_finite() && if strictly { value > 0.0 } else { value >= 0.0 };
            if ok {
                Ok(value)
            } else {
                Err(DynamicsError::InvalidParameter { name, value })
            }
        };
        Ok(Self {
            kappa: check("kappa", kappa, true)?,
            beta: check("beta", beta, false)?,
            sigma0: check("sigma0", sigma0, true)?,
            sigma1: check("sigma1", sigma1, false)?,
        })
    }
}

/// Drift and noise matrices induced by a flow, with the intermediates that
/// are useful for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsMatrices {
    /// Drift `A = -kappa I - beta L`; symmetric negative definite.
    pub drift: DMatrix<f64>,
    /// Noise `C = sigma0 I + sigma1 D^(1/2)`; symmetric positive definite.
    pub noise: DMatrix<f64>,
    /// Graph Laplacian `L = D - S` of the symmetrized weights.
    pub laplacian: DMatrix<f64>,
    /// Symmetrized degrees (diagonal of `D`).
    pub degrees: DVector<f64>,
}

impl DynamicsMatrices {
    pub fn dimension(&self) -> usize {
        self.drift.nrows()
    }
}

/// Directed weight matrix `W_ij = sum of w_e over edges i -> j`.
pub fn weight_matrix(graph: &EmbeddedGraph, flow: &[f64]) -> Result<DMatrix<f64>, DynamicsError> {
    if flow.len() != graph.n_edges() {
        return Err(GraphError::FlowLength { expected: graph.n_edges(), got: flow.len() }.into());
    }
    for (j, &w) in flow.iter().enumerate() {
        if w < 0.0 || !w.is_finite() {
            return Err(DynamicsError::NegativeFlow { edge: j, value: w });
        }
    }
    let n = graph.n_vertices();
    let mut m = DMatrix::zeros(n, n);
    for (e, &w) in graph.edges().iter().zip(flow) {
        m[(e.tail, e.head)] += w;
    }
    Ok(m)
}

/// Laplacian `L = D - S` of the symmetrized weights `S = (W + W')/2`.
/// The degree of a vertex is its off-diagonal row sum in `S` (self-loops
/// are rejected when the graph is built, so `S` has a zero diagonal).
pub fn laplacian(weights: &DMatrix<f64>) -> DMatrix<f64> {
    let s = (weights + weights.transpose()) * 0.5;
    let n = s.nrows();
    let mut l = -&s;
    for i in 0..n {
        let mut degree = 0.0;
        for j in 0..n {
            if j != i {
                degree += s[(i, j)];
            }
        }
        l[(i, i)] = degree;
    }
    l
}

/// Builds the canonical drift and noise for a flow on the library graph.
pub fn canonical_dynamics(
    graph: &EmbeddedGraph,
    flow: &[f64],
    params: &DynamicsParams,
) -> Result<DynamicsMatrices, DynamicsError> {
    let w = weight_matrix(graph, flow)?;
    let l = laplacian(&w);
    let n = l.nrows();

    let scale = l.amax().max(1.0);
    let min_eig = l
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min_eig < -PSD_TOL * scale {
        return Err(DynamicsError::NotPositiveSemidefinite { min_eigenvalue: min_eig });
    }

    let degrees = DVector::from_fn(n, |i, _| l[(i, i)]);
    let mut drift = &l * (-params.beta);
    let mut noise = DMatrix::zeros(n, n);
    for i in 0..n {
        drift[(i, i)] -= params.kappa;
        noise[(i, i)] = params.sigma0 + params.sigma1 * degrees[i].max(0.0).sqrt();
    }
    Ok(DynamicsMatrices { drift, noise, laplacian: l, degrees })
}
