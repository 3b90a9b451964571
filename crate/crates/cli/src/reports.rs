//! JSON payloads emitted by the subcommands.
//!
//! Every report echoes the fully resolved configuration (after instance
//! defaults and command-line overrides are merged) so a run can be
//! reproduced from its report alone. Failures are also machine readable:
//! [`ErrorReport`] goes to stdout as JSON next to the human message on
//! stderr.

use serde::Serialize;

use brmap_core::bot_solver::Certificate;

pub const FORMAT_VERSION: u32 = 1;

/// Machine-readable failure, printed to stdout as one JSON object.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: String,
    /// Stable discriminator: `input`, `infeasible` or `no-convergence`.
    pub kind: &'static str,
    pub exit_code: i32,
    /// For infeasible instances: vertices with unmet divergence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Vec<usize>>,
    /// For non-converged steering: the relative terminal mismatch reached.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terminal_error: Option<f64>,
}

/// Serializable view of a solver certificate.
#[derive(Debug, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CertificateReport {
    GlobalForestOptimum { forests_evaluated: u64 },
    LocalOptimum { restarts: usize, pivot_moves: u64, distinct_optima: usize },
}

impl From<&Certificate> for CertificateReport {
    fn from(c: &Certificate) -> Self {
        match c {
            Certificate::GlobalForestOptimum { forests_evaluated } => {
                Self::GlobalForestOptimum { forests_evaluated: *forests_evaluated }
            }
            Certificate::LocalOptimum { restarts, pivot_moves, distinct_optima } => {
                Self::LocalOptimum {
                    restarts: *restarts,
                    pivot_moves: *pivot_moves,
                    distinct_optima: *distinct_optima,
                }
            }
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SolveConfigEcho {
    pub alpha: f64,
    pub method: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restarts: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct SolveReport {
    pub format_version: u32,
    pub instance_hash: String,
    pub config: SolveConfigEcho,
    pub n_vertices: usize,
    pub n_edges: usize,
    pub energy: f64,
    pub support: Vec<usize>,
    pub weights: Vec<f64>,
    /// Largest absolute Kirchhoff residual of the returned flow.
    pub residual_inf: f64,
    pub certificate: CertificateReport,
    pub runtime_ms: u128,
}

#[derive(Debug, Serialize)]
pub struct EstimateReport {
    pub format_version: u32,
    pub input: String,
    pub n_rois: usize,
    pub mass: f64,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stim_window: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub react_window: Option<(f64, f64)>,
    pub total_source: f64,
    pub total_target: f64,
    pub relative_mismatch: f64,
    pub balanced: bool,
}

#[derive(Debug, Serialize)]
pub struct McReport {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// `(estimate - analytic cost) / std_error`.
    pub z_score: f64,
}

#[derive(Debug, Serialize)]
pub struct BridgeReport {
    pub format_version: u32,
    pub instance_hash: String,
    pub dimension: usize,
    pub horizon: f64,
    pub n_steps: usize,
    /// Kirchhoff-solved flow the dynamics were built from, if any edges.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow: Option<Vec<f64>>,
    pub mean_cost: f64,
    pub covariance_cost: f64,
    pub total_cost: f64,
    pub terminal_error: f64,
    pub descent_iterations: usize,
    pub penalty_rounds: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<McReport>,
    pub runtime_ms: u128,
}

#[derive(Debug, Serialize)]
pub struct HybridRow {
    pub lambda: f64,
    pub support: Vec<usize>,
    pub geometric: f64,
    pub dynamic: f64,
    pub total: f64,
}

#[derive(Debug, Serialize)]
pub struct HybridReport {
    pub format_version: u32,
    pub instance_hash: String,
    pub alpha: f64,
    pub seed: u64,
    pub candidate_pool: usize,
    pub n_steps: usize,
    pub rows: Vec<HybridRow>,
    /// Count of distinct supports across the sweep.
    pub distinct_supports: usize,
    pub runtime_ms: u128,
}

#[derive(Debug, Serialize)]
pub struct ValidateReport {
    pub format_version: u32,
    pub instance_hash: String,
    pub dim: usize,
    pub n_vertices: usize,
    pub n_edges: usize,
    pub supply_kind: &'static str,
    pub divergence_sum: f64,
    pub feasible: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub witness: Vec<usize>,
    pub has_cost_field: bool,
    pub has_dynamics: bool,
    pub has_marginals: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct CostEvalReport {
    pub format_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tangent: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_sub: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub edge_cost: Option<f64>,
}
