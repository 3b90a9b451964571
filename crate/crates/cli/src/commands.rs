//! The `brmap` subcommands.
//!
//! Every command reads a self-describing text input, echoes its fully
//! resolved configuration in a JSON report on stdout, and signals failures
//! through both a machine-readable JSON object and the exit code:
//!
//! * `0` success
//! * `2` malformed or inconsistent input (also used by argument parsing)
//! * `3` no admissible flow exists (the report carries a witness)
//! * `4` the covariance steering did not reach the terminal tolerance

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use brmap_core::bot_solver::{
    feasibility_check, local_search, oracle_solve, Solution, SolveConfig, SolveError,
};
use brmap_core::cost_field::{CostField, CostFieldError, Polyline, DEFAULT_N_SUB};
use brmap_core::gaussian_bridge::{
    dynamic_cost, kl_monte_carlo, BridgeError, BridgeOptions, BridgeSolution,
    GaussianMarginalPair, DEFAULT_N_STEPS,
};
use brmap_core::geometry::Point;
use brmap_core::graph_core::{EmbeddedGraph, Exponent, GraphError};
use brmap_core::hybrid_optimizer::{hybrid_solve, HybridConfig, HybridError, DEFAULT_CANDIDATE_POOL};
use brmap_core::measures::{
    AtomicMeasure, BalancedPair, MeasureError, RoiTimeSeries, WindowMode,
};

use crate::format::{
    measures_to_string, parse_timeseries_file, FormatError, ProblemInstance, RoiTable,
    ROI_HEADER, TIMESERIES_HEADER,
};
use crate::render::{edges_tsv, support_dot, support_svg};
use crate::reports::{
    BridgeReport, CertificateReport, CostEvalReport, ErrorReport, EstimateReport, HybridReport,
    HybridRow, McReport, SolveConfigEcho, SolveReport, ValidateReport, FORMAT_VERSION,
};

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub enum CliError {
    /// Bad file contents, bad flags, or an unusable configuration.
    Input(String),
    /// The instance admits no flow; `witness` lists starved vertices.
    Infeasible { witness: Vec<usize>, message: String },
    /// Covariance steering stalled above the terminal tolerance.
    NoConvergence { terminal_error: f64, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Input(_) => 2,
            Self::Infeasible { .. } => 3,
            Self::NoConvergence { .. } => 4,
        }
    }

    pub fn report(&self) -> ErrorReport {
        match self {
            Self::Input(message) => ErrorReport {
                error: message.clone(),
                kind: "input",
                exit_code: 2,
                witness: None,
                terminal_error: None,
            },
            Self::Infeasible { witness, message } => ErrorReport {
                error: message.clone(),
                kind: "infeasible",
                exit_code: 3,
                witness: Some(witness.clone()),
                terminal_error: None,
            },
            Self::NoConvergence { terminal_error, message } => ErrorReport {
                error: message.clone(),
                kind: "no-convergence",
                exit_code: 4,
                witness: None,
                terminal_error: Some(*terminal_error),
            },
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<CostFieldError> for CliError {
    fn from(e: CostFieldError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<MeasureError> for CliError {
    fn from(e: MeasureError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::Infeasible { witness } => {
                Self::Infeasible { witness, message: "no admissible flow exists".into() }
            }
            other => Self::Input(other.to_string()),
        }
    }
}

impl From<BridgeError> for CliError {
    fn from(e: BridgeError) -> Self {
        match e {
            BridgeError::NoConvergence { terminal_error, .. } => Self::NoConvergence {
                terminal_error,
                message: format!(
                    "covariance steering stalled at relative terminal error {terminal_error:.3e}"
                ),
            },
            other => Self::Input(other.to_string()),
        }
    }
}

impl From<HybridError> for CliError {
    fn from(e: HybridError) -> Self {
        match e {
            HybridError::Solve(inner) => inner.into(),
            HybridError::Bridge(inner) => inner.into(),
            other => Self::Input(other.to_string()),
        }
    }
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "brmap",
    version,
    about = "Infer branched reaction maps and their induced dynamics"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn ROI scores or time series into a balanced source/target pair.
    Estimate(EstimateArgs),
    /// Find a minimum-energy branched routing for an instance.
    Solve(SolveArgs),
    /// Steer the induced dynamics between the instance's marginals.
    Bridge(BridgeArgs),
    /// Sweep the combined objective over a grid of trade-off weights.
    Hybrid(HybridArgs),
    /// Evaluate the instance's cost field at points or along edges.
    CostEval(CostEvalArgs),
    /// Parse, lint and fingerprint an instance file.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScoreMode {
    /// Integrate the positive part of the baseline-corrected signal.
    Positive,
    /// Integrate the absolute value instead.
    Absolute,
}

impl From<ScoreMode> for WindowMode {
    fn from(m: ScoreMode) -> Self {
        match m {
            ScoreMode::Positive => WindowMode::PositivePart,
            ScoreMode::Absolute => WindowMode::Absolute,
        }
    }
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// ROI score table or ROI time series (detected by header).
    pub input: PathBuf,
    /// Total mass given to each of the two measures.
    #[arg(long, default_value_t = 1.0)]
    pub mass: f64,
    /// Window integrand for time-series scoring.
    #[arg(long, value_enum, default_value_t = ScoreMode::Positive)]
    pub mode: ScoreMode,
    /// Stimulus window (time series only): start and end time.
    #[arg(long, num_args = 2, value_names = ["T0", "T1"])]
    pub stim_window: Option<Vec<f64>>,
    /// Reaction window (time series only): start and end time.
    #[arg(long, num_args = 2, value_names = ["T0", "T1"])]
    pub react_window: Option<Vec<f64>>,
    /// Write the measures artifact here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Problem instance file.
    pub instance: PathBuf,
    /// Concavity exponent; overrides the instance's [solver] alpha.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Use the exhaustive forest oracle (the default).
    #[arg(long, conflicts_with = "local")]
    pub oracle: bool,
    /// Use randomized local search; requires --seed.
    #[arg(long, requires = "seed")]
    pub local: bool,
    /// Seed for the local-search restarts.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of local-search restarts.
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Directory for report.json, support.dot, support.svg and edges.tsv.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BridgeArgs {
    /// Problem instance file with [dynamics] and [marginals].
    pub instance: PathBuf,
    /// Time steps of the control grid.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Comma-separated edge weights to build the dynamics from; when
    /// omitted the instance is solved first.
    #[arg(long)]
    pub flow: Option<String>,
    /// Concavity exponent for the implicit solve.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Seed enabling local-search fallback for the implicit solve.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo check of the control effort; requires --mc-seed.
    #[arg(long, requires = "mc_seed")]
    pub mc_paths: Option<usize>,
    /// Seed for the Monte Carlo paths.
    #[arg(long)]
    pub mc_seed: Option<u64>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HybridArgs {
    /// Problem instance file with [dynamics] and [marginals].
    pub instance: PathBuf,
    /// Comma-separated nonnegative trade-off weights.
    #[arg(long)]
    pub lambda_grid: String,
    /// Seed for candidate generation and local search.
    #[arg(long)]
    pub seed: u64,
    /// Concavity exponent; overrides the instance's [solver] alpha.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Cap on the candidate pool scored per weight.
    #[arg(long)]
    pub candidate_pool: Option<usize>,
    /// Time steps of the control grid.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Directory for envelope.tsv and per-weight DOT files.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostEvalArgs {
    /// Problem instance file with a [cost-field] section.
    pub instance: PathBuf,
    /// Evaluation point, comma separated; requires --tangent.
    #[arg(long, requires = "tangent")]
    pub point: Option<String>,
    /// Direction at the point, comma separated.
    #[arg(long, requires = "point")]
    pub tangent: Option<String>,
    /// Polyline as points separated by ';', e.g. "0,0 ; 1,0.5".
    #[arg(long)]
    pub edge: Option<String>,
    /// Quadrature subdivisions per segment for --edge.
    #[arg(long, default_value_t = DEFAULT_N_SUB)]
    pub n_sub: usize,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Problem instance file.
    pub instance: PathBuf,
    /// Print the canonical serialization instead of the JSON report.
    #[arg(long)]
    pub emit_canonical: bool,
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn parse_float_list(text: &str, what: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|t| {
            let t = t.trim();
            t.parse::<f64>()
                .map_err(|_| CliError::Input(format!("{what}: '{t}' is not a number")))
        })
        .collect()
}

fn parse_point(text: &str, dim: usize, what: &str) -> Result<Point, CliError> {
    let vals = parse_float_list(text, what)?;
    if vals.len() != dim {
        return Err(CliError::Input(format!(
            "{what}: expected {dim} coordinates, got {}",
            vals.len()
        )));
    }
    let mut p = Point::zeros();
    for (i, v) in vals.iter().enumerate() {
        p[i] = *v;
    }
    Ok(p)
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn to_json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize")
}

struct LoadedInstance {
    instance: ProblemInstance,
    field: Option<CostField>,
    graph: EmbeddedGraph,
}

fn load_instance(path: &Path) -> Result<LoadedInstance, CliError> {
    let instance = ProblemInstance::parse_file(path)?;
    let field = instance.load_cost_field(&base_dir(path))?;
    let graph = instance.build_graph(field.as_ref())?;
    Ok(LoadedInstance { instance, field, graph })
}

fn resolve_alpha(flag: Option<f64>, instance: &ProblemInstance) -> Result<Exponent, CliError> {
    let alpha = flag
        .or(instance.solver.alpha)
        .ok_or_else(|| CliError::Input("alpha is required: pass --alpha or add it to [solver]".into()))?;
    Ok(Exponent::new(alpha)?)
}

fn require_feasible(graph: &EmbeddedGraph) -> Result<(), CliError> {
    let report = feasibility_check(graph);
    if report.feasible {
        Ok(())
    } else {
        Err(CliError::Infeasible {
            witness: report.witness,
            message: format!(
                "no admissible flow: only {} of {} units of supply are routable",
                report.max_flow, report.supply
            ),
        })
    }
}

/// Oracle by default; explicit `--local` or a `TooLarge` refusal plus a seed
/// switch to local search.
fn solve_instance(
    graph: &EmbeddedGraph,
    alpha: Exponent,
    use_local: bool,
    seed: Option<u64>,
    restarts: Option<usize>,
) -> Result<(Solution, &'static str), CliError> {
    let local_config = |seed: u64| {
        let mut config = SolveConfig::new(alpha, seed);
        if let Some(r) = restarts {
            config.restarts = r;
        }
        config
    };
    if use_local {
        let seed = seed.expect("clap enforces --seed with --local");
        return Ok((local_search(graph, &local_config(seed))?, "local-search"));
    }
    match oracle_solve(graph, alpha) {
        Ok(solution) => Ok((solution, "oracle")),
        Err(SolveError::TooLarge { .. }) => match seed {
            Some(seed) => Ok((local_search(graph, &local_config(seed))?, "local-search")),
            None => Err(CliError::Input(
                "the instance is too large for the exhaustive oracle; \
                 pass --local --seed <S> to use randomized local search"
                    .into(),
            )),
        },
        Err(other) => Err(other.into()),
    }
}

fn marginal_pair_of(instance: &ProblemInstance) -> Result<GaussianMarginalPair, CliError> {
    instance
        .marginal_pair()?
        .ok_or_else(|| CliError::Input("the instance has no [marginals] section".into()))
}

// ---------------------------------------------------------------------------
// estimate
// ---------------------------------------------------------------------------

fn sniff_header(path: &Path) -> Result<String, CliError> {
    let text = std::fs::read_to_string(path)?;
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if !line.is_empty() {
            return Ok(line.to_string());
        }
    }
    Err(CliError::Input(format!("{}: empty input", path.display())))
}

fn window_of(flag: &Option<Vec<f64>>, name: &str) -> Result<(f64, f64), CliError> {
    let w = flag
        .as_ref()
        .ok_or_else(|| CliError::Input(format!("time-series input needs --{name}")))?;
    Ok((w[0], w[1]))
}

fn scores_from_timeseries(
    series: &RoiTimeSeries,
    window: (f64, f64),
    mode: WindowMode,
) -> Result<Vec<f64>, CliError> {
    (0..series.n_rois())
        .map(|r| Ok(series.score_from_window(r, window.0, window.1, mode)?))
        .collect()
}

struct ScoredRois {
    positions: Vec<Point>,
    stim: Vec<f64>,
    react: Vec<f64>,
    stim_window: Option<(f64, f64)>,
    react_window: Option<(f64, f64)>,
}

pub fn run_estimate(args: &EstimateArgs) -> Result<(), CliError> {
    let header = sniff_header(&args.input)?;
    let ScoredRois { positions, stim, react, stim_window, react_window } = if header == ROI_HEADER
    {
        if args.stim_window.is_some() || args.react_window.is_some() {
            return Err(CliError::Input(
                "score tables carry final scores; windows only apply to time series".into(),
            ));
        }
        let table = RoiTable::parse_file(&args.input)?;
        ScoredRois {
            positions: table.positions,
            stim: table.stim_scores,
            react: table.react_scores,
            stim_window: None,
            react_window: None,
        }
    } else if header == TIMESERIES_HEADER {
        let series = parse_timeseries_file(&args.input)?;
        let sw = window_of(&args.stim_window, "stim-window")?;
        let rw = window_of(&args.react_window, "react-window")?;
        let mode = WindowMode::from(args.mode);
        ScoredRois {
            positions: series.positions().to_vec(),
            stim: scores_from_timeseries(&series, sw, mode)?,
            react: scores_from_timeseries(&series, rw, mode)?,
            stim_window: Some(sw),
            react_window: Some(rw),
        }
    } else {
        return Err(CliError::Input(format!(
            "unrecognized input header '{header}' (expected '{ROI_HEADER}' or '{TIMESERIES_HEADER}')"
        )));
    };

    let source = AtomicMeasure::from_scores(&stim, &positions, args.mass)?;
    let target = AtomicMeasure::from_scores(&react, &positions, args.mass)?;
    let pair = BalancedPair::new(source, target);
    let balance = pair.validate();
    let artifact = measures_to_string(&pair);

    let report = EstimateReport {
        format_version: FORMAT_VERSION,
        input: args.input.display().to_string(),
        n_rois: positions.len(),
        mass: args.mass,
        mode: format!("{:?}", args.mode).to_lowercase(),
        stim_window,
        react_window,
        total_source: pair.source.total_mass(),
        total_target: pair.target.total_mass(),
        relative_mismatch: balance.relative_mismatch,
        balanced: balance.pass,
    };

    match &args.out {
        Some(path) => {
            std::fs::write(path, artifact)?;
            println!("{}", to_json(&report));
        }
        None => print!("{artifact}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

pub fn run_solve(args: &SolveArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let loaded = load_instance(&args.instance)?;
    let alpha = resolve_alpha(args.alpha, &loaded.instance)?;
    require_feasible(&loaded.graph)?;

    let restarts = args.restarts.or(loaded.instance.solver.restarts);
    let (solution, method) =
        solve_instance(&loaded.graph, alpha, args.local, args.seed, restarts)?;
    let residual = loaded.graph.kirchhoff_residual(&solution.flow)?.amax();

    let report = SolveReport {
        format_version: FORMAT_VERSION,
        instance_hash: loaded.instance.hash(),
        config: SolveConfigEcho {
            alpha: alpha.get(),
            method,
            seed: if method == "local-search" { args.seed } else { None },
            restarts: if method == "local-search" { restarts.or(Some(32)) } else { None },
        },
        n_vertices: loaded.graph.n_vertices(),
        n_edges: loaded.graph.n_edges(),
        energy: solution.energy,
        support: solution.support.clone(),
        weights: solution.flow.clone(),
        residual_inf: residual,
        certificate: CertificateReport::from(&solution.certificate),
        runtime_ms: started.elapsed().as_millis(),
    };

    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), to_json(&report))?;
        std::fs::write(
            dir.join("support.dot"),
            support_dot(&loaded.graph, &solution.flow, alpha.get()),
        )?;
        std::fs::write(
            dir.join("support.svg"),
            support_svg(&loaded.graph, &solution.flow, alpha.get()),
        )?;
        std::fs::write(
            dir.join("edges.tsv"),
            edges_tsv(&loaded.graph, &solution.flow, alpha.get()),
        )?;
    }
    println!("{}", to_json(&report));
    Ok(())
}

// ---------------------------------------------------------------------------
// bridge
// ---------------------------------------------------------------------------

fn resolve_flow(
    loaded: &LoadedInstance,
    args: &BridgeArgs,
) -> Result<Vec<f64>, CliError> {
    if let Some(text) = &args.flow {
        let flow = parse_float_list(text, "--flow")?;
        if flow.len() != loaded.graph.n_edges() {
            return Err(CliError::Input(format!(
                "--flow needs {} weights, got {}",
                loaded.graph.n_edges(),
                flow.len()
            )));
        }
        if !loaded.graph.is_admissible(&flow)? {
            return Err(CliError::Input(
                "--flow violates the divergence constraint".into(),
            ));
        }
        return Ok(flow);
    }
    if loaded.graph.n_edges() == 0 {
        require_feasible(&loaded.graph)?;
        return Ok(Vec::new());
    }
    let alpha = resolve_alpha(args.alpha, &loaded.instance)?;
    require_feasible(&loaded.graph)?;
    let (solution, _) = solve_instance(&loaded.graph, alpha, false, args.seed, None)?;
    Ok(solution.flow)
}

pub fn run_bridge(args: &BridgeArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let loaded = load_instance(&args.instance)?;
    let params = loaded
        .instance
        .dynamics
        .clone()
        .ok_or_else(|| CliError::Input("the instance has no [dynamics] section".into()))?;
    let pair = marginal_pair_of(&loaded.instance)?;
    if pair.dimension() != loaded.graph.n_vertices() {
        return Err(CliError::Input(format!(
            "marginal dimension {} does not match the {} vertices",
            pair.dimension(),
            loaded.graph.n_vertices()
        )));
    }

    let flow = resolve_flow(&loaded, args)?;
    let n_steps = args
        .steps
        .or(loaded.instance.solver.n_steps)
        .unwrap_or(DEFAULT_N_STEPS);
    let options = BridgeOptions { n_steps, ..BridgeOptions::default() };

    let solution: BridgeSolution =
        dynamic_cost(&loaded.graph, &flow, &params, &pair, None, &options)?;

    let monte_carlo = match args.mc_paths {
        None => None,
        Some(paths) => {
            let seed = args.mc_seed.expect("clap enforces --mc-seed with --mc-paths");
            let estimate = kl_monte_carlo(&solution, &pair, paths, seed)?;
            let z = (estimate.mean - solution.total_cost) / estimate.std_error.max(1e-300);
            Some(McReport {
                estimate: estimate.mean,
                std_error: estimate.std_error,
                n_paths: estimate.n_paths,
                seed,
                z_score: z,
            })
        }
    };

    let report = BridgeReport {
        format_version: FORMAT_VERSION,
        instance_hash: loaded.instance.hash(),
        dimension: pair.dimension(),
        horizon: pair.horizon,
        n_steps,
        flow: if loaded.graph.n_edges() > 0 { Some(flow) } else { None },
        mean_cost: solution.mean.cost,
        covariance_cost: solution.covariance.cost,
        total_cost: solution.total_cost,
        terminal_error: solution.covariance.terminal_error,
        descent_iterations: solution.covariance.iterations,
        penalty_rounds: solution.covariance.round_starts.len(),
        monte_carlo,
        runtime_ms: started.elapsed().as_millis(),
    };

    let text = to_json(&report);
    if let Some(path) = &args.out {
        std::fs::write(path, &text)?;
    }
    println!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// hybrid
// ---------------------------------------------------------------------------

pub fn run_hybrid(args: &HybridArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let loaded = load_instance(&args.instance)?;
    let alpha = resolve_alpha(args.alpha, &loaded.instance)?;
    let params = loaded
        .instance
        .dynamics
        .clone()
        .ok_or_else(|| CliError::Input("the instance has no [dynamics] section".into()))?;
    let pair = marginal_pair_of(&loaded.instance)?;
    require_feasible(&loaded.graph)?;

    let mut grid = parse_float_list(&args.lambda_grid, "--lambda-grid")?;
    if grid.is_empty() {
        return Err(CliError::Input("--lambda-grid is empty".into()));
    }
    grid.sort_by(|a, b| a.total_cmp(b));
    grid.dedup();
    if grid.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(CliError::Input("--lambda-grid entries must be nonnegative".into()));
    }

    let n_steps = args
        .steps
        .or(loaded.instance.solver.n_steps)
        .unwrap_or(DEFAULT_N_STEPS);
    let candidate_pool = args
        .candidate_pool
        .or(loaded.instance.solver.candidate_pool)
        .unwrap_or(DEFAULT_CANDIDATE_POOL);
    let restarts = loaded.instance.solver.restarts.unwrap_or(32);

    let mut rows = Vec::with_capacity(grid.len());
    let mut dots = Vec::with_capacity(grid.len());
    for &lambda in &grid {
        let mut solve = SolveConfig::new(alpha, args.seed);
        solve.restarts = restarts;
        let mut config = HybridConfig::new(lambda, solve, params.clone(), pair.clone())?;
        config.bridge.n_steps = n_steps;
        config.candidate_pool = candidate_pool;
        let solution = hybrid_solve(&loaded.graph, &config)?;
        dots.push(support_dot(&loaded.graph, &solution.flow, alpha.get()));
        rows.push(HybridRow {
            lambda,
            support: solution.support,
            geometric: solution.geometric_cost,
            dynamic: solution.dynamic_cost_value,
            total: solution.total,
        });
    }

    let mut supports: Vec<&[usize]> = rows.iter().map(|r| r.support.as_slice()).collect();
    supports.sort();
    supports.dedup();
    let report = HybridReport {
        format_version: FORMAT_VERSION,
        instance_hash: loaded.instance.hash(),
        alpha: alpha.get(),
        seed: args.seed,
        candidate_pool,
        n_steps,
        distinct_supports: supports.len(),
        rows,
        runtime_ms: started.elapsed().as_millis(),
    };

    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        let mut tsv = String::from("lambda\tsupport\tgeometric\tdynamic\ttotal\n");
        for row in &report.rows {
            let support = row
                .support
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",");
            tsv.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                crate::format::fmt_f64(row.lambda),
                support,
                crate::format::fmt_f64(row.geometric),
                crate::format::fmt_f64(row.dynamic),
                crate::format::fmt_f64(row.total),
            ));
        }
        std::fs::write(dir.join("envelope.tsv"), tsv)?;
        for (i, dot) in dots.iter().enumerate() {
            std::fs::write(dir.join(format!("support_{i}.dot")), dot)?;
        }
    }
    println!("{}", to_json(&report));
    Ok(())
}

// ---------------------------------------------------------------------------
// cost-eval
// ---------------------------------------------------------------------------

pub fn run_cost_eval(args: &CostEvalArgs) -> Result<(), CliError> {
    let instance = ProblemInstance::parse_file(&args.instance)?;
    let field = instance
        .load_cost_field(&base_dir(&args.instance))?
        .ok_or_else(|| CliError::Input("the instance has no [cost-field] section".into()))?;
    if args.point.is_none() && args.edge.is_none() {
        return Err(CliError::Input("pass --point/--tangent or --edge".into()));
    }
    let dim = instance.domain.dim;

    let mut report = CostEvalReport {
        format_version: FORMAT_VERSION,
        point: None,
        tangent: None,
        value: None,
        edge: None,
        n_sub: None,
        edge_cost: None,
    };

    if let (Some(p), Some(v)) = (&args.point, &args.tangent) {
        let point = parse_point(p, dim, "--point")?;
        let tangent = parse_point(v, dim, "--tangent")?;
        report.value = Some(field.eval(&point, &tangent)?);
        report.point = Some(point.as_slice()[..dim].to_vec());
        report.tangent = Some(tangent.as_slice()[..dim].to_vec());
    }

    if let Some(text) = &args.edge {
        let points: Vec<Point> = text
            .split(';')
            .map(|chunk| parse_point(chunk.trim(), dim, "--edge"))
            .collect::<Result<_, _>>()?;
        let path = Polyline::new(points.clone())?;
        report.edge_cost = Some(field.edge_cost(&path, args.n_sub)?);
        report.n_sub = Some(args.n_sub);
        report.edge = Some(points.iter().map(|p| p.as_slice()[..dim].to_vec()).collect());
    }

    println!("{}", to_json(&report));
    Ok(())
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

pub fn run_validate(args: &ValidateArgs) -> Result<(), CliError> {
    let loaded = load_instance(&args.instance)?;
    let instance = &loaded.instance;
    if args.emit_canonical {
        print!("{}", instance.canonical());
        return Ok(());
    }

    let feasibility = feasibility_check(&loaded.graph);
    let mut warnings = Vec::new();

    let divergence_sum: f64 = loaded.graph.divergence().iter().sum();
    if divergence_sum.abs() > 1e-9 {
        warnings.push(format!("divergence sums to {divergence_sum} (must be 0 to route)"));
    }
    let mut degree = vec![0usize; loaded.graph.n_vertices()];
    for e in loaded.graph.edges() {
        degree[e.tail] += 1;
        degree[e.head] += 1;
    }
    for (v, d) in degree.iter().enumerate() {
        if *d == 0 && loaded.graph.divergence()[v] != 0.0 {
            warnings.push(format!("vertex {v} carries divergence but no edges"));
        }
    }
    if let Some(pair) = instance.balanced_pair() {
        let b = pair.validate();
        if !b.pass {
            warnings.push(format!(
                "stimulus and reaction masses differ by a relative {:.3e}",
                b.relative_mismatch
            ));
        }
    }
    match (&instance.dynamics, &instance.marginals) {
        (Some(_), None) => warnings.push("[dynamics] without [marginals]: bridge commands will fail".into()),
        (None, Some(_)) => warnings.push("[marginals] without [dynamics]: bridge commands will fail".into()),
        _ => {}
    }
    if let Some(m) = &instance.marginals {
        if m.initial_mean.len() != loaded.graph.n_vertices() {
            warnings.push(format!(
                "marginal dimension {} does not match the {} vertices",
                m.initial_mean.len(),
                loaded.graph.n_vertices()
            ));
        }
        // Surface covariance defects (asymmetry, not positive definite) now.
        if let Err(e) = instance.marginal_pair() {
            warnings.push(format!("marginals are unusable: {e}"));
        }
    }

    let report = ValidateReport {
        format_version: FORMAT_VERSION,
        instance_hash: instance.hash(),
        dim: instance.domain.dim,
        n_vertices: loaded.graph.n_vertices(),
        n_edges: loaded.graph.n_edges(),
        supply_kind: match &instance.supply {
            crate::format::SupplySpec::Divergence(_) => "divergence",
            crate::format::SupplySpec::Measures { .. } => "measures",
        },
        divergence_sum,
        feasible: feasibility.feasible,
        witness: feasibility.witness,
        has_cost_field: loaded.field.is_some(),
        has_dynamics: instance.dynamics.is_some(),
        has_marginals: instance.marginals.is_some(),
        warnings,
    };
    println!("{}", to_json(&report));
    Ok(())
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Estimate(args) => run_estimate(args),
        Command::Solve(args) => run_solve(args),
        Command::Bridge(args) => run_bridge(args),
        Command::Hybrid(args) => run_hybrid(args),
        Command::CostEval(args) => run_cost_eval(args),
        Command::Validate(args) => run_validate(args),
    }
}
