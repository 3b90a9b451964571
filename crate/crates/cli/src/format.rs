//! Text formats: problem instances, ROI score tables, ROI time series and
//! the measures artifact written by `estimate`.
//!
//! Instances use a self-describing sectioned format. Parsing accepts the
//! sections and rows in any order; [`ProblemInstance::canonical`] re-emits
//! them in one fixed order with shortest-round-trip float formatting, so the
//! canonical SHA-256 hash is stable under reordering and equivalent spelling
//! of numbers. Everything numeric survives a parse → serialize → parse loop
//! bit-for-bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};
use thiserror::Error;

use brmap_core::cost_field::{
    read_field_from_path, CostField, CostFieldError, Polyline, DEFAULT_N_SUB,
};
use brmap_core::gaussian_bridge::{BridgeError, GaussianMarginalPair, GaussianState};
use brmap_core::geometry::{BoundingBox, Point};
use brmap_core::graph_core::{Edge, EmbeddedGraph, GraphError};
use brmap_core::graph_dynamics::{DynamicsError, DynamicsParams};
use brmap_core::measures::{AtomicMeasure, BalancedPair, MeasureError, RoiTimeSeries};

pub const INSTANCE_HEADER: &str = "brmap-instance v1";
pub const ROI_HEADER: &str = "brmap-roi v1";
pub const TIMESERIES_HEADER: &str = "brmap-timeseries v1";
pub const MEASURES_HEADER: &str = "brmap-measures v1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("missing required section [{0}]")]
    MissingSection(&'static str),
    #[error("{0}")]
    Semantic(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    CostField(#[from] CostFieldError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
}

fn syntax(line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Syntax { line, message: message.into() }
}

/// Shortest representation that parses back to the identical `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

// ---------------------------------------------------------------------------
// Low-level sectioned reader
// ---------------------------------------------------------------------------

/// One non-empty, comment-stripped line with its 1-based source line number.
type Row = (usize, Vec<String>);

/// Splits a sectioned file into `section name -> rows`, validating the
/// header line. Sections may appear in any order but not twice.
fn read_sections(
    text: &str,
    header: &str,
) -> Result<BTreeMap<String, Vec<Row>>, FormatError> {
    let mut sections: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    let mut current: Option<String> = None;
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != header {
                return Err(syntax(line_no, format!("expected header '{header}'")));
            }
            saw_header = true;
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| syntax(line_no, "unterminated section header"))?
                .trim()
                .to_string();
            if sections.contains_key(&name) {
                return Err(syntax(line_no, format!("duplicate section [{name}]")));
            }
            sections.insert(name.clone(), Vec::new());
            current = Some(name);
            continue;
        }
        let Some(section) = &current else {
            return Err(syntax(line_no, "content before the first section"));
        };
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        sections.get_mut(section).expect("section exists").push((line_no, tokens));
    }
    if !saw_header {
        return Err(FormatError::Semantic(format!("empty file (expected '{header}')")));
    }
    Ok(sections)
}

fn parse_f64(tok: &str, line: usize) -> Result<f64, FormatError> {
    tok.parse::<f64>().map_err(|_| syntax(line, format!("not a number: '{tok}'")))
}

fn parse_usize(tok: &str, line: usize) -> Result<usize, FormatError> {
    tok.parse::<usize>().map_err(|_| syntax(line, format!("not an index: '{tok}'")))
}

/// Key/value accessor over a section's rows (first token = key).
struct KeyRows<'a>(&'a [Row]);

impl KeyRows<'_> {
    fn get(&self, key: &str) -> Option<&Row> {
        self.0.iter().find(|(_, toks)| toks[0] == key)
    }

    fn values(&self, key: &str) -> Result<Option<(usize, &[String])>, FormatError> {
        match self.get(key) {
            None => Ok(None),
            Some((line, toks)) => Ok(Some((*line, &toks[1..]))),
        }
    }

    fn f64_value(&self, key: &str) -> Result<Option<f64>, FormatError> {
        match self.values(key)? {
            None => Ok(None),
            Some((line, vals)) => {
                if vals.len() != 1 {
                    return Err(syntax(line, format!("'{key}' takes exactly one value")));
                }
                Ok(Some(parse_f64(&vals[0], line)?))
            }
        }
    }

    fn require_f64(&self, key: &str, section: &str) -> Result<f64, FormatError> {
        self.f64_value(key)?.ok_or_else(|| {
            FormatError::Semantic(format!("[{section}] is missing the '{key}' key"))
        })
    }

    fn check_known(&self, known: &[&str], section: &str) -> Result<(), FormatError> {
        for (line, toks) in self.0 {
            if !known.contains(&toks[0].as_str()) {
                return Err(syntax(
                    *line,
                    format!("unknown key '{}' in [{section}]", toks[0]),
                ));
            }
        }
        Ok(())
    }
}

fn point_from(vals: &[String], dim: usize, line: usize) -> Result<Point, FormatError> {
    if vals.len() != dim {
        return Err(syntax(line, format!("expected {dim} coordinates, got {}", vals.len())));
    }
    let mut p = Point::zeros();
    for (i, v) in vals.iter().enumerate() {
        p[i] = parse_f64(v, line)?;
    }
    Ok(p)
}

fn push_point(out: &mut String, p: &Point, dim: usize) {
    for i in 0..dim {
        let _ = write!(out, " {}", fmt_f64(p[i]));
    }
}

// ---------------------------------------------------------------------------
// Problem instances
// ---------------------------------------------------------------------------

/// How one candidate edge was specified.
#[derive(Debug, Clone, PartialEq)]
pub enum EdgeSpec {
    /// Straight embedding with an explicit traversal coefficient.
    Beta(f64),
    /// Embedded polyline; the coefficient comes from the cost field.
    Path(Vec<Point>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawEdge {
    pub tail: usize,
    pub head: usize,
    pub spec: EdgeSpec,
}

/// Supply data: either the divergence vector directly, or stimulus/reaction
/// measures whose atoms sit on vertices.
#[derive(Debug, Clone, PartialEq)]
pub enum SupplySpec {
    Divergence(Vec<(usize, f64)>),
    Measures { sources: Vec<(usize, f64)>, targets: Vec<(usize, f64)> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum CostFieldSpec {
    Constant(f64),
    File(String),
}

/// Optional solver defaults carried by the instance; command-line flags
/// override them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolverSection {
    pub alpha: Option<f64>,
    pub restarts: Option<usize>,
    pub n_steps: Option<usize>,
    pub candidate_pool: Option<usize>,
}

/// Marginal endpoints in raw numeric form (kept for canonical emission).
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalsSection {
    pub horizon: f64,
    pub initial_mean: Vec<f64>,
    pub initial_cov: Vec<f64>,
    pub terminal_mean: Vec<f64>,
    pub terminal_cov: Vec<f64>,
}

/// A parsed instance file: everything needed to pose the transport problem
/// and, optionally, the dynamic extension.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub domain: BoundingBox,
    pub vertices: Vec<Point>,
    pub edges: Vec<RawEdge>,
    pub supply: SupplySpec,
    pub cost_field: Option<CostFieldSpec>,
    pub dynamics: Option<DynamicsParams>,
    pub marginals: Option<MarginalsSection>,
    pub solver: SolverSection,
}

impl ProblemInstance {
    pub fn parse_str(text: &str) -> Result<Self, FormatError> {
        let mut sections = read_sections(text, INSTANCE_HEADER)?;
        let known = [
            "domain",
            "vertices",
            "edges",
            "divergence",
            "measures",
            "cost-field",
            "dynamics",
            "marginals",
            "solver",
        ];
        for name in sections.keys() {
            if !known.contains(&name.as_str()) {
                return Err(FormatError::Semantic(format!("unknown section [{name}]")));
            }
        }

        // [domain]
        let domain_rows = sections.remove("domain").ok_or(FormatError::MissingSection("domain"))?;
        let kv = KeyRows(&domain_rows);
        kv.check_known(&["dim", "lo", "hi"], "domain")?;
        let dim = {
            let (line, vals) = kv
                .values("dim")?
                .ok_or_else(|| FormatError::Semantic("[domain] needs 'dim'".into()))?;
            if vals.len() != 1 {
                return Err(syntax(line, "'dim' takes one value"));
            }
            let d = parse_usize(&vals[0], line)?;
            if d != 2 && d != 3 {
                return Err(syntax(line, "dim must be 2 or 3"));
            }
            d
        };
        let lo = {
            let (line, vals) = kv
                .values("lo")?
                .ok_or_else(|| FormatError::Semantic("[domain] needs 'lo'".into()))?;
            point_from(vals, dim, line)?
        };
        let hi = {
            let (line, vals) = kv
                .values("hi")?
                .ok_or_else(|| FormatError::Semantic("[domain] needs 'hi'".into()))?;
            point_from(vals, dim, line)?
        };
        for i in 0..dim {
            if !lo[i].is_finite() || !hi[i].is_finite() || lo[i] >= hi[i] {
                return Err(FormatError::Semantic(format!(
                    "[domain] corner ordering violated on axis {i}"
                )));
            }
        }
        let domain = BoundingBox::new(lo, hi, dim);

        // [vertices]: rows `id x y [z]` with dense ids 0..n.
        let vertex_rows =
            sections.remove("vertices").ok_or(FormatError::MissingSection("vertices"))?;
        let mut vertices: Vec<Option<Point>> = vec![None; vertex_rows.len()];
        for (line, toks) in &vertex_rows {
            if toks.len() != 1 + dim {
                return Err(syntax(*line, format!("vertex rows take 'id' + {dim} coordinates")));
            }
            let id = parse_usize(&toks[0], *line)?;
            if id >= vertices.len() {
                return Err(syntax(
                    *line,
                    format!("vertex id {id} out of range (ids must be dense 0..{})", vertices.len()),
                ));
            }
            if vertices[id].is_some() {
                return Err(syntax(*line, format!("duplicate vertex id {id}")));
            }
            let p = point_from(&toks[1..], dim, *line)?;
            if !domain.contains(&p, 1e-9) {
                return Err(syntax(*line, format!("vertex {id} lies outside the domain")));
            }
            vertices[id] = Some(p);
        }
        let vertices: Vec<Point> = vertices
            .into_iter()
            .map(|v| v.ok_or_else(|| FormatError::Semantic("vertex ids are not dense".into())))
            .collect::<Result<_, _>>()?;
        if vertices.is_empty() {
            return Err(FormatError::Semantic("at least one vertex is required".into()));
        }

        // [edges]: `tail head beta <v>` or `tail head path x y [z] ; ...`.
        let edge_rows = sections.remove("edges").unwrap_or_default();
        let mut edges = Vec::with_capacity(edge_rows.len());
        for (line, toks) in &edge_rows {
            if toks.len() < 4 {
                return Err(syntax(*line, "edge rows are 'tail head beta <v>' or 'tail head path ...'"));
            }
            let tail = parse_usize(&toks[0], *line)?;
            let head = parse_usize(&toks[1], *line)?;
            for v in [tail, head] {
                if v >= vertices.len() {
                    return Err(syntax(*line, format!("edge endpoint {v} is not a vertex")));
                }
            }
            let spec = match toks[2].as_str() {
                "beta" => {
                    if toks.len() != 4 {
                        return Err(syntax(*line, "'beta' takes exactly one value"));
                    }
                    let b = parse_f64(&toks[3], *line)?;
                    if !b.is_finite() || b <= 0.0 {
                        return Err(syntax(*line, "beta must be positive and finite"));
                    }
                    EdgeSpec::Beta(b)
                }
                "path" => {
                    let mut points = Vec::new();
                    for group in toks[3..].split(|t| t == ";") {
                        if group.is_empty() {
                            return Err(syntax(*line, "empty path point"));
                        }
                        points.push(point_from(group, dim, *line)?);
                    }
                    if points.len() < 2 {
                        return Err(syntax(*line, "a path needs at least two points"));
                    }
                    for p in &points {
                        if !domain.contains(p, 1e-9) {
                            return Err(syntax(*line, "path leaves the domain"));
                        }
                    }
                    EdgeSpec::Path(points)
                }
                other => return Err(syntax(*line, format!("unknown edge kind '{other}'"))),
            };
            edges.push(RawEdge { tail, head, spec });
        }

        // Supply: exactly one of [divergence] | [measures].
        let divergence_rows = sections.remove("divergence");
        let measure_rows = sections.remove("measures");
        let supply = match (divergence_rows, measure_rows) {
            (Some(_), Some(_)) => {
                return Err(FormatError::Semantic(
                    "give either [divergence] or [measures], not both".into(),
                ))
            }
            (None, None) => {
                return Err(FormatError::MissingSection("divergence"));
            }
            (Some(rows), None) => {
                let mut entries = Vec::new();
                for (line, toks) in &rows {
                    if toks.len() != 2 {
                        return Err(syntax(*line, "divergence rows are 'vertex value'"));
                    }
                    let v = parse_usize(&toks[0], *line)?;
                    if v >= vertices.len() {
                        return Err(syntax(*line, format!("divergence vertex {v} does not exist")));
                    }
                    if entries.iter().any(|&(u, _)| u == v) {
                        return Err(syntax(*line, format!("duplicate divergence row for vertex {v}")));
                    }
                    entries.push((v, parse_f64(&toks[1], *line)?));
                }
                SupplySpec::Divergence(entries)
            }
            (None, Some(rows)) => {
                let mut sources = Vec::new();
                let mut targets = Vec::new();
                for (line, toks) in &rows {
                    if toks.len() != 3 {
                        return Err(syntax(*line, "measure rows are 'source|target vertex mass'"));
                    }
                    let v = parse_usize(&toks[1], *line)?;
                    if v >= vertices.len() {
                        return Err(syntax(*line, format!("measure vertex {v} does not exist")));
                    }
                    let mass = parse_f64(&toks[2], *line)?;
                    if mass < 0.0 || !mass.is_finite() {
                        return Err(syntax(*line, "masses must be nonnegative"));
                    }
                    let bucket = match toks[0].as_str() {
                        "source" => &mut sources,
                        "target" => &mut targets,
                        other => {
                            return Err(syntax(*line, format!("unknown measure kind '{other}'")))
                        }
                    };
                    if bucket.iter().any(|&(u, _)| u == v) {
                        return Err(syntax(*line, format!("duplicate measure row for vertex {v}")));
                    }
                    bucket.push((v, mass));
                }
                SupplySpec::Measures { sources, targets }
            }
        };

        // [cost-field]
        let cost_field = match sections.remove("cost-field") {
            None => None,
            Some(rows) => {
                if rows.len() != 1 {
                    return Err(FormatError::Semantic(
                        "[cost-field] holds exactly one row".into(),
                    ));
                }
                let (line, toks) = &rows[0];
                Some(match toks[0].as_str() {
                    "constant" => {
                        if toks.len() != 2 {
                            return Err(syntax(*line, "'constant' takes one value"));
                        }
                        CostFieldSpec::Constant(parse_f64(&toks[1], *line)?)
                    }
                    "file" => {
                        if toks.len() != 2 {
                            return Err(syntax(*line, "'file' takes one path"));
                        }
                        CostFieldSpec::File(toks[1].clone())
                    }
                    other => return Err(syntax(*line, format!("unknown cost-field kind '{other}'"))),
                })
            }
        };

        // [dynamics]
        let dynamics = match sections.remove("dynamics") {
            None => None,
            Some(rows) => {
                let kv = KeyRows(&rows);
                kv.check_known(&["kappa", "beta", "sigma0", "sigma1"], "dynamics")?;
                Some(DynamicsParams::new(
                    kv.require_f64("kappa", "dynamics")?,
                    kv.require_f64("beta", "dynamics")?,
                    kv.require_f64("sigma0", "dynamics")?,
                    kv.require_f64("sigma1", "dynamics")?,
                )?)
            }
        };

        // [marginals]
        let marginals = match sections.remove("marginals") {
            None => None,
            Some(rows) => {
                let kv = KeyRows(&rows);
                kv.check_known(
                    &["horizon", "initial-mean", "initial-cov", "terminal-mean", "terminal-cov"],
                    "marginals",
                )?;
                let horizon = kv.require_f64("horizon", "marginals")?;
                let vec_of = |key: &str| -> Result<Vec<f64>, FormatError> {
                    let (line, vals) = kv.values(key)?.ok_or_else(|| {
                        FormatError::Semantic(format!("[marginals] is missing '{key}'"))
                    })?;
                    vals.iter().map(|v| parse_f64(v, line)).collect()
                };
                let section = MarginalsSection {
                    horizon,
                    initial_mean: vec_of("initial-mean")?,
                    initial_cov: vec_of("initial-cov")?,
                    terminal_mean: vec_of("terminal-mean")?,
                    terminal_cov: vec_of("terminal-cov")?,
                };
                let n = section.initial_mean.len();
                if section.terminal_mean.len() != n
                    || section.initial_cov.len() != n * n
                    || section.terminal_cov.len() != n * n
                {
                    return Err(FormatError::Semantic(
                        "[marginals] mean/covariance sizes are inconsistent".into(),
                    ));
                }
                Some(section)
            }
        };

        // [solver]
        let solver = match sections.remove("solver") {
            None => SolverSection::default(),
            Some(rows) => {
                let kv = KeyRows(&rows);
                kv.check_known(&["alpha", "restarts", "n-steps", "candidate-pool"], "solver")?;
                let usize_of = |key: &str| -> Result<Option<usize>, FormatError> {
                    match kv.values(key)? {
                        None => Ok(None),
                        Some((line, vals)) => {
                            if vals.len() != 1 {
                                return Err(syntax(line, format!("'{key}' takes one value")));
                            }
                            Ok(Some(parse_usize(&vals[0], line)?))
                        }
                    }
                };
                SolverSection {
                    alpha: kv.f64_value("alpha")?,
                    restarts: usize_of("restarts")?,
                    n_steps: usize_of("n-steps")?,
                    candidate_pool: usize_of("candidate-pool")?,
                }
            }
        };

        Ok(Self { domain, vertices, edges, supply, cost_field, dynamics, marginals, solver })
    }

    pub fn parse_file(path: &Path) -> Result<Self, FormatError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    /// Canonical serialization: fixed section order, fixed key order, rows
    /// sorted where order is not meaningful, shortest float spellings.
    pub fn canonical(&self) -> String {
        let dim = self.domain.dim;
        let mut out = String::new();
        let _ = writeln!(out, "{INSTANCE_HEADER}");

        let _ = writeln!(out, "\n[domain]");
        let _ = writeln!(out, "dim {dim}");
        out.push_str("lo");
        push_point(&mut out, &self.domain.lo, dim);
        out.push_str("\nhi");
        push_point(&mut out, &self.domain.hi, dim);
        out.push('\n');

        let _ = writeln!(out, "\n[vertices]");
        for (id, p) in self.vertices.iter().enumerate() {
            let _ = write!(out, "{id}");
            push_point(&mut out, p, dim);
            out.push('\n');
        }

        if !self.edges.is_empty() {
            let _ = writeln!(out, "\n[edges]");
            for e in &self.edges {
                let _ = write!(out, "{} {}", e.tail, e.head);
                match &e.spec {
                    EdgeSpec::Beta(b) => {
                        let _ = write!(out, " beta {}", fmt_f64(*b));
                    }
                    EdgeSpec::Path(points) => {
                        out.push_str(" path");
                        for (i, p) in points.iter().enumerate() {
                            if i > 0 {
                                out.push_str(" ;");
                            }
                            push_point(&mut out, p, dim);
                        }
                    }
                }
                out.push('\n');
            }
        }

        match &self.supply {
            SupplySpec::Divergence(entries) => {
                let _ = writeln!(out, "\n[divergence]");
                let mut sorted = entries.clone();
                sorted.sort_by_key(|&(v, _)| v);
                for (v, b) in sorted {
                    let _ = writeln!(out, "{v} {}", fmt_f64(b));
                }
            }
            SupplySpec::Measures { sources, targets } => {
                let _ = writeln!(out, "\n[measures]");
                let mut sorted = sources.clone();
                sorted.sort_by_key(|&(v, _)| v);
                for (v, m) in sorted {
                    let _ = writeln!(out, "source {v} {}", fmt_f64(m));
                }
                let mut sorted = targets.clone();
                sorted.sort_by_key(|&(v, _)| v);
                for (v, m) in sorted {
                    let _ = writeln!(out, "target {v} {}", fmt_f64(m));
                }
            }
        }

        if let Some(spec) = &self.cost_field {
            let _ = writeln!(out, "\n[cost-field]");
            match spec {
                CostFieldSpec::Constant(c0) => {
                    let _ = writeln!(out, "constant {}", fmt_f64(*c0));
                }
                CostFieldSpec::File(path) => {
                    let _ = writeln!(out, "file {path}");
                }
            }
        }

        if let Some(d) = &self.dynamics {
            let _ = writeln!(out, "\n[dynamics]");
            let _ = writeln!(out, "kappa {}", fmt_f64(d.kappa));
            let _ = writeln!(out, "beta {}", fmt_f64(d.beta));
            let _ = writeln!(out, "sigma0 {}", fmt_f64(d.sigma0));
            let _ = writeln!(out, "sigma1 {}", fmt_f64(d.sigma1));
        }

        if let Some(m) = &self.marginals {
            let _ = writeln!(out, "\n[marginals]");
            let _ = writeln!(out, "horizon {}", fmt_f64(m.horizon));
            for (key, vals) in [
                ("initial-mean", &m.initial_mean),
                ("initial-cov", &m.initial_cov),
                ("terminal-mean", &m.terminal_mean),
                ("terminal-cov", &m.terminal_cov),
            ] {
                out.push_str(key);
                for v in vals {
                    let _ = write!(out, " {}", fmt_f64(*v));
                }
                out.push('\n');
            }
        }

        let s = &self.solver;
        if s.alpha.is_some()
            || s.restarts.is_some()
            || s.n_steps.is_some()
            || s.candidate_pool.is_some()
        {
            let _ = writeln!(out, "\n[solver]");
            if let Some(a) = s.alpha {
                let _ = writeln!(out, "alpha {}", fmt_f64(a));
            }
            if let Some(r) = s.restarts {
                let _ = writeln!(out, "restarts {r}");
            }
            if let Some(n) = s.n_steps {
                let _ = writeln!(out, "n-steps {n}");
            }
            if let Some(p) = s.candidate_pool {
                let _ = writeln!(out, "candidate-pool {p}");
            }
        }
        out
    }

    /// SHA-256 of the canonical serialization, lowercase hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut acc, b| {
            let _ = write!(acc, "{b:02x}");
            acc
        })
    }

    /// The divergence vector `b`, from either supply representation.
    pub fn divergence_vector(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.vertices.len()];
        match &self.supply {
            SupplySpec::Divergence(entries) => {
                for &(v, val) in entries {
                    b[v] = val;
                }
            }
            SupplySpec::Measures { sources, targets } => {
                for &(v, m) in sources {
                    b[v] += m;
                }
                for &(v, m) in targets {
                    b[v] -= m;
                }
            }
        }
        b
    }

    /// The stimulus/reaction measures as a balanced pair, when supplied.
    pub fn balanced_pair(&self) -> Option<BalancedPair> {
        match &self.supply {
            SupplySpec::Divergence(_) => None,
            SupplySpec::Measures { sources, targets } => {
                let collect = |rows: &[(usize, f64)]| {
                    let points = rows.iter().map(|&(v, _)| self.vertices[v]).collect();
                    let masses = rows.iter().map(|&(_, m)| m).collect();
                    AtomicMeasure::new(points, masses).expect("validated at parse time")
                };
                Some(BalancedPair::new(collect(sources), collect(targets)))
            }
        }
    }

    /// Loads the referenced cost field; `base` anchors relative file paths.
    pub fn load_cost_field(&self, base: &Path) -> Result<Option<CostField>, FormatError> {
        match &self.cost_field {
            None => Ok(None),
            Some(CostFieldSpec::Constant(c0)) => {
                Ok(Some(CostField::constant(self.domain.clone(), *c0)?))
            }
            Some(CostFieldSpec::File(rel)) => {
                let mut path = PathBuf::from(rel);
                if path.is_relative() {
                    path = base.join(path);
                }
                Ok(Some(read_field_from_path(&path)?))
            }
        }
    }

    /// Builds the embedded library. Path edges need the cost field to price
    /// their traversal coefficient.
    pub fn build_graph(&self, field: Option<&CostField>) -> Result<EmbeddedGraph, FormatError> {
        let mut edges = Vec::with_capacity(self.edges.len());
        for (idx, raw) in self.edges.iter().enumerate() {
            let (path, beta) = match &raw.spec {
                EdgeSpec::Beta(b) => {
                    let path =
                        Polyline::new(vec![self.vertices[raw.tail], self.vertices[raw.head]])?;
                    (path, *b)
                }
                EdgeSpec::Path(points) => {
                    let field = field.ok_or_else(|| {
                        FormatError::Semantic(format!(
                            "edge {idx} uses a path but no cost field is given"
                        ))
                    })?;
                    let path = Polyline::new(points.clone())?;
                    let beta = field.edge_cost(&path, DEFAULT_N_SUB)?;
                    (path, beta)
                }
            };
            edges.push(Edge { tail: raw.tail, head: raw.head, path, beta });
        }
        Ok(EmbeddedGraph::new(self.vertices.clone(), edges, self.divergence_vector())?)
    }

    /// Materializes the marginal pair, validating the covariances.
    pub fn marginal_pair(&self) -> Result<Option<GaussianMarginalPair>, FormatError> {
        let Some(m) = &self.marginals else {
            return Ok(None);
        };
        let n = m.initial_mean.len();
        let state = |mean: &[f64], cov: &[f64]| -> Result<GaussianState, FormatError> {
            Ok(GaussianState::new(
                DVector::from_column_slice(mean),
                DMatrix::from_row_slice(n, n, cov),
            )?)
        };
        Ok(Some(GaussianMarginalPair::new(
            state(&m.initial_mean, &m.initial_cov)?,
            state(&m.terminal_mean, &m.terminal_cov)?,
            m.horizon,
        )?))
    }
}

// ---------------------------------------------------------------------------
// ROI score tables
// ---------------------------------------------------------------------------

/// One row of a ROI score table: a position plus stimulus/reaction scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTable {
    pub positions: Vec<Point>,
    pub stim_scores: Vec<f64>,
    pub react_scores: Vec<f64>,
    pub dim: usize,
}

impl RoiTable {
    /// Rows are `id x y [z] stim react` with dense ids; the dimension is
    /// inferred from the column count.
    pub fn parse_str(text: &str) -> Result<Self, FormatError> {
        let mut rows: Vec<Row> = Vec::new();
        let mut saw_header = false;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if !saw_header {
                if line != ROI_HEADER {
                    return Err(syntax(line_no, format!("expected header '{ROI_HEADER}'")));
                }
                saw_header = true;
                continue;
            }
            rows.push((line_no, line.split_whitespace().map(str::to_string).collect()));
        }
        if !saw_header {
            return Err(FormatError::Semantic(format!("empty file (expected '{ROI_HEADER}')")));
        }
        if rows.is_empty() {
            return Err(FormatError::Semantic("the ROI table has no rows".into()));
        }
        let dim = match rows[0].1.len() {
            5 => 2,
            6 => 3,
            other => {
                return Err(syntax(
                    rows[0].0,
                    format!("ROI rows take 5 (planar) or 6 (volumetric) columns, got {other}"),
                ))
            }
        };
        let n = rows.len();
        let mut positions = vec![None; n];
        let mut stim = vec![0.0; n];
        let mut react = vec![0.0; n];
        for (line, toks) in &rows {
            if toks.len() != 3 + dim {
                return Err(syntax(*line, "inconsistent column count"));
            }
            let id = parse_usize(&toks[0], *line)?;
            if id >= n || positions[id].is_some() {
                return Err(syntax(*line, format!("bad or duplicate ROI id {id}")));
            }
            positions[id] = Some(point_from(&toks[1..1 + dim], dim, *line)?);
            stim[id] = parse_f64(&toks[1 + dim], *line)?;
            react[id] = parse_f64(&toks[2 + dim], *line)?;
        }
        let positions = positions.into_iter().map(|p| p.expect("dense ids")).collect();
        Ok(Self { positions, stim_scores: stim, react_scores: react, dim })
    }

    pub fn parse_file(path: &Path) -> Result<Self, FormatError> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// ROI time series
// ---------------------------------------------------------------------------

/// Parses a `brmap-timeseries v1` file into a [`RoiTimeSeries`].
///
/// Keys: `dt <v>`, optional `baseline-window <t0> <t1>`, and per ROI a
/// `roi <id> <x> <y> [z]` row followed (anywhere) by `samples <id> <v...>`.
pub fn parse_timeseries_str(text: &str) -> Result<RoiTimeSeries, FormatError> {
    let mut dt: Option<f64> = None;
    let mut window: Option<(f64, f64)> = None;
    let mut rois: BTreeMap<usize, Point> = BTreeMap::new();
    let mut samples: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != TIMESERIES_HEADER {
                return Err(syntax(line_no, format!("expected header '{TIMESERIES_HEADER}'")));
            }
            saw_header = true;
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "dt" => {
                if toks.len() != 2 {
                    return Err(syntax(line_no, "'dt' takes one value"));
                }
                dt = Some(parse_f64(toks[1], line_no)?);
            }
            "baseline-window" => {
                if toks.len() != 3 {
                    return Err(syntax(line_no, "'baseline-window' takes two values"));
                }
                window = Some((parse_f64(toks[1], line_no)?, parse_f64(toks[2], line_no)?));
            }
            "roi" => {
                if toks.len() != 4 && toks.len() != 5 {
                    return Err(syntax(line_no, "'roi' rows are 'roi id x y [z]'"));
                }
                let id = parse_usize(toks[1], line_no)?;
                let vals: Vec<String> = toks[2..].iter().map(|s| s.to_string()).collect();
                let p = point_from(&vals, vals.len(), line_no)?;
                if rois.insert(id, p).is_some() {
                    return Err(syntax(line_no, format!("duplicate roi {id}")));
                }
            }
            "samples" => {
                if toks.len() < 3 {
                    return Err(syntax(line_no, "'samples' rows are 'samples id v...'"));
                }
                let id = parse_usize(toks[1], line_no)?;
                let vals: Vec<f64> = toks[2..]
                    .iter()
                    .map(|t| parse_f64(t, line_no))
                    .collect::<Result<_, _>>()?;
                if samples.insert(id, vals).is_some() {
                    return Err(syntax(line_no, format!("duplicate samples for roi {id}")));
                }
            }
            other => return Err(syntax(line_no, format!("unknown key '{other}'"))),
        }
    }
    let dt = dt.ok_or_else(|| FormatError::Semantic("time series needs 'dt'".into()))?;
    if rois.is_empty() {
        return Err(FormatError::Semantic("time series has no rois".into()));
    }
    if rois.keys().copied().ne(0..rois.len()) {
        return Err(FormatError::Semantic("roi ids must be dense 0..n".into()));
    }
    let mut positions = Vec::with_capacity(rois.len());
    let mut rows = Vec::with_capacity(rois.len());
    for (id, p) in &rois {
        positions.push(*p);
        rows.push(samples.remove(id).ok_or_else(|| {
            FormatError::Semantic(format!("roi {id} has no samples row"))
        })?);
    }
    if !samples.is_empty() {
        return Err(FormatError::Semantic("samples rows reference unknown rois".into()));
    }
    Ok(match window {
        Some(w) => RoiTimeSeries::with_baseline_window(positions, rows, dt, w)?,
        None => {
            let zeros = vec![0.0; rois.len()];
            RoiTimeSeries::new(positions, rows, dt, zeros)?
        }
    })
}

pub fn parse_timeseries_file(path: &Path) -> Result<RoiTimeSeries, FormatError> {
    parse_timeseries_str(&std::fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Measures artifact
// ---------------------------------------------------------------------------

/// Serializes an estimated stimulus/reaction pair with its balance report.
pub fn measures_to_string(pair: &BalancedPair) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MEASURES_HEADER}");
    for (name, m) in [("source", &pair.source), ("target", &pair.target)] {
        let _ = writeln!(out, "\n[{name}]");
        for (p, mass) in m.points().iter().zip(m.masses()) {
            let _ = writeln!(
                out,
                "{} {} {} {}",
                fmt_f64(p[0]),
                fmt_f64(p[1]),
                fmt_f64(p[2]),
                fmt_f64(*mass)
            );
        }
    }
    let report = pair.validate();
    let _ = writeln!(out, "\n[balance]");
    let _ = writeln!(out, "total-source {}", fmt_f64(pair.source.total_mass()));
    let _ = writeln!(out, "total-target {}", fmt_f64(pair.target.total_mass()));
    let _ = writeln!(out, "relative-mismatch {}", fmt_f64(report.relative_mismatch));
    let _ = writeln!(out, "pass {}", report.pass);
    out
}
