//! Anatomical cost fields `c(x, tau)` and polyline edge costs.
//!
//! A cost field assigns a positive traversal cost to every point of the
//! domain and unit direction; all variants are sandwiched between declared
//! bounds `0 < c_lo <= c(x, tau) <= c_hi`. Edge costs integrate the field
//! along an embedded polyline with a composite midpoint rule.

mod grids;
mod io;

pub use grids::{DirectionalGrid, GridMeta, ScalarGrid, TensorGrid};
pub use io::{read_field, read_field_from_path, write_field, write_field_to_path};

use nalgebra::DMatrix;
use thiserror::Error;

use crate::geometry::{is_unit, BoundingBox, Point, UNIT_TANGENT_TOL};

/// Default number of midpoint sub-intervals per polyline segment.
pub const DEFAULT_N_SUB: usize = 16;

/// Consecutive polyline points closer than this are considered coincident.
pub const MIN_SEGMENT_LENGTH: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CostFieldError {
    #[error("tangent must be a unit vector in the domain plane (|tau| = {norm})")]
    NonUnitTangent { norm: f64 },
    #[error("query point ({x}, {y}, {z}) lies outside the field domain")]
    OutOfDomain { x: f64, y: f64, z: f64 },
    #[error("polyline is degenerate: {0}")]
    DegeneratePath(String),
    #[error("invalid field data: {0}")]
    InvalidField(String),
    #[error("field i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed field file: {0}")]
    Format(String),
}

/// Piecewise-linear embedded path with cached segment lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Point>,
    seg_lengths: Vec<f64>,
    total_length: f64,
}

impl Polyline {
    pub fn new(points: Vec<Point>) -> Result<Self, CostFieldError> {
        if points.len() < 2 {
            return Err(CostFieldError::DegeneratePath(
                "a polyline needs at least two points".into(),
            ));
        }
        let mut seg_lengths = Vec::with_capacity(points.len() - 1);
        for pair in points.windows(2) {
            let len = (pair[1] - pair[0]).norm();
            if len <= MIN_SEGMENT_LENGTH {
                return Err(CostFieldError::DegeneratePath(
                    "consecutive polyline points coincide".into(),
                ));
            }
            seg_lengths.push(len);
        }
        let total_length = seg_lengths.iter().sum();
        Ok(Self { points, seg_lengths, total_length })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn n_segments(&self) -> usize {
        self.seg_lengths.len()
    }

    pub fn segment_length(&self, i: usize) -> f64 {
        self.seg_lengths[i]
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn first(&self) -> Point {
        self.points[0]
    }

    pub fn last(&self) -> Point {
        *self.points.last().expect("polyline has points")
    }

    /// Unit tangent of segment `i`.
    pub fn tangent(&self, i: usize) -> Point {
        (self.points[i + 1] - self.points[i]) / self.seg_lengths[i]
    }

    pub fn reversed(&self) -> Polyline {
        let mut points = self.points.clone();
        points.reverse();
        let mut seg_lengths = self.seg_lengths.clone();
        seg_lengths.reverse();
        Polyline { points, seg_lengths, total_length: self.total_length }
    }

    /// Optional diagnostic: reports whether any two vertices coincide.
    /// Injectivity of the embedding is otherwise not enforced.
    pub fn has_repeated_vertices(&self) -> bool {
        for i in 0..self.points.len() {
            for j in i + 1..self.points.len() {
                if (self.points[i] - self.points[j]).norm() <= MIN_SEGMENT_LENGTH {
                    return true;
                }
            }
        }
        false
    }
}

/// Anatomical cost density over a box domain.
///
/// Variants trade anatomical fidelity for data requirements; all expose the
/// same point evaluation and declared positive bounds.
#[derive(Debug, Clone, PartialEq)]
pub enum CostField {
    /// Homogeneous medium: `c = c0`.
    Constant { domain: BoundingBox, c0: f64 },
    /// Direction-independent slowdown outside highly conductive tissue:
    /// `c = c_min + (c_max - c_min) * (1 - w(x))` with `w` in `[0, 1]`.
    Isotropic { domain: BoundingBox, white_matter: ScalarGrid, c_min: f64, c_max: f64 },
    /// Riemannian cost from a diffusion-like tensor field:
    /// `c = sqrt(tau' (D(x) + eps I)^-1 tau)`. The grid stores the raw `D`
    /// samples; regularization is added after interpolation.
    Tensor { domain: BoundingBox, tensor: TensorGrid, epsilon: f64, c_lo: f64, c_hi: f64 },
    /// Affinely modulated metric: `c = a(x) sqrt(tau' A(x) tau) + b(x)` with
    /// `a, b > 0` and `A` uniformly positive definite.
    Mixed {
        domain: BoundingBox,
        scale: ScalarGrid,
        offset: ScalarGrid,
        metric: TensorGrid,
        c_lo: f64,
        c_hi: f64,
    },
    /// Learned directional plausibility `p(x, tau)` in `[0, 1]`:
    /// `c = c_lo + (c_hi - c_lo) * (1 - p(x, tau))`.
    Plausibility { domain: BoundingBox, plausibility: DirectionalGrid, c_lo: f64, c_hi: f64 },
}

impl CostField {
    pub fn constant(domain: BoundingBox, c0: f64) -> Result<Self, CostFieldError> {
        if c0 <= 0.0 || !c0.is_finite() {
            return Err(CostFieldError::InvalidField("constant cost must be positive".into()));
        }
        Ok(CostField::Constant { domain, c0 })
    }

    pub fn isotropic(
        domain: BoundingBox,
        white_matter: ScalarGrid,
        c_min: f64,
        c_max: f64,
    ) -> Result<Self, CostFieldError> {
        if !(c_min > 0.0 && c_max >= c_min) {
            return Err(CostFieldError::InvalidField(
                "isotropic bounds need 0 < c_min <= c_max".into(),
            ));
        }
        if white_matter.meta.dim != domain.dim {
            return Err(CostFieldError::InvalidField("grid/domain dimension mismatch".into()));
        }
        let (lo, hi) = (white_matter.min_node(), white_matter.max_node());
        if lo < 0.0 || hi > 1.0 {
            return Err(CostFieldError::InvalidField(
                "white-matter scores must lie in [0, 1]".into(),
            ));
        }
        Ok(CostField::Isotropic { domain, white_matter, c_min, c_max })
    }

    /// Builds the tensor variant, regularizing `D <- D + eps I` and checking
    /// the regularized tensor is positive definite at every node.
    pub fn tensor(
        domain: BoundingBox,
        tensor: TensorGrid,
        epsilon: f64,
    ) -> Result<Self, CostFieldError> {
        if epsilon <= 0.0 || !epsilon.is_finite() {
            return Err(CostFieldError::InvalidField("tensor epsilon must be positive".into()));
        }
        if tensor.meta.dim != domain.dim {
            return Err(CostFieldError::InvalidField("grid/domain dimension mismatch".into()));
        }
        let (eig_lo, eig_hi) = tensor.node_eigen_range();
        // The regularized node tensors must keep eigenvalues >= epsilon,
        // i.e. every raw sample must be positive semidefinite.
        if eig_lo + epsilon < epsilon - 1e-12 * (1.0 + eig_hi.abs()) {
            return Err(CostFieldError::InvalidField(
                "tensor samples must be positive semidefinite".into(),
            ));
        }
        // c(x, tau) = sqrt(tau' M^-1 tau) for unit tau lies between the
        // reciprocal square roots of the extreme eigenvalues of M = D + eps I.
        let c_lo = 1.0 / (eig_hi + epsilon).sqrt();
        let c_hi = 1.0 / (eig_lo.max(0.0) + epsilon).sqrt();
        Ok(CostField::Tensor { domain, tensor, epsilon, c_lo, c_hi })
    }

    pub fn mixed(
        domain: BoundingBox,
        scale: ScalarGrid,
        offset: ScalarGrid,
        metric: TensorGrid,
    ) -> Result<Self, CostFieldError> {
        for grid_dim in [scale.meta.dim, offset.meta.dim, metric.meta.dim] {
            if grid_dim != domain.dim {
                return Err(CostFieldError::InvalidField("grid/domain dimension mismatch".into()));
            }
        }
        if scale.min_node() <= 0.0 || offset.min_node() <= 0.0 {
            return Err(CostFieldError::InvalidField(
                "mixed variant needs strictly positive scale and offset".into(),
            ));
        }
        let (eig_lo, eig_hi) = metric.node_eigen_range();
        if eig_lo <= 0.0 {
            return Err(CostFieldError::InvalidField(
                "mixed metric must be uniformly positive definite".into(),
            ));
        }
        let c_lo = scale.min_node() * eig_lo.sqrt() + offset.min_node();
        let c_hi = scale.max_node() * eig_hi.sqrt() + offset.max_node();
        Ok(CostField::Mixed { domain, scale, offset, metric, c_lo, c_hi })
    }

    pub fn plausibility(
        domain: BoundingBox,
        plausibility: DirectionalGrid,
        c_lo: f64,
        c_hi: f64,
    ) -> Result<Self, CostFieldError> {
        if !(c_lo > 0.0 && c_hi >= c_lo) {
            return Err(CostFieldError::InvalidField(
                "plausibility bounds need 0 < c_lo <= c_hi".into(),
            ));
        }
        if plausibility.meta.dim != domain.dim {
            return Err(CostFieldError::InvalidField("grid/domain dimension mismatch".into()));
        }
        Ok(CostField::Plausibility { domain, plausibility, c_lo, c_hi })
    }

    pub fn domain(&self) -> &BoundingBox {
        match self {
            CostField::Constant { domain, .. }
            | CostField::Isotropic { domain, .. }
            | CostField::Tensor { domain, .. }
            | CostField::Mixed { domain, .. }
            | CostField::Plausibility { domain, .. } => domain,
        }
    }

    /// Declared positive bounds `(c_lo, c_hi)` that sandwich every evaluation.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            CostField::Constant { c0, .. } => (*c0, *c0),
            CostField::Isotropic { c_min, c_max, .. } => (*c_min, *c_max),
            CostField::Tensor { c_lo, c_hi, .. }
            | CostField::Mixed { c_lo, c_hi, .. }
            | CostField::Plausibility { c_lo, c_hi, .. } => (*c_lo, *c_hi),
        }
    }

    /// Evaluates the cost density at position `x` and unit direction `tau`.
    pub fn eval(&self, x: &Point, tau: &Point) -> Result<f64, CostFieldError> {
        let domain = self.domain();
        if !is_unit(tau) || (domain.dim == 2 && tau[2].abs() > UNIT_TANGENT_TOL) {
            return Err(CostFieldError::NonUnitTangent { norm: tau.norm() });
        }
        if !domain.contains(x, 1e-9) {
            return Err(CostFieldError::OutOfDomain { x: x[0], y: x[1], z: x[2] });
        }
        Ok(match self {
            CostField::Constant { c0, .. } => *c0,
            CostField::Isotropic { white_matter, c_min, c_max, .. } => {
                let w = white_matter.value(x).clamp(0.0, 1.0);
                c_min + (c_max - c_min) * (1.0 - w)
            }
            CostField::Tensor { tensor, epsilon, .. } => {
                let mut m = tensor.matrix(x);
                for i in 0..m.nrows() {
                    m[(i, i)] += *epsilon;
                }
                inverse_quadratic_form(&m, tau).sqrt()
            }
            CostField::Mixed { scale, offset, metric, .. } => {
                let a = metric.matrix(x);
                let q = quadratic_form(&a, tau);
                scale.value(x) * q.sqrt() + offset.value(x)
            }
            CostField::Plausibility { plausibility, c_lo, c_hi, .. } => {
                let p = plausibility.value(x, tau);
                c_lo + (c_hi - c_lo) * (1.0 - p)
            }
        })
    }

    /// Composite midpoint approximation of the anisotropic length
    /// `integral of c(gamma(s), gamma'(s)) ds` along a polyline.
    ///
    /// Each straight segment has constant tangent and is split into `n_sub`
    /// equal sub-intervals sampled at their midpoints.
    pub fn edge_cost(&self, path: &Polyline, n_sub: usize) -> Result<f64, CostFieldError> {
        if n_sub == 0 {
            return Err(CostFieldError::InvalidField("n_sub must be at least 1".into()));
        }
        let mut total = 0.0;
        for seg in 0..path.n_segments() {
            let p0 = path.points()[seg];
            let p1 = path.points()[seg + 1];
            let len = path.segment_length(seg);
            let tau = path.tangent(seg);
            let h = 1.0 / n_sub as f64;
            let mut seg_sum = 0.0;
            for k in 0..n_sub {
                let t = (k as f64 + 0.5) * h;
                let x = p0 + (p1 - p0) * t;
                seg_sum += self.eval(&x, &tau)?;
            }
            total += seg_sum * h * len;
        }
        Ok(total)
    }
}

fn quadratic_form(m: &DMatrix<f64>, tau: &Point) -> f64 {
    let d = m.nrows();
    let t = nalgebra::DVector::from_fn(d, |i, _| tau[i]);
    (t.transpose() * m * &t)[(0, 0)]
}

/// `tau' M^-1 tau` via Cholesky; `M` is positive definite by construction.
fn inverse_quadratic_form(m: &DMatrix<f64>, tau: &Point) -> f64 {
    let d = m.nrows();
    let t = nalgebra::DVector::from_fn(d, |i, _| tau[i]);
    let chol = m.clone().cholesky().expect("regularized tensor is positive definite");
    t.dot(&chol.solve(&t))
}
