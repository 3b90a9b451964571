//! Grid-sampled scalar, tensor and directional fields.
//!
//! All grids interpolate multilinearly between nodes and extend past the grid
//! by clamping to the nearest node, which keeps values continuous and inside
//! the convex hull of the node values.

use nalgebra::DMatrix;

use super::CostFieldError;
use crate::geometry::Point;

/// Number of upper-triangle entries of a symmetric d-by-d matrix.
pub fn sym_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Shared node layout: `idx = ix + nx * (iy + ny * iz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeta {
    pub dim: usize,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: Point,
}

impl GridMeta {
    pub fn new(
        dim: usize,
        shape: &[usize],
        spacing: &[f64],
        origin: Point,
    ) -> Result<Self, CostFieldError> {
        if dim != 2 && dim != 3 {
            return Err(CostFieldError::InvalidField(format!("grid dim must be 2 or 3, got {dim}")));
        }
        if shape.len() != dim || spacing.len() != dim {
            return Err(CostFieldError::InvalidField("shape/spacing arity mismatch".into()));
        }
        let mut sh = [1usize; 3];
        let mut sp = [1.0f64; 3];
        for a in 0..dim {
            if shape[a] == 0 {
                return Err(CostFieldError::InvalidField("grid axis with zero nodes".into()));
            }
            if spacing[a] <= 0.0 || !spacing[a].is_finite() {
                return Err(CostFieldError::InvalidField("grid spacing must be positive".into()));
            }
            sh[a] = shape[a];
            sp[a] = spacing[a];
        }
        Ok(Self { dim, shape: sh, spacing: sp, origin })
    }

    pub fn n_nodes(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    fn node_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.shape[0] * (iy + self.shape[1] * iz)
    }

    /// Base node and fractional offset along one axis, clamped to the grid.
    fn locate(&self, axis: usize, coord: f64) -> (usize, f64) {
        let n = self.shape[axis];
        if n == 1 {
            return (0, 0.0);
        }
        let u = ((coord - self.origin[axis]) / self.spacing[axis]).clamp(0.0, (n - 1) as f64);
        let mut i = u.floor() as usize;
        if i > n - 2 {
            i = n - 2;
        }
        (i, u - i as f64)
    }

    /// Corner nodes and multilinear weights for a query point.
    pub fn corners(&self, p: &Point) -> Vec<(usize, f64)> {
        let (ix, fx) = self.locate(0, p[0]);
        let (iy, fy) = self.locate(1, p[1]);
        let (iz, fz) = if self.dim == 3 { self.locate(2, p[2]) } else { (0, 0.0) };
        let mut out = Vec::with_capacity(8);
        let axes = [(ix, fx, self.shape[0]), (iy, fy, self.shape[1]), (iz, fz, self.shape[2])];
        for corner in 0..8usize {
            let mut weight = 1.0;
            let mut idx3 = [0usize; 3];
            for (a, &(base, frac, n)) in axes.iter().enumerate() {
                let hi = (corner >> a) & 1 == 1;
                if hi {
                    if n == 1 {
                        weight = 0.0;
                        break;
                    }
                    weight *= frac;
                    idx3[a] = base + 1;
                } else {
                    weight *= 1.0 - frac;
                    idx3[a] = base;
                }
            }
            if weight > 0.0 {
                out.push((self.node_index(idx3[0], idx3[1], idx3[2]), weight));
            }
        }
        out
    }
}

/// Grid-sampled scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub meta: GridMeta,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(meta: GridMeta, values: Vec<f64>) -> Result<Self, CostFieldError> {
        if values.len() != meta.n_nodes() {
            return Err(CostFieldError::InvalidField(format!(
                "scalar grid expects {} values, got {}",
                meta.n_nodes(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CostFieldError::InvalidField("non-finite scalar grid value".into()));
        }
        Ok(Self { meta, values })
    }

    pub fn value(&self, p: &Point) -> f64 {
        self.meta
            .corners(p)
            .iter()
            .map(|&(idx, wgt)| wgt * self.values[idx])
            .sum()
    }

    pub fn min_node(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_node(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Grid-sampled symmetric matrix field, stored as upper triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    pub meta: GridMeta,
    /// `sym_len(dim)` entries per node, row-major upper triangle.
    pub values: Vec<f64>,
}

impl TensorGrid {
    pub fn new(meta: GridMeta, values: Vec<f64>) -> Result<Self, CostFieldError> {
        let expect = meta.n_nodes() * sym_len(meta.dim);
        if values.len() != expect {
            return Err(CostFieldError::InvalidField(format!(
                "tensor grid expects {expect} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CostFieldError::InvalidField("non-finite tensor grid value".into()));
        }
        Ok(Self { meta, values })
    }

    pub fn node_matrix(&self, node: usize) -> DMatrix<f64> {
        let d = self.meta.dim;
        let s = sym_len(d);
        let tri = &self.values[node * s..(node + 1) * s];
        let mut m = DMatrix::zeros(d, d);
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                m[(i, j)] = tri[k];
                m[(j, i)] = tri[k];
                k += 1;
            }
        }
        m
    }

    /// Multilinear interpolation of the full symmetric matrix.
    pub fn matrix(&self, p: &Point) -> DMatrix<f64> {
        let d = self.meta.dim;
        let s = sym_len(d);
        let mut tri = vec![0.0; s];
        for (idx, wgt) in self.meta.corners(p) {
            for (k, t) in tri.iter_mut().enumerate() {
                *t += wgt * self.values[idx * s + k];
            }
        }
        let mut m = DMatrix::zeros(d, d);
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                m[(i, j)] = tri[k];
                m[(j, i)] = tri[k];
                k += 1;
            }
        }
        m
    }

    /// Extreme eigenvalues over all nodes; interpolated tensors stay inside
    /// this range because the smallest eigenvalue is concave and the largest
    /// convex over symmetric matrices.
    pub fn node_eigen_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for node in 0..self.meta.n_nodes() {
            let eig = self.node_matrix(node).symmetric_eigenvalues();
            for &l in eig.iter() {
                lo = lo.min(l);
                hi = hi.max(l);
            }
        }
        (lo, hi)
    }
}

/// Plausibility samples over a position grid times a fixed codebook of unit
/// directions; lookup is nearest-direction then multilinear in position.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalGrid {
    pub meta: GridMeta,
    pub codebook: Vec<Point>,
    /// `n_nodes * codebook.len()` values, direction index fastest.
    pub values: Vec<f64>,
}

impl DirectionalGrid {
    pub fn new(
        meta: GridMeta,
        codebook: Vec<Point>,
        values: Vec<f64>,
    ) -> Result<Self, CostFieldError> {
        if codebook.is_empty() {
            return Err(CostFieldError::InvalidField("empty direction codebook".into()));
        }
        for d in &codebook {
            if (d.norm() - 1.0).abs() > 1e-9 {
                return Err(CostFieldError::InvalidField("codebook direction is not unit".into()));
            }
        }
        let expect = meta.n_nodes() * codebook.len();
        if values.len() != expect {
            return Err(CostFieldError::InvalidField(format!(
                "directional grid expects {expect} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CostFieldError::InvalidField(
                "plausibility values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { meta, codebook, values })
    }

    fn nearest_direction(&self, tau: &Point) -> usize {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (k, d) in self.codebook.iter().enumerate() {
            let dot = d.dot(tau);
            if dot > best_dot {
                best_dot = dot;
                best = k;
            }
        }
        best
    }

    pub fn value(&self, p: &Point, tau: &Point) -> f64 {
        let k = self.nearest_direction(tau);
        let nd = self.codebook.len();
        let v: f64 = self
            .meta
            .corners(p)
            .iter()
            .map(|&(idx, wgt)| wgt * self.values[idx * nd + k])
            .sum();
        v.clamp(0.0, 1.0)
    }
}
