//! Points, bounding boxes and unit tangents shared by every module.
//!
//! Coordinates are stored as 3-vectors; planar problems keep the third
//! component at zero and record `dim = 2` on the enclosing [`BoundingBox`].

use nalgebra::Vector3;

/// A point (or direction) in the ambient space.
pub type Point = Vector3<f64>;

/// Tolerance used when checking that a tangent has unit length.
pub const UNIT_TANGENT_TOL: f64 = 1e-9;

/// Axis-aligned bounding box of the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox {
    pub lo: Point,
    pub hi: Point,
    pub dim: usize,
}

impl BoundingBox {
    pub fn new(lo: Point, hi: Point, dim: usize) -> Self {
        assert!(dim == 2 || dim == 3, "domain dimension must be 2 or 3");
        Self { lo, hi, dim }
    }

    /// Unit box `[0,1]^dim`, convenient for tests and fixtures.
    pub fn unit(dim: usize) -> Self {
        Self::new(Point::zeros(), Point::new(1.0, 1.0, if dim == 3 { 1.0 } else { 0.0 }), dim)
    }

    /// Containment check with an absolute slack per coordinate.
    pub fn contains(&self, p: &Point, tol: f64) -> bool {
        (0..self.dim).all(|i| p[i] >= self.lo[i] - tol && p[i] <= self.hi[i] + tol)
    }

    /// Grow the box so that `p` fits inside.
    pub fn expand_to(&mut self, p: &Point) {
        for i in 0..3 {
            self.lo[i] = self.lo[i].min(p[i]);
            self.hi[i] = self.hi[i].max(p[i]);
        }
    }
}

/// Returns `true` when `tau` is a unit vector within [`UNIT_TANGENT_TOL`].
pub fn is_unit(tau: &Point) -> bool {
    (tau.norm() - 1.0).abs() <= UNIT_TANGENT_TOL
}
