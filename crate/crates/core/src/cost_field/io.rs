//! Binary serialization of cost fields.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic    8 bytes  "RMFIELD\0"
//! version  u8       currently 1
//! variant  u8       0 constant, 1 isotropic, 2 tensor, 3 mixed, 4 plausibility
//! dim      u8       2 or 3
//! reserved u8       0
//! c_lo     f64      declared lower bound
//! c_hi     f64      declared upper bound
//! bbox     2*dim f64  lower corner then upper corner
//! payload  variant-specific (see below)
//! ```
//!
//! Grids are encoded as `shape (dim u32), spacing (dim f64), origin (dim
//! f64), values (f64...)` with the node count implied by the shape. The
//! tensor variant stores the raw tensor samples; regularization is re-applied
//! on load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::grids::{sym_len, DirectionalGrid, GridMeta, ScalarGrid, TensorGrid};
use super::{CostField, CostFieldError};
use crate::geometry::{BoundingBox, Point};

pub const FIELD_MAGIC: &[u8; 8] = b"RMFIELD\0";
pub const FIELD_VERSION: u8 = 1;

const VARIANT_CONSTANT: u8 = 0;
const VARIANT_ISOTROPIC: u8 = 1;
const VARIANT_TENSOR: u8 = 2;
const VARIANT_MIXED: u8 = 3;
const VARIANT_PLAUSIBILITY: u8 = 4;

fn variant_tag(field: &CostField) -> u8 {
    match field {
        CostField::Constant { .. } => VARIANT_CONSTANT,
        CostField::Isotropic { .. } => VARIANT_ISOTROPIC,
        CostField::Tensor { .. } => VARIANT_TENSOR,
        CostField::Mixed { .. } => VARIANT_MIXED,
        CostField::Plausibility { .. } => VARIANT_PLAUSIBILITY,
    }
}

fn write_point(w: &mut impl Write, p: &Point, dim: usize) -> std::io::Result<()> {
    for a in 0..dim {
        w.write_f64::<LittleEndian>(p[a])?;
    }
    Ok(())
}

fn read_point(r: &mut impl Read, dim: usize) -> std::io::Result<Point> {
    let mut p = Point::zeros();
    for a in 0..dim {
        p[a] = r.read_f64::<LittleEndian>()?;
    }
    Ok(p)
}

fn write_meta(w: &mut impl Write, meta: &GridMeta) -> std::io::Result<()> {
    for a in 0..meta.dim {
        w.write_u32::<LittleEndian>(meta.shape[a] as u32)?;
    }
    for a in 0..meta.dim {
        w.write_f64::<LittleEndian>(meta.spacing[a])?;
    }
    write_point(w, &meta.origin, meta.dim)
}

fn read_meta(r: &mut impl Read, dim: usize) -> Result<GridMeta, CostFieldError> {
    let mut shape = Vec::with_capacity(dim);
    for _ in 0..dim {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let mut spacing = Vec::with_capacity(dim);
    for _ in 0..dim {
        spacing.push(r.read_f64::<LittleEndian>()?);
    }
    let origin = read_point(r, dim)?;
    GridMeta::new(dim, &shape, &spacing, origin)
}

fn write_values(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_values(r: &mut impl Read, count: usize) -> Result<Vec<f64>, CostFieldError> {
    // Guard against absurd counts from corrupt headers before allocating.
    if count > (1 << 28) {
        return Err(CostFieldError::Format(format!("value count {count} exceeds limit")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(r.read_f64::<LittleEndian>()?);
    }
    Ok(out)
}

fn write_scalar_grid(w: &mut impl Write, g: &ScalarGrid) -> std::io::Result<()> {
    write_meta(w, &g.meta)?;
    write_values(w, &g.values)
}

fn read_scalar_grid(r: &mut impl Read, dim: usize) -> Result<ScalarGrid, CostFieldError> {
    let meta = read_meta(r, dim)?;
    let values = read_values(r, meta.n_nodes())?;
    ScalarGrid::new(meta, values)
}

fn write_tensor_grid(w: &mut impl Write, g: &TensorGrid) -> std::io::Result<()> {
    write_meta(w, &g.meta)?;
    write_values(w, &g.values)
}

fn read_tensor_grid(r: &mut impl Read, dim: usize) -> Result<TensorGrid, CostFieldError> {
    let meta = read_meta(r, dim)?;
    let values = read_values(r, meta.n_nodes() * sym_len(dim))?;
    TensorGrid::new(meta, values)
}

/// Serializes a cost field to a writer.
pub fn write_field(field: &CostField, w: &mut impl Write) -> Result<(), CostFieldError> {
    let domain = field.domain();
    let dim = domain.dim;
    let (c_lo, c_hi) = field.bounds();
    w.write_all(FIELD_MAGIC)?;
    w.write_u8(FIELD_VERSION)?;
    w.write_u8(variant_tag(field))?;
    w.write_u8(dim as u8)?;
    w.write_u8(0)?;
    w.write_f64::<LittleEndian>(c_lo)?;
    w.write_f64::<LittleEndian>(c_hi)?;
    write_point(w, &domain.lo, dim)?;
    write_point(w, &domain.hi, dim)?;
    match field {
        CostField::Constant { c0, .. } => {
            w.write_f64::<LittleEndian>(*c0)?;
        }
        CostField::Isotropic { white_matter, c_min, c_max, .. } => {
            w.write_f64::<LittleEndian>(*c_min)?;
            w.write_f64::<LittleEndian>(*c_max)?;
            write_scalar_grid(w, white_matter)?;
        }
        CostField::Tensor { tensor, epsilon, .. } => {
            w.write_f64::<LittleEndian>(*epsilon)?;
            write_tensor_grid(w, tensor)?;
        }
        CostField::Mixed { scale, offset, metric, .. } => {
            write_scalar_grid(w, scale)?;
            write_scalar_grid(w, offset)?;
            write_tensor_grid(w, metric)?;
        }
        CostField::Plausibility { plausibility, .. } => {
            write_meta(w, &plausibility.meta)?;
            w.write_u32::<LittleEndian>(plausibility.codebook.len() as u32)?;
            for d in &plausibility.codebook {
                write_point(w, d, dim)?;
            }
            write_values(w, &plausibility.values)?;
        }
    }
    Ok(())
}

/// Deserializes a cost field, re-running all construction-time validation.
pub fn read_field(r: &mut impl Read) -> Result<CostField, CostFieldError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FIELD_MAGIC {
        return Err(CostFieldError::Format("bad magic, not a field file".into()));
    }
    let version = r.read_u8()?;
    if version != FIELD_VERSION {
        return Err(CostFieldError::Format(format!("unsupported field version {version}")));
    }
    let variant = r.read_u8()?;
    let dim = r.read_u8()? as usize;
    if dim != 2 && dim != 3 {
        return Err(CostFieldError::Format(format!("bad dimension {dim}")));
    }
    let _reserved = r.read_u8()?;
    let c_lo = r.read_f64::<LittleEndian>()?;
    let c_hi = r.read_f64::<LittleEndian>()?;
    let lo = read_point(r, dim)?;
    let hi = read_point(r, dim)?;
    if (0..dim).any(|a| lo[a] > hi[a] || !lo[a].is_finite() || !hi[a].is_finite()) {
        return Err(CostFieldError::Format("bounding box corners are not ordered".into()));
    }
    let domain = BoundingBox::new(lo, hi, dim);
    match variant {
        VARIANT_CONSTANT => {
            let c0 = r.read_f64::<LittleEndian>()?;
            CostField::constant(domain, c0)
        }
        VARIANT_ISOTROPIC => {
            let c_min = r.read_f64::<LittleEndian>()?;
            let c_max = r.read_f64::<LittleEndian>()?;
            let grid = read_scalar_grid(r, dim)?;
            CostField::isotropic(domain, grid, c_min, c_max)
        }
        VARIANT_TENSOR => {
            let epsilon = r.read_f64::<LittleEndian>()?;
            let grid = read_tensor_grid(r, dim)?;
            CostField::tensor(domain, grid, epsilon)
        }
        VARIANT_MIXED => {
            let scale = read_scalar_grid(r, dim)?;
            let offset = read_scalar_grid(r, dim)?;
            let metric = read_tensor_grid(r, dim)?;
            CostField::mixed(domain, scale, offset, metric)
        }
        VARIANT_PLAUSIBILITY => {
            let meta = read_meta(r, dim)?;
            let n_dirs = r.read_u32::<LittleEndian>()? as usize;
            if n_dirs == 0 || n_dirs > (1 << 20) {
                return Err(CostFieldError::Format(format!("bad codebook size {n_dirs}")));
            }
            let mut codebook = Vec::with_capacity(n_dirs);
            for _ in 0..n_dirs {
                codebook.push(read_point(r, dim)?);
            }
            let values = read_values(r, meta.n_nodes() * n_dirs)?;
            let grid = DirectionalGrid::new(meta, codebook, values)?;
            CostField::plausibility(domain, grid, c_lo, c_hi)
        }
        other => Err(CostFieldError::Format(format!("unknown field variant {other}"))),
    }
}

pub fn write_field_to_path(field: &CostField, path: &Path) -> Result<(), CostFieldError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_field(field, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_field_from_path(path: &Path) -> Result<CostField, CostFieldError> {
    let mut r = BufReader::new(File::open(path)?);
    read_field(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn square() -> BoundingBox {
        BoundingBox::unit(2)
    }

    fn meta_2x2() -> GridMeta {
        GridMeta::new(2, &[2, 2], &[1.0, 1.0], Point::zeros()).unwrap()
    }

    fn roundtrip(field: &CostField) -> CostField {
        let mut buf = Vec::new();
        write_field(field, &mut buf).unwrap();
        read_field(&mut buf.as_slice()).unwrap()
    }

    #[test]
    fn constant_roundtrip_is_exact() {
        let f = CostField::constant(square(), 2.25).unwrap();
        assert_eq!(roundtrip(&f), f);
    }

    #[test]
    fn isotropic_roundtrip_is_exact() {
        let g = ScalarGrid::new(meta_2x2(), vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let f = CostField::isotropic(square(), g, 0.5, 3.0).unwrap();
        assert_eq!(roundtrip(&f), f);
    }

    #[test]
    fn tensor_roundtrip_preserves_raw_samples_and_evaluations() {
        let mut vals = Vec::new();
        for node in 0..4 {
            let t = node as f64;
            vals.extend_from_slice(&[1.0 + t, 0.05 * t, 2.0]);
        }
        let g = TensorGrid::new(meta_2x2(), vals).unwrap();
        let f = CostField::tensor(square(), g, 0.1).unwrap();
        let back = roundtrip(&f);
        assert_eq!(back, f);
        let p = Point::new(0.3, 0.6, 0.0);
        let tau = Point::new(0.6, 0.8, 0.0);
        assert_abs_diff_eq!(
            back.eval(&p, &tau).unwrap(),
            f.eval(&p, &tau).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn mixed_and_plausibility_roundtrip() {
        let a = ScalarGrid::new(meta_2x2(), vec![1.0, 2.0, 1.5, 1.25]).unwrap();
        let b = ScalarGrid::new(meta_2x2(), vec![0.5; 4]).unwrap();
        let mut vals = Vec::new();
        for _ in 0..4 {
            vals.extend_from_slice(&[2.0, 0.1, 1.0]);
        }
        let m = TensorGrid::new(meta_2x2(), vals).unwrap();
        let f = CostField::mixed(square(), a, b, m).unwrap();
        assert_eq!(roundtrip(&f), f);

        let meta = GridMeta::new(2, &[2, 2], &[1.0, 1.0], Point::zeros()).unwrap();
        let codebook = vec![Point::new(1.0, 0.0, 0.0), Point::new(0.0, 1.0, 0.0)];
        let g = DirectionalGrid::new(meta, codebook, vec![0.1; 8]).unwrap();
        let f = CostField::plausibility(square(), g, 0.5, 3.0).unwrap();
        assert_eq!(roundtrip(&f), f);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let f = CostField::constant(square(), 1.0).unwrap();
        let mut buf = Vec::new();
        write_field(&f, &mut buf).unwrap();
        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(matches!(
            read_field(&mut corrupt.as_slice()),
            Err(CostFieldError::Format(_))
        ));
        let mut wrong_version = buf.clone();
        wrong_version[8] = 99;
        assert!(matches!(
            read_field(&mut wrong_version.as_slice()),
            Err(CostFieldError::Format(_))
        ));
    }

    #[test]
    fn truncated_file_reports_io_error() {
        let f = CostField::constant(square(), 1.0).unwrap();
        let mut buf = Vec::new();
        write_field(&f, &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(matches!(read_field(&mut buf.as_slice()), Err(CostFieldError::Io(_))));
    }

    #[test]
    fn file_roundtrip_via_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.rmf");
        let g = ScalarGrid::new(meta_2x2(), vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let f = CostField::isotropic(square(), g, 1.0, 2.0).unwrap();
        write_field_to_path(&f, &path).unwrap();
        assert_eq!(read_field_from_path(&path).unwrap(), f);
    }
}
