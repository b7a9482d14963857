//! Geometry maps from the parametric cube to the physical domain, and the
//! pulled-back coefficient grids that assembly consumes.
//!
//! The mass integrand carries c = det(DF) (times an optional reaction
//! coefficient evaluated in physical coordinates), the stiffness integrand
//! the matrix c_{l,m} = [DF^-1 DF^-T]_{l,m} det(DF), computed per point via
//! the adjugate so only one division by det is ever needed.

use std::fmt;
use std::io;
use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use thiserror::Error;

use crate::bspline::{KnotError, KnotVector, LocalBasis, SplineSpace};
use crate::tensor::DenseTensor;

type PointFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
pub enum GeometryMap {
    /// Maps every point to itself; unit Jacobian.
    Identity { dim: usize },
    /// Tensor-product spline map. Control points are stored flat and
    /// point-major: coordinates of function `i` occupy
    /// `control_points[i*dim .. (i+1)*dim]`, with `i` in the same
    /// direction-0-fastest linearization the spaces use.
    Spline {
        space: SplineSpace,
        control_points: Vec<f64>,
    },
    /// Closed-form map for geometries that are not splines. Both closures
    /// receive the parametric point; `jac` writes the row-major d x d matrix
    /// of partials (row = physical coordinate, column = parametric
    /// direction).
    Callable {
        dim: usize,
        map: Arc<PointFn>,
        jac: Arc<PointFn>,
    },
}

impl fmt::Debug for GeometryMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity { dim } => write!(f, "GeometryMap::Identity {{ dim: {dim} }}"),
            Self::Spline { space, control_points } => f
                .debug_struct("GeometryMap::Spline")
                .field("dim", &space.dim())
                .field("control_points", &(control_points.len() / space.dim()))
                .finish(),
            Self::Callable { dim, .. } => {
                write!(f, "GeometryMap::Callable {{ dim: {dim}, .. }}")
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error(
        "geometry map is degenerate: Jacobian determinant {det:.3e} at parametric point {location:?}"
    )]
    DegenerateGeometry { det: f64, location: Vec<f64> },
    #[error("I/O: {0}")]
    Io(#[from] io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Knot(#[from] KnotError),
    #[error("bad geometry file: {0}")]
    BadGeometryFile(String),
}

#[derive(Deserialize)]
struct GeometryFile {
    degrees: Vec<usize>,
    knots: Vec<Vec<f64>>,
    control_points: Vec<Vec<f64>>,
}

impl GeometryMap {
    pub fn identity(dim: usize) -> Self {
        assert!((1..=3).contains(&dim));
        Self::Identity { dim }
    }

    pub fn spline(space: SplineSpace, control_points: Vec<f64>) -> Self {
        assert_eq!(
            control_points.len(),
            space.num_functions() * space.dim(),
            "need one d-vector per basis function"
        );
        Self::Spline { space, control_points }
    }

    pub fn callable(
        dim: usize,
        map: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        jac: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        assert!((1..=3).contains(&dim));
        Self::Callable {
            dim,
            map: Arc::new(map),
            jac: Arc::new(jac),
        }
    }

    /// The affine map x -> Ax + shift as a degree-1 spline with one span per
    /// direction (corner control points). `a` is row-major d x d.
    pub fn affine(dim: usize, a: &[f64], shift: &[f64]) -> Self {
        assert_eq!(a.len(), dim * dim);
        assert_eq!(shift.len(), dim);
        let kv = KnotVector::from_breakpoints(1, &[0.0, 1.0]).unwrap();
        let space = SplineSpace::new(vec![kv; dim]);
        let mut cps = Vec::with_capacity(space.num_functions() * dim);
        for corner in 0..space.num_functions() {
            let multi = space.multi_index(corner);
            for r in 0..dim {
                let mut x = shift[r];
                for (c, &bit) in multi.iter().enumerate() {
                    x += a[r * dim + c] * bit as f64;
                }
                cps.push(x);
            }
        }
        Self::Spline { space, control_points: cps }
    }

    /// Reads a spline geometry from JSON: per-direction degrees and knot
    /// vectors plus one control point (length-d array) per basis function in
    /// linearization order.
    pub fn from_json_file(path: &Path) -> Result<Self, GeometryError> {
        let file: GeometryFile = serde_json::from_reader(io::BufReader::new(
            std::fs::File::open(path)?,
        ))?;
        let dim = file.degrees.len();
        if !(1..=3).contains(&dim) {
            return Err(GeometryError::BadGeometryFile(format!(
                "got {dim} degrees, supported dimensions are 1..=3"
            )));
        }
        if file.knots.len() != dim {
            return Err(GeometryError::BadGeometryFile(format!(
                "{dim} degrees but {} knot vectors",
                file.knots.len()
            )));
        }
        let mut dirs = Vec::with_capacity(dim);
        for (degree, knots) in file.degrees.iter().zip(file.knots) {
            dirs.push(KnotVector::from_knots(*degree, knots)?);
        }
        let space = SplineSpace::new(dirs);
        if file.control_points.len() != space.num_functions() {
            return Err(GeometryError::BadGeometryFile(format!(
                "space has {} functions but {} control points given",
                space.num_functions(),
                file.control_points.len()
            )));
        }
        let mut flat = Vec::with_capacity(space.num_functions() * dim);
        for (i, point) in file.control_points.iter().enumerate() {
            if point.len() != dim {
                return Err(GeometryError::BadGeometryFile(format!(
                    "control point {i} has {} coordinates, expected {dim}",
                    point.len()
                )));
            }
            flat.extend_from_slice(point);
        }
        Ok(Self::Spline { space, control_points: flat })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Identity { dim } | Self::Callable { dim, .. } => *dim,
            Self::Spline { space, .. } => space.dim(),
        }
    }

    /// Physical image of a parametric point.
    pub fn map_at(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        assert_eq!(x.len(), d);
        match self {
            Self::Identity { .. } => x.to_vec(),
            Self::Callable { map, .. } => {
                let mut out = vec![0.0; d];
                map(x, &mut out);
                out
            }
            Self::Spline { space, control_points } => {
                let locals: Vec<LocalBasis> =
                    (0..d).map(|l| space.dir(l).nonzero_at(x[l])).collect();
                let refs: Vec<&LocalBasis> = locals.iter().collect();
                spline_point(space, control_points, &refs)
            }
        }
    }

    /// Row-major d x d Jacobian at a parametric point.
    pub fn jacobian_at(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        assert_eq!(x.len(), d);
        match self {
            Self::Identity { .. } => {
                let mut eye = vec![0.0; d * d];
                for r in 0..d {
                    eye[r * d + r] = 1.0;
                }
                eye
            }
            Self::Callable { jac, .. } => {
                let mut out = vec![0.0; d * d];
                jac(x, &mut out);
                out
            }
            Self::Spline { space, control_points } => {
                let locals: Vec<LocalBasis> =
                    (0..d).map(|l| space.dir(l).nonzero_at(x[l])).collect();
                let refs: Vec<&LocalBasis> = locals.iter().collect();
                spline_jacobian(space, control_points, &refs)
            }
        }
    }
}

fn spline_point(space: &SplineSpace, cps: &[f64], locals: &[&LocalBasis]) -> Vec<f64> {
    let d = space.dim();
    let mut out = vec![0.0; d];
    let mut local_multi = vec![0usize; d];
    'outer: loop {
        let mut weight = 1.0;
        let mut multi = Vec::with_capacity(d);
        for l in 0..d {
            weight *= locals[l].values[local_multi[l]];
            multi.push(locals[l].first + local_multi[l]);
        }
        let g = space.linear_index(&multi);
        for r in 0..d {
            out[r] += weight * cps[g * d + r];
        }
        for l in 0..d {
            local_multi[l] += 1;
            if local_multi[l] < locals[l].values.len() {
                continue 'outer;
            }
            local_multi[l] = 0;
        }
        break;
    }
    out
}

fn spline_jacobian(space: &SplineSpace, cps: &[f64], locals: &[&LocalBasis]) -> Vec<f64> {
    let d = space.dim();
    let mut jac = vec![0.0; d * d];
    let mut local_multi = vec![0usize; d];
    'outer: loop {
        let mut multi = Vec::with_capacity(d);
        for l in 0..d {
            multi.push(locals[l].first + local_multi[l]);
        }
        let g = space.linear_index(&multi);
        for c in 0..d {
            let mut weight = 1.0;
            for l in 0..d {
                let lb = locals[l];
                weight *= if l == c {
                    lb.derivs[local_multi[l]]
                } else {
                    lb.values[local_multi[l]]
                };
            }
            for r in 0..d {
                jac[r * d + c] += weight * cps[g * d + r];
            }
        }
        for l in 0..d {
            local_multi[l] += 1;
            if local_multi[l] < locals[l].values.len() {
                continue 'outer;
            }
            local_multi[l] = 0;
        }
        break;
    }
    jac
}

/// Determinant of a row-major d x d matrix, d <= 3.
pub fn det_small(j: &[f64], d: usize) -> f64 {
    match d {
        1 => j[0],
        2 => j[0] * j[3] - j[1] * j[2],
        3 => {
            j[0] * (j[4] * j[8] - j[5] * j[7]) - j[1] * (j[3] * j[8] - j[5] * j[6])
                + j[2] * (j[3] * j[7] - j[4] * j[6])
        }
        _ => panic!("unsupported dimension {d}"),
    }
}

/// Adjugate (transposed cofactors) of a row-major d x d matrix, d <= 3:
/// J * adj(J) = det(J) * I.
pub fn adjugate_small(j: &[f64], d: usize, adj: &mut [f64]) {
    match d {
        1 => adj[0] = 1.0,
        2 => {
            adj[0] = j[3];
            adj[1] = -j[1];
            adj[2] = -j[2];
            adj[3] = j[0];
        }
        3 => {
            adj[0] = j[4] * j[8] - j[5] * j[7];
            adj[1] = j[2] * j[7] - j[1] * j[8];
            adj[2] = j[1] * j[5] - j[2] * j[4];
            adj[3] = j[5] * j[6] - j[3] * j[8];
            adj[4] = j[0] * j[8] - j[2] * j[6];
            adj[5] = j[2] * j[3] - j[0] * j[5];
            adj[6] = j[3] * j[7] - j[4] * j[6];
            adj[7] = j[1] * j[6] - j[0] * j[7];
            adj[8] = j[0] * j[4] - j[1] * j[3];
        }
        _ => panic!("unsupported dimension {d}"),
    }
}

/// Optional scalar field in physical coordinates, multiplied into the mass
/// coefficient.
pub type ReactionFn<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

/// Walks the tensor-product grid spanned by `axes` in linearization order,
/// handing each visitor the parametric point and its per-direction basis
/// data when the map is a spline.
struct GridWalker<'a> {
    axes: &'a [&'a [f64]],
    // per direction, per axis point: basis values of the geometry space
    basis: Option<Vec<Vec<LocalBasis>>>,
}

impl<'a> GridWalker<'a> {
    fn new(geom: &GeometryMap, axes: &'a [&'a [f64]]) -> Self {
        let basis = match geom {
            GeometryMap::Spline { space, .. } => Some(
                (0..space.dim())
                    .map(|l| {
                        axes[l]
                            .iter()
                            .map(|&x| space.dir(l).nonzero_at(x))
                            .collect()
                    })
                    .collect(),
            ),
            _ => None,
        };
        Self { axes, basis }
    }

    fn for_each(
        &self,
        mut visit: impl FnMut(&[f64], Option<&[&LocalBasis]>) -> Result<(), GeometryError>,
    ) -> Result<(), GeometryError> {
        let d = self.axes.len();
        let mut multi = vec![0usize; d];
        let mut point = vec![0.0; d];
        let mut locals: Vec<&LocalBasis> = Vec::with_capacity(d);
        'outer: loop {
            point.clear();
            for l in 0..d {
                point.push(self.axes[l][multi[l]]);
            }
            let basis_refs: Option<&[&LocalBasis]> = if let Some(b) = self.basis.as_ref() {
                locals.clear();
                for l in 0..d {
                    locals.push(&b[l][multi[l]]);
                }
                Some(&locals)
            } else {
                None
            };
            visit(&point, basis_refs)?;
            for l in 0..d {
                multi[l] += 1;
                if multi[l] < self.axes[l].len() {
                    continue 'outer;
                }
                multi[l] = 0;
            }
            break;
        }
        Ok(())
    }
}

/// Jacobian at one grid point, reusing precomputed spline basis data.
fn jacobian_on_grid(geom: &GeometryMap, point: &[f64], locals: Option<&[&LocalBasis]>) -> Vec<f64> {
    match (geom, locals) {
        (GeometryMap::Spline { space, control_points }, Some(locals)) => {
            spline_jacobian(space, control_points, locals)
        }
        _ => geom.jacobian_at(point),
    }
}

/// Mass coefficient c = det(DF) (times `reaction` at the physical point) on
/// the tensor grid spanned by `axes`.
pub fn mass_coefficient_grid(
    geom: &GeometryMap,
    axes: &[&[f64]],
    reaction: Option<ReactionFn>,
) -> Result<DenseTensor, GeometryError> {
    let d = geom.dim();
    assert_eq!(axes.len(), d);
    let shape: Vec<usize> = axes.iter().map(|a| a.len()).collect();
    let mut data = Vec::with_capacity(shape.iter().product());
    if let (GeometryMap::Identity { .. }, None) = (geom, reaction) {
        data.resize(shape.iter().product(), 1.0);
        return Ok(DenseTensor::new(shape, data));
    }
    let walker = GridWalker::new(geom, axes);
    walker.for_each(|point, locals| {
        let jac = jacobian_on_grid(geom, point, locals);
        let det = det_small(&jac, d);
        if det <= 0.0 {
            return Err(GeometryError::DegenerateGeometry {
                det,
                location: point.to_vec(),
            });
        }
        let c = match reaction {
            Some(r) => {
                let physical = match (geom, locals) {
                    (GeometryMap::Spline { space, control_points }, Some(locals)) => {
                        spline_point(space, control_points, locals)
                    }
                    _ => geom.map_at(point),
                };
                det * r(&physical)
            }
            None => det,
        };
        data.push(c);
        Ok(())
    })?;
    Ok(DenseTensor::new(shape, data))
}

/// Stiffness coefficients c_{l,m} = [adj(DF) adj(DF)^T]_{l,m} / det(DF) on
/// the tensor grid; returned as d*d tensors indexed l*d + m.
pub fn stiffness_coefficient_grids(
    geom: &GeometryMap,
    axes: &[&[f64]],
) -> Result<Vec<DenseTensor>, GeometryError> {
    let d = geom.dim();
    assert_eq!(axes.len(), d);
    let shape: Vec<usize> = axes.iter().map(|a| a.len()).collect();
    let volume: usize = shape.iter().product();
    if let GeometryMap::Identity { .. } = geom {
        return Ok((0..d * d)
            .map(|e| {
                let value = if e % d == e / d { 1.0 } else { 0.0 };
                DenseTensor::new(shape.clone(), vec![value; volume])
            })
            .collect());
    }
    let mut grids: Vec<Vec<f64>> = vec![Vec::with_capacity(volume); d * d];
    let mut adj = vec![0.0; d * d];
    let walker = GridWalker::new(geom, axes);
    walker.for_each(|point, locals| {
        let jac = jacobian_on_grid(geom, point, locals);
        let det = det_small(&jac, d);
        if det <= 0.0 {
            return Err(GeometryError::DegenerateGeometry {
                det,
                location: point.to_vec(),
            });
        }
        adjugate_small(&jac, d, &mut adj);
        for l in 0..d {
            for m in 0..d {
                let mut entry = 0.0;
                for k in 0..d {
                    entry += adj[l * d + k] * adj[m * d + k];
                }
                grids[l * d + m].push(entry / det);
            }
        }
        Ok(())
    })?;
    Ok(grids
        .into_iter()
        .map(|data| DenseTensor::new(shape.clone(), data))
        .collect())
}
