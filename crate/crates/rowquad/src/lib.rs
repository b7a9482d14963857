//! Galerkin mass and stiffness assembly on tensor-product spline spaces.
//!
//! The central algorithm walks matrix rows instead of elements: for each test
//! function it builds direction-wise quadrature rules whose weights absorb the
//! test factor, then contracts the coefficient tensor with sum-factorization.
//! A conventional element-loop Gaussian assembler is included as an
//! independent reference path.

pub mod assembly;
pub mod bench;
pub mod bspline;
pub mod convergence;
pub mod geometry;
pub mod guide;
pub mod quadrature;
pub mod sparse;
pub mod tensor;

pub use assembly::{assemble_operator, AssemblyStats, Operator, RuleKind};
pub use bspline::{KnotVector, SplineSpace};
pub use geometry::GeometryMap;
pub use quadrature::DirectionRules;
pub use sparse::SparseMatrix;
