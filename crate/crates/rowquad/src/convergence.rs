//! Galerkin solve and refinement study for the one-dimensional reaction
//! equation u'' + u = f with Dirichlet data on a mapped interval.
//!
//! The weak form gives A = M - S (mass minus stiffness); with the weighted
//! rules M is slightly nonsymmetric, so the system is solved by plain LU.
//! Errors are measured in the physical domain: L2 and the H1 seminorm by
//! per-span Gauss quadrature, the max norm on a uniform parameter sample.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::assembly::{assemble_operator, AssemblyError, Operator, RuleKind};
use crate::bspline::SplineSpace;
use crate::geometry::GeometryMap;
use crate::quadrature::gauss_rule;

type ScalarFn = Box<dyn Fn(f64) -> f64 + Sync>;

/// A manufactured 1d problem: the map fixes the physical interval, and the
/// exact solution supplies both the Dirichlet traces and the error reference.
pub struct Problem1d {
    pub geometry: GeometryMap,
    pub forcing: ScalarFn,
    pub exact: ScalarFn,
    pub exact_deriv: ScalarFn,
}

/// u(x) = (exp(2x) - 1) / 4 on [0, pi/6], reached through the parameter map
/// x(t) = arcsin(t / 2) whose derivative 1 / sqrt(4 - t^2) keeps the
/// geometry non-affine. Substituting u into u'' + u gives the forcing.
pub fn exponential_problem() -> Problem1d {
    let map = |t: &[f64], out: &mut [f64]| out[0] = (t[0] / 2.0).asin();
    let jac = |t: &[f64], out: &mut [f64]| out[0] = 1.0 / (4.0 - t[0] * t[0]).sqrt();
    Problem1d {
        geometry: GeometryMap::callable(1, map, jac),
        forcing: Box::new(|x| (5.0 * (2.0 * x).exp() - 1.0) / 4.0),
        exact: Box::new(|x| ((2.0 * x).exp() - 1.0) / 4.0),
        exact_deriv: Box::new(|x| (2.0 * x).exp() / 2.0),
    }
}

/// u(x) = x on the identity interval; any degree reproduces it to roundoff,
/// which pins boundary handling and the A = M - S sign convention.
pub fn linear_problem() -> Problem1d {
    Problem1d {
        geometry: GeometryMap::identity(1),
        forcing: Box::new(|x| x),
        exact: Box::new(|x| x),
        exact_deriv: Box::new(|_| 1.0),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveResult {
    pub n_dof: usize,
    pub l2_error: f64,
    pub h1_error: f64,
    pub linf_error: f64,
}

/// Assembles, imposes the exact traces on the two edge coefficients (the
/// open knot vector makes them interpolatory), solves the lifted interior
/// system, and measures errors against the exact solution.
pub fn solve_problem(
    problem: &Problem1d,
    degree: usize,
    n_el: usize,
    rule: RuleKind,
    threads: usize,
) -> Result<SolveResult, AssemblyError> {
    let space = SplineSpace::uniform(1, degree, n_el).expect("valid 1d space");
    let kv = space.dir(0);
    let n = space.num_functions();
    assert!(n >= 3, "need at least one interior function");

    let (mass, _) = assemble_operator(&space, &problem.geometry, Operator::Mass, rule, None, threads)?;
    let (stiff, _) =
        assemble_operator(&space, &problem.geometry, Operator::Stiffness, rule, None, threads)?;
    let a = mass.to_dense() - stiff.to_dense();

    // Load vector in the parametric domain: f(x(t)) B_i(t) x'(t), two extra
    // Gauss points per span beyond the mass rule to keep the data error
    // below the discretization error.
    let quad = gauss_rule(kv, degree + 2);
    let mut load = DVector::<f64>::zeros(n);
    for (pts, wts) in quad.span_points.iter().zip(&quad.span_weights) {
        for (&t, &w) in pts.iter().zip(wts) {
            let x = problem.geometry.map_at(&[t])[0];
            let scale = (problem.forcing)(x) * problem.geometry.jacobian_at(&[t])[0] * w;
            let local = kv.nonzero_at(t);
            for (k, &v) in local.values.iter().enumerate() {
                load[local.first + k] += scale * v;
            }
        }
    }

    let g0 = (problem.exact)(problem.geometry.map_at(&[0.0])[0]);
    let g1 = (problem.exact)(problem.geometry.map_at(&[1.0])[0]);
    let m = n - 2;
    let a_ii = DMatrix::from_fn(m, m, |r, c| a[(r + 1, c + 1)]);
    let rhs = DVector::from_fn(m, |r, _| {
        load[r + 1] - a[(r + 1, 0)] * g0 - a[(r + 1, n - 1)] * g1
    });
    let interior = a_ii.lu().solve(&rhs).expect("interior system is singular");
    let mut coeffs = vec![0.0; n];
    coeffs[0] = g0;
    coeffs[n - 1] = g1;
    coeffs[1..n - 1].copy_from_slice(interior.as_slice());

    let eval = |t: f64| -> (f64, f64) {
        let local = kv.nonzero_at(t);
        let mut u = 0.0;
        let mut du = 0.0;
        for k in 0..local.values.len() {
            let c = coeffs[local.first + k];
            u += c * local.values[k];
            du += c * local.derivs[k];
        }
        (u, du)
    };

    let mut l2_sq = 0.0;
    let mut h1_sq = 0.0;
    for (pts, wts) in quad.span_points.iter().zip(&quad.span_weights) {
        for (&t, &w) in pts.iter().zip(wts) {
            let x = problem.geometry.map_at(&[t])[0];
            let dxdt = problem.geometry.jacobian_at(&[t])[0];
            let (u, du) = eval(t);
            let e = u - (problem.exact)(x);
            let de = du / dxdt - (problem.exact_deriv)(x);
            l2_sq += w * dxdt * e * e;
            h1_sq += w * dxdt * de * de;
        }
    }
    let samples = 1001;
    let mut linf: f64 = 0.0;
    for s in 0..samples {
        let t = s as f64 / (samples - 1) as f64;
        let x = problem.geometry.map_at(&[t])[0];
        let e = (eval(t).0 - (problem.exact)(x)).abs();
        linf = linf.max(e);
    }

    Ok(SolveResult {
        n_dof: n,
        l2_error: l2_sq.sqrt(),
        h1_error: h1_sq.sqrt(),
        linf_error: linf,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LadderRow {
    pub n_el: usize,
    pub n_dof: usize,
    pub l2_error: f64,
    pub h1_error: f64,
    pub linf_error: f64,
    /// Observed orders against the previous row; None on the coarsest level.
    pub l2_rate: Option<f64>,
    pub h1_rate: Option<f64>,
}

pub const DEFAULT_LADDER: [usize; 5] = [8, 16, 32, 64, 128];

/// Solves on each mesh of the ladder and annotates consecutive pairs with
/// the observed order log(e_coarse / e_fine) / log(h_coarse / h_fine).
pub fn run_ladder(
    problem: &Problem1d,
    degree: usize,
    n_els: &[usize],
    rule: RuleKind,
    threads: usize,
) -> Result<Vec<LadderRow>, AssemblyError> {
    let mut rows: Vec<LadderRow> = Vec::with_capacity(n_els.len());
    for &n_el in n_els {
        let res = solve_problem(problem, degree, n_el, rule, threads)?;
        let rates = rows.last().map(|prev| {
            let ratio = (n_el as f64 / prev.n_el as f64).ln();
            (
                (prev.l2_error / res.l2_error).ln() / ratio,
                (prev.h1_error / res.h1_error).ln() / ratio,
            )
        });
        rows.push(LadderRow {
            n_el,
            n_dof: res.n_dof,
            l2_error: res.l2_error,
            h1_error: res.h1_error,
            linf_error: res.linf_error,
            l2_rate: rates.map(|r| r.0),
            h1_rate: rates.map(|r| r.1),
        });
    }
    Ok(rows)
}

pub fn write_convergence_header(out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "p,rule,n_el,n_dof,l2_error,l2_rate,h1_error,h1_rate,linf_error")
}

/// One CSV line per ladder row; rate fields are empty on the coarsest mesh.
pub fn write_convergence_rows(
    out: &mut dyn Write,
    degree: usize,
    rule: RuleKind,
    rows: &[LadderRow],
) -> io::Result<()> {
    let fmt = |r: Option<f64>| r.map(|v| format!("{v:.4}")).unwrap_or_default();
    for row in rows {
        writeln!(
            out,
            "{},{},{},{},{:e},{},{:e},{},{:e}",
            degree,
            rule.name(),
            row.n_el,
            row.n_dof,
            row.l2_error,
            fmt(row.l2_rate),
            row.h1_error,
            fmt(row.h1_rate),
            row.linf_error
        )?;
    }
    Ok(())
}
