//! Quadrature: Gauss-Legendre reference rules and the row-wise weighted rules.
//!
//! The weighted rules share one global point grid per direction: all knots,
//! the midpoint of every interior span, and p+1 equispaced points on the two
//! boundary spans. Per basis function i and derivative pair (a, b) a weight
//! vector is solved from the exactness conditions
//!
//!   sum_q w_q D^b B_j(x_q) = integral of D^a B_i D^b B_j,  for all j in I_i,
//!
//! with the test factor D^a B_i absorbed into the weights. Rows of a mass or
//! stiffness matrix then come from plain weighted sums of the coefficient,
//! no element loop involved. Interior rows yield square systems; rows whose
//! support is clipped by the domain boundary get the p+1 boundary-span points
//! so the systems stay solvable, and underdetermined systems are resolved by
//! the minimum-norm solution.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::bspline::{IndexSets, KnotVector, LocalBasis};

/// Gauss-Legendre nodes and weights on [-1, 1].
///
/// Nodes are eigenvalues of the Jacobi matrix, then polished by one Newton
/// step on the Legendre polynomial, which also yields the derivative used in
/// the weight formula. Exact for polynomials of degree <= 2n-1.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one point");
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let beta = i as f64 / ((4 * i * i - 1) as f64).sqrt();
        jacobi[(i, i - 1)] = beta;
        jacobi[(i - 1, i)] = beta;
    }
    let mut nodes: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
    nodes.sort_by(f64::total_cmp);
    let mut weights = vec![0.0; n];
    for (x, w) in nodes.iter_mut().zip(&mut weights) {
        for _ in 0..2 {
            let (value, slope) = legendre_with_deriv(n, *x);
            *x -= value / slope;
        }
        let (_, slope) = legendre_with_deriv(n, *x);
        *w = 2.0 / ((1.0 - *x * *x) * slope * slope);
    }
    (nodes, weights)
}

/// P_n(x) and P_n'(x) by the three-term recurrence.
fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut prev = 1.0;
    let mut value = x;
    for k in 1..n {
        let next = ((2 * k + 1) as f64 * x * value - k as f64 * prev) / (k + 1) as f64;
        prev = value;
        value = next;
    }
    // P_n'(x) = n (x P_n - P_{n-1}) / (x^2 - 1); Gauss nodes never sit at +-1.
    let slope = n as f64 * (x * value - prev) / (x * x - 1.0);
    (value, slope)
}

/// Gauss-Legendre points and weights mapped onto every knot-span.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub span_points: Vec<Vec<f64>>,
    pub span_weights: Vec<Vec<f64>>,
}

impl GaussRule {
    pub fn num_spans(&self) -> usize {
        self.span_points.len()
    }

    pub fn points_per_span(&self) -> usize {
        self.span_points[0].len()
    }

    /// All points of the rule, in ascending order (span-major).
    pub fn flat_points(&self) -> Vec<f64> {
        self.span_points.iter().flatten().copied().collect()
    }
}

/// Standard per-span Gauss-Legendre rule, exact for piecewise polynomials of
/// degree <= 2*points_per_span - 1.
pub fn gauss_rule(kv: &KnotVector, points_per_span: usize) -> GaussRule {
    assert!(points_per_span >= 1);
    let (ref_x, ref_w) = gauss_legendre(points_per_span);
    let mut span_points = Vec::with_capacity(kv.num_spans());
    let mut span_weights = Vec::with_capacity(kv.num_spans());
    for k in 0..kv.num_spans() {
        let (lo, hi) = (kv.breakpoints()[k], kv.breakpoints()[k + 1]);
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        span_points.push(ref_x.iter().map(|&t| mid + half * t).collect());
        span_weights.push(ref_w.iter().map(|&w| half * w).collect());
    }
    GaussRule {
        span_points,
        span_weights,
    }
}

/// Shared point grid of one direction's weighted rules, with the active
/// point range of every basis function.
#[derive(Debug, Clone)]
pub struct PointGrid {
    points: Vec<f64>,
    active: Vec<Range<usize>>,
}

impl PointGrid {
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    /// Grid indices of the points the rules of function `i` may weight.
    pub fn active(&self, i: usize) -> Range<usize> {
        self.active[i].clone()
    }
}

fn push_dedup(points: &mut Vec<f64>, x: f64) {
    if points.last().is_none_or(|&last| x - last > 1e-14) {
        points.push(x);
    }
}

/// Builds the weighted-rule point grid: knots plus interior-span midpoints,
/// with p+1 equispaced points (endpoints included) on the first and last
/// span. Active sets are the points strictly inside each function's support,
/// widened to the closed support for the few rows near the domain boundary
/// that would otherwise have fewer points than interacting functions.
pub fn build_point_grid(kv: &KnotVector, sets: &IndexSets) -> PointGrid {
    let p = kv.degree();
    let n_el = kv.num_spans();
    let breakpoints = kv.breakpoints();
    let mut points = Vec::with_capacity(2 * n_el + 2 * p);
    for k in 0..n_el {
        let (lo, hi) = (breakpoints[k], breakpoints[k + 1]);
        if k == 0 || k == n_el - 1 {
            for m in 0..=p {
                let x = if m == p {
                    hi
                } else {
                    lo + (hi - lo) * (m as f64 / p as f64)
                };
                push_dedup(&mut points, x);
            }
        } else {
            push_dedup(&mut points, lo);
            push_dedup(&mut points, 0.5 * (lo + hi));
            push_dedup(&mut points, hi);
        }
    }

    let knots = kv.knots();
    let n = kv.num_functions();
    let mut active = Vec::with_capacity(n);
    for i in 0..n {
        let (lo, hi) = (knots[i], knots[i + p + 1]);
        let strict =
            points.partition_point(|&x| x <= lo)..points.partition_point(|&x| x < hi);
        let range = if strict.len() >= sets.interactions(i).len() {
            strict
        } else {
            points.partition_point(|&x| x < lo)..points.partition_point(|&x| x <= hi)
        };
        debug_assert!(range.len() >= sets.interactions(i).len());
        active.push(range);
    }
    PointGrid { points, active }
}

/// Integrals of D^a B_i * D^b B_j over [0, 1] for all interacting pairs,
/// computed span-wise with p+1 Gauss points (exact: integrands have degree
/// at most 2p).
#[derive(Debug, Clone)]
pub struct ExactIntegralTable {
    interactions: Vec<Range<usize>>,
    // [a][b], then per row i a dense slice over j in interactions(i).
    tables: [[Vec<Vec<f64>>; 2]; 2],
}

impl ExactIntegralTable {
    /// Row `i` of the (a, b) table, aligned with `interactions(i)`.
    pub fn row(&self, a: usize, b: usize, i: usize) -> &[f64] {
        &self.tables[a][b][i]
    }

    pub fn entry(&self, a: usize, b: usize, i: usize, j: usize) -> f64 {
        let r = &self.interactions[i];
        if r.contains(&j) {
            self.tables[a][b][i][j - r.start]
        } else {
            0.0
        }
    }
}

pub fn exact_integrals(kv: &KnotVector, sets: &IndexSets) -> ExactIntegralTable {
    let p = kv.degree();
    let n = kv.num_functions();
    let rule = gauss_rule(kv, p + 1);
    let empty_rows =
        || -> Vec<Vec<f64>> { (0..n).map(|i| vec![0.0; sets.interactions(i).len()]).collect() };
    let mut tables = [
        [empty_rows(), empty_rows()],
        [empty_rows(), empty_rows()],
    ];
    for k in 0..kv.num_spans() {
        for (&x, &w) in rule.span_points[k].iter().zip(&rule.span_weights[k]) {
            let local = kv.nonzero_at(x);
            for (di, (&vi, &gi)) in local.values.iter().zip(&local.derivs).enumerate() {
                let i = local.first + di;
                let offset = sets.interactions(i).start;
                for (dj, (&vj, &gj)) in local.values.iter().zip(&local.derivs).enumerate() {
                    let j = local.first + dj - offset;
                    tables[0][0][i][j] += w * vi * vj;
                    tables[1][0][i][j] += w * gi * vj;
                    tables[0][1][i][j] += w * vi * gj;
                    tables[1][1][i][j] += w * gi * gj;
                }
            }
        }
    }
    ExactIntegralTable {
        interactions: (0..n).map(|i| sets.interactions(i)).collect(),
        tables,
    }
}

/// Weight solving failed: the exactness system has no solution within
/// tolerance (its matrix violates the point-support interlacing needed for
/// solvability).
#[derive(Debug, Error)]
#[error(
    "exactness system for row {row}, derivative pair ({a},{b}) unsolvable: \
     residual {residual:.3e}"
)]
pub struct SingularSystem {
    pub row: usize,
    pub a: usize,
    pub b: usize,
    pub residual: f64,
}

/// One direction's weighted quadrature rules: the shared point grid, basis
/// values at every grid point, and per (a, b, i) weight vectors.
#[derive(Debug, Clone)]
pub struct DirectionRules {
    grid: PointGrid,
    basis_at_points: Vec<LocalBasis>,
    // weights[a][b][i] runs over grid.active(i).
    weights: [[Vec<Vec<f64>>; 2]; 2],
    max_residual: f64,
}

impl DirectionRules {
    /// Builds grid, exact integrals and all four weight families for one
    /// knot vector.
    pub fn build(kv: &KnotVector) -> Result<Self, SingularSystem> {
        let sets = kv.index_sets();
        let grid = build_point_grid(kv, &sets);
        let table = exact_integrals(kv, &sets);
        Self::solve(kv, &sets, grid, &table)
    }

    /// Weight solve against a caller-supplied grid and integral table.
    pub fn solve(
        kv: &KnotVector,
        sets: &IndexSets,
        grid: PointGrid,
        table: &ExactIntegralTable,
    ) -> Result<Self, SingularSystem> {
        let n = kv.num_functions();
        let basis_at_points: Vec<LocalBasis> =
            grid.points().iter().map(|&x| kv.nonzero_at(x)).collect();
        // For degree 1 the first derivative jumps at interior breakpoints,
        // so a sample there is an arbitrary one-sided convention. Zeroing
        // those columns removes the point from the derivative families (the
        // minimum-norm solve then zeroes its weight), which keeps the rule
        // convention-free; assembly multiplies the same samples by the
        // weights, so the ambiguous value never enters any matrix entry.
        let kink = |x: f64| -> bool {
            let bp = kv.breakpoints();
            kv.degree() == 1 && bp[1..bp.len() - 1].binary_search_by(|b| b.total_cmp(&x)).is_ok()
        };
        let mut weights: [[Vec<Vec<f64>>; 2]; 2] = Default::default();
        let mut max_residual = 0.0f64;
        for a in 0..2 {
            for b in 0..2 {
                let mut rows = Vec::with_capacity(n);
                for i in 0..n {
                    let js = sets.interactions(i);
                    let qs = grid.active(i);
                    let mut mat = DMatrix::<f64>::zeros(js.len(), qs.len());
                    for (qc, q) in qs.clone().enumerate() {
                        if b == 1 && kink(grid.points()[q]) {
                            continue;
                        }
                        let local = &basis_at_points[q];
                        let samples = if b == 0 { &local.values } else { &local.derivs };
                        for (k, &v) in samples.iter().enumerate() {
                            let j = local.first + k;
                            // Points at the closed-support edge can see
                            // functions outside I_i; those never enter the
                            // exactness conditions.
                            if js.contains(&j) {
                                mat[(j - js.start, qc)] = v;
                            }
                        }
                    }
                    let rhs = DVector::from_column_slice(table.row(a, b, i));
                    let (w, residual) = solve_min_norm(&mat, &rhs);
                    if residual > 1e-11 * rhs.amax().max(1.0) {
                        return Err(SingularSystem { row: i, a, b, residual });
                    }
                    max_residual = max_residual.max(residual);
                    rows.push(w);
                }
                weights[a][b] = rows;
            }
        }
        Ok(Self {
            grid,
            basis_at_points,
            weights,
            max_residual,
        })
    }

    pub fn grid(&self) -> &PointGrid {
        &self.grid
    }

    /// Basis values and derivatives at grid point `q`.
    pub fn basis_at(&self, q: usize) -> &LocalBasis {
        &self.basis_at_points[q]
    }

    /// Weights of function `i` for derivative pair (a, b), aligned with
    /// `grid().active(i)`.
    pub fn weights(&self, a: usize, b: usize, i: usize) -> &[f64] {
        &self.weights[a][b][i]
    }

    /// Largest exactness residual observed while solving, a cheap health
    /// indicator for diagnostics output.
    pub fn max_residual(&self) -> f64 {
        self.max_residual
    }

    /// Applies rule (a, b) of function `i` to an integrand sampled at the
    /// active points: sum_q w_q f(x_q).
    pub fn apply(&self, a: usize, b: usize, i: usize, f: impl FnMut(f64) -> f64) -> f64 {
        let mut f = f;
        self.weights[a][b][i]
            .iter()
            .zip(self.grid.active(i))
            .map(|(&w, q)| w * f(self.grid.points[q]))
            .sum()
    }
}

/// Minimum-norm least-squares solve; returns the solution and the residual
/// infinity-norm. Singular values below 1e-10 of the largest are truncated,
/// which also resolves the expected rank deficiency of derivative-sampled
/// systems (their rows sum to zero, as do the matching right-hand sides).
fn solve_min_norm(mat: &DMatrix<f64>, rhs: &DVector<f64>) -> (Vec<f64>, f64) {
    let svd = mat.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let scale = rhs.amax().max(1.0);
    let mut best: Option<(DVector<f64>, f64)> = None;
    // High-degree boundary rows have genuinely tiny singular values (columns
    // of barely-overlapping functions are small but real), and on strongly
    // graded knots they can sink far below the largest. Descend a cutoff
    // ladder until the residual reaches roundoff; every rung still sits
    // above the structural null direction of derivative-sampled systems,
    // whose computed singular value is at roundoff level.
    let target = 1e-13 * scale;
    'ladder: for drop in [1e-13, 1e-14, 3e-15] {
        let cutoff = drop * smax;
        let mut w = svd
            .solve(rhs, cutoff)
            .expect("SVD was computed with both factor sets");
        // Refinement gains a fixed factor per sweep on these ill-conditioned
        // consistent systems, so iterate to roundoff instead of a fixed
        // count; the corrections stay in the row space, keeping the norm
        // minimal.
        for _ in 0..=8 {
            let residual = (mat * &w - rhs).amax();
            if best.as_ref().is_none_or(|(_, b)| residual < *b) {
                best = Some((w.clone(), residual));
            }
            if residual <= target {
                break 'ladder;
            }
            let r = rhs - mat * &w;
            w += svd
                .solve(&r, cutoff)
                .expect("SVD was computed with both factor sets");
        }
    }
    let (w, residual) = best.expect("the ladder always yields a candidate");
    (w.iter().copied().collect(), residual)
}
