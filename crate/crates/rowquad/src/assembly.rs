//! Mass and stiffness matrix assembly.
//!
//! Two independent paths produce the same matrices for constant coefficients
//! and affine geometry:
//!
//! * the row loop: per test function, gather the coefficient subtensor over
//!   the active weighted-quadrature points and contract it direction by
//!   direction with the weighted trial-value matrices (sum-factorization);
//! * the element loop: per knot-span cell, accumulate local matrices on
//!   (p+1)^d Gauss points and scatter-add, the conventional reference.
//!
//! Both write into an identical row-compressed structure derived from the
//! interaction sets, so results can be compared entry by entry.

use std::ops::Range;
use std::time::Instant;

use thiserror::Error;

use crate::bspline::{IndexSets, SplineSpace};
use crate::geometry::{
    mass_coefficient_grid, stiffness_coefficient_grids, GeometryError, GeometryMap, ReactionFn,
};
use crate::quadrature::{gauss_rule, DirectionRules, GaussRule, SingularSystem};
use crate::sparse::SparseMatrix;
use crate::tensor::{extract_subtensor_into, mode_product_into, DenseTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operator {
    Mass,
    Stiffness,
}

impl Operator {
    pub fn name(&self) -> &'static str {
        match self {
            Operator::Mass => "mass",
            Operator::Stiffness => "stiffness",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    Wq,
    Sgq,
}

impl RuleKind {
    pub fn name(&self) -> &'static str {
        match self {
            RuleKind::Wq => "wq",
            RuleKind::Sgq => "sgq",
        }
    }
}

/// Wall-clock phase breakdown and the mode-product FLOP count (weighted
/// path only; the element loop reports zero flops).
#[derive(Debug, Clone, Copy, Default)]
pub struct AssemblyStats {
    pub rules_seconds: f64,
    pub coeff_seconds: f64,
    pub rows_seconds: f64,
    pub sparse_seconds: f64,
    pub mode_product_flops: u64,
    /// Largest exactness-system residual across directions; None on the
    /// Gauss path, which has no such systems.
    pub rule_residual: Option<f64>,
}

impl AssemblyStats {
    pub fn total_seconds(&self) -> f64 {
        self.rules_seconds + self.coeff_seconds + self.rows_seconds + self.sparse_seconds
    }
}

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Rules(#[from] SingularSystem),
}

/// Row offsets and column indices shared by every matrix on this space: row
/// i holds exactly the tensor product of the per-direction interaction
/// ranges, in ascending linearized order.
pub fn matrix_structure(space: &SplineSpace) -> (Vec<usize>, Vec<usize>) {
    let d = space.dim();
    let sets: Vec<IndexSets> = space.dirs().iter().map(|kv| kv.index_sets()).collect();
    let dims = space.num_functions_per_dir();
    let n = space.num_functions();
    let nnz: usize = sets.iter().map(|s| s.num_nonzeros()).product();
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::with_capacity(nnz);
    let mut multi = vec![0usize; d];
    for _ in 0..n {
        match d {
            1 => col_idx.extend(sets[0].interactions(multi[0])),
            2 => {
                let r0 = sets[0].interactions(multi[0]);
                for j1 in sets[1].interactions(multi[1]) {
                    let base = j1 * dims[0];
                    col_idx.extend(r0.clone().map(|j0| base + j0));
                }
            }
            3 => {
                let r0 = sets[0].interactions(multi[0]);
                let r1 = sets[1].interactions(multi[1]);
                for j2 in sets[2].interactions(multi[2]) {
                    for j1 in r1.clone() {
                        let base = (j2 * dims[1] + j1) * dims[0];
                        col_idx.extend(r0.clone().map(|j0| base + j0));
                    }
                }
            }
            _ => unreachable!("spaces are 1- to 3-dimensional"),
        }
        row_ptr.push(col_idx.len());
        for l in 0..d {
            multi[l] += 1;
            if multi[l] < dims[l] {
                break;
            }
            multi[l] = 0;
        }
    }
    debug_assert_eq!(col_idx.len(), nnz);
    (row_ptr, col_idx)
}

/// Weighted trial matrices for one derivative pair: per direction and row,
/// the row-major #I x #Q matrix with entries D^b B_j(x_q) * w^(a,b)_q.
type WeightedMatrices = Vec<Vec<Vec<f64>>>;

fn build_weighted_matrices(
    sets: &[IndexSets],
    rules: &[DirectionRules],
    a: usize,
    b: usize,
) -> WeightedMatrices {
    rules
        .iter()
        .zip(sets)
        .map(|(rules_l, sets_l)| {
            (0..sets_l.num_functions())
                .map(|i| {
                    let js = sets_l.interactions(i);
                    let qs = rules_l.grid().active(i);
                    let w = rules_l.weights(a, b, i);
                    let mut mat = vec![0.0; js.len() * qs.len()];
                    for (qc, q) in qs.clone().enumerate() {
                        let local = rules_l.basis_at(q);
                        let samples = if b == 0 { &local.values } else { &local.derivs };
                        for (k, &v) in samples.iter().enumerate() {
                            let j = local.first + k;
                            if js.contains(&j) {
                                mat[(j - js.start) * qs.len() + qc] = v * w[qc];
                            }
                        }
                    }
                    mat
                })
                .collect()
        })
        .collect()
}

struct WqWorkspace {
    buf_a: Vec<f64>,
    buf_b: Vec<f64>,
    acc: Vec<f64>,
    ranges: Vec<Range<usize>>,
    shape: Vec<usize>,
}

impl WqWorkspace {
    fn new(d: usize) -> Self {
        Self {
            buf_a: Vec::new(),
            buf_b: Vec::new(),
            acc: Vec::new(),
            ranges: vec![0..0; d],
            shape: vec![0; d],
        }
    }
}

/// One worker's share of the weighted-quadrature row loop for the mass
/// matrix. `values` starts at `row_ptr[rows.start]`.
#[allow(clippy::too_many_arguments)]
fn wq_mass_rows(
    space: &SplineSpace,
    sets: &[IndexSets],
    rules: &[DirectionRules],
    weighted: &WeightedMatrices,
    coeff: &DenseTensor,
    rows: Range<usize>,
    row_ptr: &[usize],
    values: &mut [f64],
) -> u64 {
    let d = space.dim();
    let dims = space.num_functions_per_dir();
    let mut ws = WqWorkspace::new(d);
    let mut flops = 0u64;
    let base = row_ptr[rows.start];
    let mut multi = space.multi_index(rows.start);
    for r in rows {
        for l in 0..d {
            let q = rules[l].grid().active(multi[l]);
            ws.shape[l] = q.len();
            ws.ranges[l] = q;
        }
        extract_subtensor_into(&mut ws.buf_a, coeff.data(), coeff.shape(), &ws.ranges);
        for mode in (0..d).rev() {
            let i_l = multi[mode];
            let t = sets[mode].interactions(i_l).len();
            flops += mode_product_into(
                &mut ws.buf_b,
                &weighted[mode][i_l],
                t,
                &ws.shape,
                &ws.buf_a,
                mode,
            );
            ws.shape[mode] = t;
            std::mem::swap(&mut ws.buf_a, &mut ws.buf_b);
        }
        values[row_ptr[r] - base..row_ptr[r + 1] - base].copy_from_slice(&ws.buf_a);
        for l in 0..d {
            multi[l] += 1;
            if multi[l] < dims[l] {
                break;
            }
            multi[l] = 0;
        }
    }
    flops
}

/// Stiffness counterpart: d*d coefficient grids, one term per direction
/// pair (l, m), each contracted with the derivative pair selected per mode
/// (derivative on the test side when mode == l, on the trial side when
/// mode == m), accumulated into one row block.
#[allow(clippy::too_many_arguments)]
fn wq_stiffness_rows(
    space: &SplineSpace,
    sets: &[IndexSets],
    rules: &[DirectionRules],
    weighted: &[[WeightedMatrices; 2]; 2],
    coeffs: &[DenseTensor],
    rows: Range<usize>,
    row_ptr: &[usize],
    values: &mut [f64],
) -> u64 {
    let d = space.dim();
    let dims = space.num_functions_per_dir();
    let mut ws = WqWorkspace::new(d);
    let mut flops = 0u64;
    let base = row_ptr[rows.start];
    let mut multi = space.multi_index(rows.start);
    for r in rows {
        let mut block_len = 1;
        for l in 0..d {
            let q = rules[l].grid().active(multi[l]);
            ws.ranges[l] = q;
            block_len *= sets[l].interactions(multi[l]).len();
        }
        ws.acc.clear();
        ws.acc.resize(block_len, 0.0);
        for l in 0..d {
            for m in 0..d {
                for (axis, range) in ws.ranges.iter().enumerate() {
                    ws.shape[axis] = range.len();
                }
                let grid = &coeffs[l * d + m];
                extract_subtensor_into(&mut ws.buf_a, grid.data(), grid.shape(), &ws.ranges);
                for mode in (0..d).rev() {
                    let i_l = multi[mode];
                    let t = sets[mode].interactions(i_l).len();
                    let a = usize::from(mode == l);
                    let b = usize::from(mode == m);
                    flops += mode_product_into(
                        &mut ws.buf_b,
                        &weighted[a][b][mode][i_l],
                        t,
                        &ws.shape,
                        &ws.buf_a,
                        mode,
                    );
                    ws.shape[mode] = t;
                    std::mem::swap(&mut ws.buf_a, &mut ws.buf_b);
                }
                for (dst, src) in ws.acc.iter_mut().zip(&ws.buf_a) {
                    *dst += src;
                }
            }
        }
        values[row_ptr[r] - base..row_ptr[r + 1] - base].copy_from_slice(&ws.acc);
        for l in 0..d {
            multi[l] += 1;
            if multi[l] < dims[l] {
                break;
            }
            multi[l] = 0;
        }
    }
    flops
}

/// Splits `values` at row boundaries into one disjoint chunk per worker and
/// runs `work` on each, summing the returned FLOP counts. Chunks are fixed
/// by row count alone, so results are bit-identical for any worker count.
fn run_row_chunks(
    n_rows: usize,
    threads: usize,
    row_ptr: &[usize],
    values: &mut [f64],
    work: &(dyn Fn(Range<usize>, &mut [f64]) -> u64 + Sync),
) -> u64 {
    let threads = threads.max(1).min(n_rows.max(1));
    if threads == 1 {
        return work(0..n_rows, values);
    }
    let mut chunks = Vec::with_capacity(threads);
    let mut rest = values;
    let mut taken = 0;
    for c in 0..threads {
        let rows = c * n_rows / threads..(c + 1) * n_rows / threads;
        let len = row_ptr[rows.end] - row_ptr[rows.start];
        let (head, tail) = rest.split_at_mut(len);
        debug_assert_eq!(taken, row_ptr[rows.start]);
        taken += len;
        rest = tail;
        chunks.push((rows, head));
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .filter(|(rows, _)| !rows.is_empty())
            .map(|(rows, slice)| scope.spawn(move || work(rows, slice)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("row worker panicked")).sum()
    })
}

/// Mass matrix by the weighted row loop. `coeff` must cover the full point
/// grid of `rules` (one axis per direction).
pub fn assemble_mass_wq(
    space: &SplineSpace,
    rules: &[DirectionRules],
    coeff: &DenseTensor,
    threads: usize,
) -> (SparseMatrix, AssemblyStats) {
    let d = space.dim();
    assert_eq!(rules.len(), d, "one rule set per direction");
    for l in 0..d {
        assert_eq!(
            coeff.shape()[l],
            rules[l].grid().num_points(),
            "coefficient grid does not match rule points in direction {l}"
        );
    }
    let sets: Vec<IndexSets> = space.dirs().iter().map(|kv| kv.index_sets()).collect();
    let n = space.num_functions();
    let mut stats = AssemblyStats::default();

    let t = Instant::now();
    let (row_ptr, col_idx) = matrix_structure(space);
    let mut values = vec![0.0; col_idx.len()];
    stats.sparse_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let weighted = build_weighted_matrices(&sets, rules, 0, 0);
    stats.mode_product_flops = run_row_chunks(n, threads, &row_ptr, &mut values, &|rows, out| {
        wq_mass_rows(space, &sets, rules, &weighted, coeff, rows, &row_ptr, out)
    });
    stats.rows_seconds = t.elapsed().as_secs_f64();
    stats.rule_residual = Some(rules.iter().map(|r| r.max_residual()).fold(0.0, f64::max));

    let t = Instant::now();
    let matrix = SparseMatrix::from_csr(n, n, row_ptr, col_idx, values);
    stats.sparse_seconds += t.elapsed().as_secs_f64();
    (matrix, stats)
}

/// Stiffness matrix by the weighted row loop. `coeffs` holds the d*d
/// coefficient grids indexed l*d + m.
pub fn assemble_stiffness_wq(
    space: &SplineSpace,
    rules: &[DirectionRules],
    coeffs: &[DenseTensor],
    threads: usize,
) -> (SparseMatrix, AssemblyStats) {
    let d = space.dim();
    assert_eq!(rules.len(), d, "one rule set per direction");
    assert_eq!(coeffs.len(), d * d, "need one coefficient grid per direction pair");
    for grid in coeffs {
        for l in 0..d {
            assert_eq!(
                grid.shape()[l],
                rules[l].grid().num_points(),
                "coefficient grid does not match rule points in direction {l}"
            );
        }
    }
    let sets: Vec<IndexSets> = space.dirs().iter().map(|kv| kv.index_sets()).collect();
    let n = space.num_functions();
    let mut stats = AssemblyStats::default();

    let t = Instant::now();
    let (row_ptr, col_idx) = matrix_structure(space);
    let mut values = vec![0.0; col_idx.len()];
    stats.sparse_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let weighted = [
        [
            build_weighted_matrices(&sets, rules, 0, 0),
            build_weighted_matrices(&sets, rules, 0, 1),
        ],
        [
            build_weighted_matrices(&sets, rules, 1, 0),
            build_weighted_matrices(&sets, rules, 1, 1),
        ],
    ];
    stats.mode_product_flops = run_row_chunks(n, threads, &row_ptr, &mut values, &|rows, out| {
        wq_stiffness_rows(space, &sets, rules, &weighted, coeffs, rows, &row_ptr, out)
    });
    stats.rows_seconds = t.elapsed().as_secs_f64();
    stats.rule_residual = Some(rules.iter().map(|r| r.max_residual()).fold(0.0, f64::max));

    let t = Instant::now();
    let matrix = SparseMatrix::from_csr(n, n, row_ptr, col_idx, values);
    stats.sparse_seconds += t.elapsed().as_secs_f64();
    (matrix, stats)
}

/// Per-direction basis tables at Gauss points: entry k*g + q holds the
/// nonzero values/derivatives at point q of span k.
fn gauss_basis_tables(space: &SplineSpace, gauss: &[GaussRule]) -> Vec<Vec<crate::bspline::LocalBasis>> {
    space
        .dirs()
        .iter()
        .zip(gauss)
        .map(|(kv, rule)| {
            rule.span_points
                .iter()
                .flatten()
                .map(|&x| kv.nonzero_at(x))
                .collect()
        })
        .collect()
}

/// Shared element-loop state for the Gaussian assemblers.
struct SgqFrame<'a> {
    space: &'a SplineSpace,
    sets: Vec<IndexSets>,
    gauss: &'a [GaussRule],
    basis: Vec<Vec<crate::bspline::LocalBasis>>,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    /// points per span, per direction
    gpts: Vec<usize>,
    /// local functions per direction (p_l + 1)
    nloc_dir: Vec<usize>,
    nloc: usize,
}

impl<'a> SgqFrame<'a> {
    fn new(space: &'a SplineSpace, gauss: &'a [GaussRule]) -> (Self, Vec<f64>) {
        let d = space.dim();
        assert_eq!(gauss.len(), d);
        let sets = space.dirs().iter().map(|kv| kv.index_sets()).collect();
        let (row_ptr, col_idx) = matrix_structure(space);
        let values = vec![0.0; col_idx.len()];
        let basis = gauss_basis_tables(space, gauss);
        let gpts: Vec<usize> = gauss.iter().map(|g| g.points_per_span()).collect();
        let nloc_dir: Vec<usize> = space.dirs().iter().map(|kv| kv.degree() + 1).collect();
        let nloc = nloc_dir.iter().product();
        (
            Self {
                space,
                sets,
                gauss,
                basis,
                row_ptr,
                col_idx,
                gpts,
                nloc_dir,
                nloc,
            },
            values,
        )
    }

    /// Adds the element's local matrix into the global values, using the
    /// constant-time position arithmetic the shared structure allows: within
    /// row a, column (k + beta) sits at offset sum_l (k_l + beta_l -
    /// I_start_l) * prod of lower interaction lengths.
    fn scatter(&self, span: &[usize], mloc: &[f64], values: &mut [f64]) {
        let d = self.space.dim();
        let mut alpha = vec![0usize; d];
        let mut i_multi = vec![0usize; d];
        for a in 0..self.nloc {
            for l in 0..d {
                i_multi[l] = span[l] + alpha[l];
            }
            let row = self.space.linear_index(&i_multi);
            let base = self.row_ptr[row];
            let mut starts = [0usize; 3];
            let mut lens = [1usize; 3];
            for l in 0..d {
                let r = self.sets[l].interactions(i_multi[l]);
                starts[l] = r.start;
                lens[l] = r.len();
            }
            let m_base = a * self.nloc;
            let n0 = self.nloc_dir[0];
            match d {
                1 => {
                    let start = base + span[0] - starts[0];
                    for b0 in 0..n0 {
                        values[start + b0] += mloc[m_base + b0];
                    }
                }
                2 => {
                    for b1 in 0..self.nloc_dir[1] {
                        let start =
                            base + span[0] - starts[0] + (span[1] + b1 - starts[1]) * lens[0];
                        let m_off = m_base + b1 * n0;
                        for b0 in 0..n0 {
                            values[start + b0] += mloc[m_off + b0];
                        }
                    }
                }
                3 => {
                    for b2 in 0..self.nloc_dir[2] {
                        for b1 in 0..self.nloc_dir[1] {
                            let start = base
                                + span[0]
                                - starts[0]
                                + (span[1] + b1 - starts[1]) * lens[0]
                                + (span[2] + b2 - starts[2]) * lens[0] * lens[1];
                            let m_off = m_base + (b2 * self.nloc_dir[1] + b1) * n0;
                            for b0 in 0..n0 {
                                values[start + b0] += mloc[m_off + b0];
                            }
                        }
                    }
                }
                _ => unreachable!(),
            }
            for l in 0..d {
                alpha[l] += 1;
                if alpha[l] < self.nloc_dir[l] {
                    break;
                }
                alpha[l] = 0;
            }
        }
    }
}

/// Mass matrix by the conventional element loop on (p+1)^d Gauss points per
/// element; the verification oracle and timing baseline.
pub fn assemble_mass_sgq(
    space: &SplineSpace,
    geom: &GeometryMap,
    gauss: &[GaussRule],
    reaction: Option<ReactionFn>,
) -> Result<(SparseMatrix, AssemblyStats), GeometryError> {
    let d = space.dim();
    let mut stats = AssemblyStats::default();

    let t = Instant::now();
    let axes_own: Vec<Vec<f64>> = gauss.iter().map(|g| g.flat_points()).collect();
    let axes: Vec<&[f64]> = axes_own.iter().map(|a| a.as_slice()).collect();
    let coeff = mass_coefficient_grid(geom, &axes, reaction)?;
    stats.coeff_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (frame, mut values) = SgqFrame::new(space, gauss);
    stats.sparse_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let nloc = frame.nloc;
    let mut mloc = vec![0.0; nloc * nloc];
    let mut phi = vec![0.0; nloc];
    let mut csub: Vec<f64> = Vec::new();
    let mut ranges = vec![0..0; d];
    let mut span = vec![0usize; d];
    loop {
        for l in 0..d {
            ranges[l] = span[l] * frame.gpts[l]..(span[l] + 1) * frame.gpts[l];
        }
        extract_subtensor_into(&mut csub, coeff.data(), coeff.shape(), &ranges);
        mloc.fill(0.0);
        let mut q_multi = vec![0usize; d];
        for &c in &csub {
            let mut w = c;
            for l in 0..d {
                w *= frame.gauss[l].span_weights[span[l]][q_multi[l]];
            }
            // Tensor-product local basis values, direction 0 fastest.
            {
                let vals =
                    |l: usize| &frame.basis[l][span[l] * frame.gpts[l] + q_multi[l]].values;
                match d {
                    1 => phi.copy_from_slice(vals(0)),
                    2 => {
                        let (v0, v1) = (vals(0), vals(1));
                        let mut idx = 0;
                        for &b1 in v1 {
                            for &b0 in v0 {
                                phi[idx] = b1 * b0;
                                idx += 1;
                            }
                        }
                    }
                    3 => {
                        let (v0, v1, v2) = (vals(0), vals(1), vals(2));
                        let mut idx = 0;
                        for &b2 in v2 {
                            for &b1 in v1 {
                                let s = b2 * b1;
                                for &b0 in v0 {
                                    phi[idx] = s * b0;
                                    idx += 1;
                                }
                            }
                        }
                    }
                    _ => unreachable!(),
                }
            }
            for a in 0..nloc {
                let s = w * phi[a];
                let row = &mut mloc[a * nloc..(a + 1) * nloc];
                for (dst, &pb) in row.iter_mut().zip(&phi) {
                    *dst += s * pb;
                }
            }
            for l in 0..d {
                q_multi[l] += 1;
                if q_multi[l] < frame.gpts[l] {
                    break;
                }
                q_multi[l] = 0;
            }
        }
        frame.scatter(&span, &mloc, &mut values);
        let mut done = true;
        for l in 0..d {
            span[l] += 1;
            if span[l] < space.dir(l).num_spans() {
                done = false;
                break;
            }
            span[l] = 0;
        }
        if done {
            break;
        }
    }
    stats.rows_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let n = space.num_functions();
    let matrix = SparseMatrix::from_csr(n, n, frame.row_ptr, frame.col_idx, values);
    stats.sparse_seconds += t.elapsed().as_secs_f64();
    Ok((matrix, stats))
}

/// Stiffness matrix by the element loop. Per Gauss point the d gradient
/// component vectors are combined with the coefficient matrix first, so each
/// point costs d rank-1 updates instead of d*d.
pub fn assemble_stiffness_sgq(
    space: &SplineSpace,
    geom: &GeometryMap,
    gauss: &[GaussRule],
) -> Result<(SparseMatrix, AssemblyStats), GeometryError> {
    let d = space.dim();
    let mut stats = AssemblyStats::default();

    let t = Instant::now();
    let axes_own: Vec<Vec<f64>> = gauss.iter().map(|g| g.flat_points()).collect();
    let axes: Vec<&[f64]> = axes_own.iter().map(|a| a.as_slice()).collect();
    let coeffs = stiffness_coefficient_grids(geom, &axes)?;
    stats.coeff_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (frame, mut values) = SgqFrame::new(space, gauss);
    stats.sparse_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let nloc = frame.nloc;
    let mut sloc = vec![0.0; nloc * nloc];
    let mut grad = vec![vec![0.0; nloc]; d];
    let mut combined = vec![vec![0.0; nloc]; d];
    let mut csub: Vec<Vec<f64>> = vec![Vec::new(); d * d];
    let mut ranges = vec![0..0; d];
    let mut span = vec![0usize; d];
    loop {
        for l in 0..d {
            ranges[l] = span[l] * frame.gpts[l]..(span[l] + 1) * frame.gpts[l];
        }
        for (sub, grid) in csub.iter_mut().zip(&coeffs) {
            extract_subtensor_into(sub, grid.data(), grid.shape(), &ranges);
        }
        sloc.fill(0.0);
        let gauss_count: usize = frame.gpts.iter().product();
        let mut q_multi = vec![0usize; d];
        for q_lin in 0..gauss_count {
            let mut w = 1.0;
            for l in 0..d {
                w *= frame.gauss[l].span_weights[span[l]][q_multi[l]];
            }
            // Gradient component vectors: derivative along `dir`, values
            // elsewhere.
            for (dir, out) in grad.iter_mut().enumerate() {
                let part = |l: usize| {
                    let lb = &frame.basis[l][span[l] * frame.gpts[l] + q_multi[l]];
                    if l == dir {
                        &lb.derivs
                    } else {
                        &lb.values
                    }
                };
                match d {
                    1 => out.copy_from_slice(part(0)),
                    2 => {
                        let (v0, v1) = (part(0), part(1));
                        let mut idx = 0;
                        for &b1 in v1 {
                            for &b0 in v0 {
                                out[idx] = b1 * b0;
                                idx += 1;
                            }
                        }
                    }
                    3 => {
                        let (v0, v1, v2) = (part(0), part(1), part(2));
                        let mut idx = 0;
                        for &b2 in v2 {
                            for &b1 in v1 {
                                let s = b2 * b1;
                                for &b0 in v0 {
                                    out[idx] = s * b0;
                                    idx += 1;
                                }
                            }
                        }
                    }
                    _ => unreachable!(),
                }
            }
            // combined_m = w * sum_l c_{l,m} grad_l, then one rank-1 update
            // per direction.
            for m in 0..d {
                let out = &mut combined[m];
                out.fill(0.0);
                for (l, g) in grad.iter().enumerate() {
                    let c = w * csub[l * d + m][q_lin];
                    if c != 0.0 {
                        for (dst, &src) in out.iter_mut().zip(g) {
                            *dst += c * src;
                        }
                    }
                }
            }
            for m in 0..d {
                let h = &combined[m];
                let g = &grad[m];
                for a in 0..nloc {
                    let s = h[a];
                    if s != 0.0 {
                        let row = &mut sloc[a * nloc..(a + 1) * nloc];
                        for (dst, &gb) in row.iter_mut().zip(g) {
                            *dst += s * gb;
                        }
                    }
                }
            }
            for l in 0..d {
                q_multi[l] += 1;
                if q_multi[l] < frame.gpts[l] {
                    break;
                }
                q_multi[l] = 0;
            }
        }
        frame.scatter(&span, &sloc, &mut values);
        let mut done = true;
        for l in 0..d {
            span[l] += 1;
            if span[l] < space.dir(l).num_spans() {
                done = false;
                break;
            }
            span[l] = 0;
        }
        if done {
            break;
        }
    }
    stats.rows_seconds = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let n = space.num_functions();
    let matrix = SparseMatrix::from_csr(n, n, frame.row_ptr, frame.col_idx, values);
    stats.sparse_seconds += t.elapsed().as_secs_f64();
    Ok((matrix, stats))
}

/// End-to-end assembly: builds rules or Gauss tables, evaluates coefficient
/// grids, and runs the requested assembler, timing each phase. `reaction`
/// only affects the mass operator.
pub fn assemble_operator(
    space: &SplineSpace,
    geom: &GeometryMap,
    op: Operator,
    rule: RuleKind,
    reaction: Option<ReactionFn>,
    threads: usize,
) -> Result<(SparseMatrix, AssemblyStats), AssemblyError> {
    assert_eq!(space.dim(), geom.dim(), "space and geometry dimensions differ");
    match rule {
        RuleKind::Wq => {
            let t = Instant::now();
            let rules: Vec<DirectionRules> = space
                .dirs()
                .iter()
                .map(DirectionRules::build)
                .collect::<Result<_, _>>()?;
            let rules_seconds = t.elapsed().as_secs_f64();

            let t = Instant::now();
            let axes: Vec<&[f64]> = rules.iter().map(|r| r.grid().points()).collect();
            let (matrix, mut stats) = match op {
                Operator::Mass => {
                    let coeff = mass_coefficient_grid(geom, &axes, reaction)?;
                    let coeff_seconds = t.elapsed().as_secs_f64();
                    let (m, mut s) = assemble_mass_wq(space, &rules, &coeff, threads);
                    s.coeff_seconds = coeff_seconds;
                    (m, s)
                }
                Operator::Stiffness => {
                    let coeffs = stiffness_coefficient_grids(geom, &axes)?;
                    let coeff_seconds = t.elapsed().as_secs_f64();
                    let (m, mut s) = assemble_stiffness_wq(space, &rules, &coeffs, threads);
                    s.coeff_seconds = coeff_seconds;
                    (m, s)
                }
            };
            stats.rules_seconds = rules_seconds;
            Ok((matrix, stats))
        }
        RuleKind::Sgq => {
            let t = Instant::now();
            let gauss: Vec<GaussRule> = space
                .dirs()
                .iter()
                .map(|kv| gauss_rule(kv, kv.degree() + 1))
                .collect();
            let rules_seconds = t.elapsed().as_secs_f64();
            let (matrix, mut stats) = match op {
                Operator::Mass => assemble_mass_sgq(space, geom, &gauss, reaction)?,
                Operator::Stiffness => assemble_stiffness_sgq(space, geom, &gauss)?,
            };
            stats.rules_seconds = rules_seconds;
            Ok((matrix, stats))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bspline::KnotVector;
    use crate::quadrature::exact_integrals;
    use crate::sparse::max_abs_diff;

    fn rules_for(space: &SplineSpace) -> Vec<DirectionRules> {
        space.dirs().iter().map(|kv| DirectionRules::build(kv).unwrap()).collect()
    }

    fn ones_grid(rules: &[DirectionRules]) -> DenseTensor {
        let shape: Vec<usize> = rules.iter().map(|r| r.grid().num_points()).collect();
        let len = shape.iter().product();
        DenseTensor::new(shape, vec![1.0; len])
    }

    #[test]
    fn structure_matches_interaction_sets() {
        for p in 1..=4 {
            let space = SplineSpace::uniform(1, p, 10).unwrap();
            let (row_ptr, col_idx) = matrix_structure(&space);
            let n = space.num_functions();
            assert_eq!(*row_ptr.last().unwrap(), col_idx.len());
            assert_eq!(col_idx.len(), (2 * p + 1) * n - p * (p + 1));
        }
        let space = SplineSpace::new(vec![
            KnotVector::open_uniform(2, 3).unwrap(),
            KnotVector::open_uniform(2, 4).unwrap(),
        ]);
        let (row_ptr, col_idx) = matrix_structure(&space);
        // Row of the center function interacts with 5x5 neighbours.
        let center = space.linear_index(&[2, 3]);
        assert_eq!(row_ptr[center + 1] - row_ptr[center], 25);
        let row = &col_idx[row_ptr[center]..row_ptr[center + 1]];
        assert!(row.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn mass_wq_1d_equals_exact_integrals() {
        for p in 1..=4 {
            let space = SplineSpace::uniform(1, p, 7).unwrap();
            let rules = rules_for(&space);
            let (matrix, stats) = assemble_mass_wq(&space, &rules, &ones_grid(&rules), 1);
            let kv = space.dir(0);
            let table = exact_integrals(kv, &kv.index_sets());
            for i in 0..kv.num_functions() {
                for j in kv.index_sets().interactions(i) {
                    assert!(
                        (matrix.get(i, j) - table.entry(0, 0, i, j)).abs() <= 1e-12,
                        "p={p} entry ({i},{j})"
                    );
                }
            }
            assert!(stats.mode_product_flops > 0);
        }
    }

    #[test]
    fn stiffness_wq_1d_equals_exact_integrals() {
        for p in 1..=4 {
            let space = SplineSpace::uniform(1, p, 7).unwrap();
            let rules = rules_for(&space);
            let (matrix, _) =
                assemble_stiffness_wq(&space, &rules, &[ones_grid(&rules)], 1);
            let kv = space.dir(0);
            let table = exact_integrals(kv, &kv.index_sets());
            for i in 0..kv.num_functions() {
                for j in kv.index_sets().interactions(i) {
                    assert!(
                        (matrix.get(i, j) - table.entry(1, 1, i, j)).abs() <= 1e-12,
                        "p={p} entry ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn mass_wq_2d_is_kronecker_of_univariate_masses() {
        // Distinct span counts per direction would expose any axis mix-up.
        let space = SplineSpace::new(vec![
            KnotVector::open_uniform(2, 3).unwrap(),
            KnotVector::open_uniform(2, 5).unwrap(),
        ]);
        let rules = rules_for(&space);
        let (matrix, _) = assemble_mass_wq(&space, &rules, &ones_grid(&rules), 1);
        let dense = matrix.to_dense();
        let m0 = univariate_gram(space.dir(0), 0);
        let m1 = univariate_gram(space.dir(1), 0);
        let want = m1.kronecker(&m0);
        assert!((dense - want).abs().max() <= 1e-12);
    }

    #[test]
    fn stiffness_wq_2d_is_kronecker_sum() {
        let space = SplineSpace::new(vec![
            KnotVector::open_uniform(3, 4).unwrap(),
            KnotVector::open_uniform(3, 3).unwrap(),
        ]);
        let rules = rules_for(&space);
        let ones = ones_grid(&rules);
        let zero =
            DenseTensor::new(ones.shape().to_vec(), vec![0.0; ones.data().len()]);
        // Identity geometry: off-diagonal coefficient grids vanish.
        let coeffs = [ones.clone(), zero.clone(), zero, ones.clone()];
        let (matrix, _) = assemble_stiffness_wq(&space, &rules, &coeffs, 1);
        let dense = matrix.to_dense();
        let m0 = univariate_gram(space.dir(0), 0);
        let m1 = univariate_gram(space.dir(1), 0);
        let s0 = univariate_gram(space.dir(0), 1);
        let s1 = univariate_gram(space.dir(1), 1);
        let want = m1.kronecker(&s0) + s1.kronecker(&m0);
        assert!((dense - want).abs().max() <= 1e-12);
    }

    /// Exact univariate mass (deriv = 0) or stiffness (deriv = 1) matrix.
    fn univariate_gram(kv: &KnotVector, deriv: usize) -> nalgebra::DMatrix<f64> {
        let table = exact_integrals(kv, &kv.index_sets());
        let n = kv.num_functions();
        let mut dense = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for j in kv.index_sets().interactions(i) {
                dense[(i, j)] = table.entry(deriv, deriv, i, j);
            }
        }
        dense
    }

    #[test]
    fn wq_and_sgq_agree_on_affine_geometry() {
        let geom = GeometryMap::affine(2, &[1.0, 0.4, 0.1, 0.9], &[0.2, -0.1]);
        let space = SplineSpace::uniform(2, 3, 4).unwrap();
        for op in [Operator::Mass, Operator::Stiffness] {
            let (wq, _) =
                assemble_operator(&space, &geom, op, RuleKind::Wq, None, 1).unwrap();
            let (sgq, _) =
                assemble_operator(&space, &geom, op, RuleKind::Sgq, None, 1).unwrap();
            assert!(
                max_abs_diff(&wq, &sgq) <= 1e-12,
                "{op:?} disagrees by {}",
                max_abs_diff(&wq, &sgq)
            );
        }
    }

    #[test]
    fn sgq_output_is_symmetric() {
        let kv = KnotVector::from_breakpoints(2, &[0.0, 1.0]).unwrap();
        let gspace = SplineSpace::new(vec![kv; 2]);
        let pts: [[f64; 2]; 9] = [
            [0.0, 0.0],
            [0.5, 0.1],
            [1.0, 0.0],
            [-0.1, 0.5],
            [0.6, 0.5],
            [1.1, 0.5],
            [0.0, 1.0],
            [0.5, 0.9],
            [1.0, 1.0],
        ];
        let geom = GeometryMap::spline(gspace, pts.iter().flatten().copied().collect());
        let space = SplineSpace::uniform(2, 2, 5).unwrap();
        for op in [Operator::Mass, Operator::Stiffness] {
            let (m, _) = assemble_operator(&space, &geom, op, RuleKind::Sgq, None, 1).unwrap();
            let defect = max_abs_diff(&m, &m.transpose());
            assert!(defect <= 1e-13, "{op:?} symmetry defect {defect}");
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let geom = GeometryMap::affine(2, &[1.0, 0.3, 0.0, 1.0], &[0.0, 0.0]);
        let space = SplineSpace::uniform(2, 3, 6).unwrap();
        for op in [Operator::Mass, Operator::Stiffness] {
            let (one, _) = assemble_operator(&space, &geom, op, RuleKind::Wq, None, 1).unwrap();
            for threads in [2, 3, 16] {
                let (many, _) =
                    assemble_operator(&space, &geom, op, RuleKind::Wq, None, threads).unwrap();
                assert_eq!(one.values(), many.values(), "{op:?} with {threads} threads");
                assert_eq!(one.col_indices(), many.col_indices());
            }
        }
    }

    #[test]
    fn flop_counter_matches_closed_form() {
        let space = SplineSpace::uniform(2, 2, 4).unwrap();
        let rules = rules_for(&space);
        let (_, stats) = assemble_mass_wq(&space, &rules, &ones_grid(&rules), 1);
        let sets: Vec<IndexSets> =
            space.dirs().iter().map(|kv| kv.index_sets()).collect();
        let mut want = 0u64;
        for r in 0..space.num_functions() {
            let multi = space.multi_index(r);
            let q0 = rules[0].grid().active(multi[0]).len() as u64;
            let q1 = rules[1].grid().active(multi[1]).len() as u64;
            let t0 = sets[0].interactions(multi[0]).len() as u64;
            let t1 = sets[1].interactions(multi[1]).len() as u64;
            // Mode 1 first on the (q0, q1) block, then mode 0.
            want += 2 * t1 * (q0 * q1) + 2 * t0 * (q0 * t1);
        }
        assert_eq!(stats.mode_product_flops, want);
    }

    #[test]
    fn reaction_coefficient_flows_into_mass() {
        // c(x) = x on the identity interval. Individual entries carry a
        // quadrature error on the weighted side (x * B_j leaves the trial
        // space), but row sums contract c against the partition of unity,
        // and x itself is a spline, so they match the Gauss result exactly.
        let space = SplineSpace::uniform(1, 2, 8).unwrap();
        let geom = GeometryMap::identity(1);
        let r: ReactionFn = &|x: &[f64]| x[0];
        let (wq, _) =
            assemble_operator(&space, &geom, Operator::Mass, RuleKind::Wq, Some(r), 1).unwrap();
        let (sgq, _) =
            assemble_operator(&space, &geom, Operator::Mass, RuleKind::Sgq, Some(r), 1).unwrap();
        for i in 0..space.num_functions() {
            let sum_wq: f64 = wq.row(i).1.iter().sum();
            let sum_sgq: f64 = sgq.row(i).1.iter().sum();
            assert!((sum_wq - sum_sgq).abs() <= 1e-13, "row {i}");
        }
        let diff = max_abs_diff(&wq, &sgq);
        assert!(diff > 1e-12, "expected entrywise quadrature error, got {diff}");
        // The weighted rows are not symmetric for non-constant c.
        let defect = max_abs_diff(&wq, &wq.transpose());
        assert!(defect > 1e-12, "expected an asymmetric matrix, defect {defect}");
    }
}
