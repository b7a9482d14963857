use std::io::Cursor;

use rowquad::assembly::{assemble_operator, matrix_structure, Operator, RuleKind};
use rowquad::bspline::{KnotVector, SplineSpace};
use rowquad::geometry::GeometryMap;
use rowquad::sparse::{max_abs_diff, read_matrix_market, write_matrix_market};

/// Trivariate quadratic patch with the face and edge midpoints pushed
/// off the unit cube; displacements are small enough to keep the
/// Jacobian positive everywhere.
fn bent_cube() -> GeometryMap {
    let kv = KnotVector::from_breakpoints(2, &[0.0, 1.0]).unwrap();
    let space = SplineSpace::new(vec![kv; 3]);
    let mid = |m: usize| if m == 1 { 1.0 } else { 0.0 };
    let mut cps = Vec::with_capacity(27 * 3);
    for idx in 0..27 {
        let m = space.multi_index(idx);
        let (wi, wj, wk) = (mid(m[0]), mid(m[1]), mid(m[2]));
        cps.push(m[0] as f64 / 2.0 + 0.07 * wj * wk);
        cps.push(m[1] as f64 / 2.0 + 0.05 * wi * wk);
        cps.push(m[2] as f64 / 2.0 + 0.06 * wi * wj);
    }
    GeometryMap::spline(space, cps)
}

#[test]
fn sparsity_pattern_is_the_tensor_product_of_interaction_ranges() {
    for (dim, p, n_el) in [(1, 4, 9), (2, 2, 5), (3, 3, 4)] {
        let space = SplineSpace::uniform(dim, p, n_el).unwrap();
        let (row_ptr, col_idx) = matrix_structure(&space);
        let sets: Vec<_> = space.dirs().iter().map(|kv| kv.index_sets()).collect();
        let sizes: Vec<usize> = space.dirs().iter().map(|kv| kv.num_functions()).collect();
        for r in 0..space.num_functions() {
            let multi = space.multi_index(r);
            let ranges: Vec<_> = (0..dim).map(|l| sets[l].interactions(multi[l])).collect();
            let mut want = Vec::new();
            let mut rec = vec![0usize; dim];
            // Enumerate the product with direction 0 fastest; contiguous
            // per-direction ranges make the linear indices ascend.
            fn emit(
                l: usize,
                ranges: &[std::ops::Range<usize>],
                sizes: &[usize],
                rec: &mut [usize],
                out: &mut Vec<usize>,
            ) {
                if l == 0 {
                    for j in ranges[0].clone() {
                        rec[0] = j;
                        let mut lin = 0usize;
                        for d in (0..rec.len()).rev() {
                            lin = lin * sizes[d] + rec[d];
                        }
                        out.push(lin);
                    }
                } else {
                    for j in ranges[l].clone() {
                        rec[l] = j;
                        emit(l - 1, ranges, sizes, rec, out);
                    }
                }
            }
            emit(dim - 1, &ranges, &sizes, &mut rec, &mut want);
            want.sort_unstable();
            assert_eq!(&col_idx[row_ptr[r]..row_ptr[r + 1]], &want[..], "row {r} of d={dim}");
        }
    }
}

#[test]
fn row_wise_mass_asymmetry_vanishes_under_refinement() {
    // On a curved patch the row-wise rule makes the mass matrix only
    // approximately symmetric; the defect must die out as the mesh refines.
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
    let mut defects = Vec::new();
    for n_el in [4, 8, 16] {
        let space = SplineSpace::uniform(2, 2, n_el).unwrap();
        let (m, _) = assemble_operator(&space, &geom, Operator::Mass, RuleKind::Wq, None, 1)
            .unwrap();
        defects.push(max_abs_diff(&m, &m.transpose()));
    }
    let order01 = (defects[0] / defects[1]).log2();
    let order12 = (defects[1] / defects[2]).log2();
    println!("asymmetry defects {defects:?}, observed orders {order01:.2}, {order12:.2}");
    assert!(defects[1] < defects[0] && defects[2] < defects[1], "{defects:?} not decreasing");
    assert!(defects[2] <= defects[0] / 4.0, "defect decays slower than first order");
}

#[test]
fn element_loop_output_is_symmetric_on_a_bent_cube() {
    let geom = bent_cube();
    let space = SplineSpace::uniform(3, 2, 3).unwrap();
    for op in [Operator::Mass, Operator::Stiffness] {
        let (m, _) = assemble_operator(&space, &geom, op, RuleKind::Sgq, None, 1).unwrap();
        let defect = max_abs_diff(&m, &m.transpose());
        assert!(defect <= 1e-13, "{op:?} symmetry defect {defect:.3e}");
    }
}

#[test]
fn both_rules_agree_exactly_on_an_affine_patch() {
    let geom = GeometryMap::affine(
        2,
        &[1.2, 0.3, -0.1, 0.9],
        &[0.5, -0.25],
    );
    let space = SplineSpace::uniform(2, 3, 8).unwrap();
    for op in [Operator::Mass, Operator::Stiffness] {
        let (wq, _) = assemble_operator(&space, &geom, op, RuleKind::Wq, None, 1).unwrap();
        let (sgq, _) = assemble_operator(&space, &geom, op, RuleKind::Sgq, None, 1).unwrap();
        let diff = max_abs_diff(&wq, &sgq);
        assert!(diff <= 1e-12, "{op:?}: |WQ - SGQ| = {diff:.3e}");
    }
}

#[test]
fn both_rules_converge_to_each_other_on_a_bent_cube() {
    // Off affine geometry the two rules integrate the pulled-back
    // coefficient differently, so they agree only in the limit.
    let geom = bent_cube();
    let mut gaps = Vec::new();
    for n_el in [2, 4, 8] {
        let space = SplineSpace::uniform(3, 2, n_el).unwrap();
        let (wq, _) = assemble_operator(&space, &geom, Operator::Mass, RuleKind::Wq, None, 1)
            .unwrap();
        let (sgq, _) = assemble_operator(&space, &geom, Operator::Mass, RuleKind::Sgq, None, 1)
            .unwrap();
        // Row sums scale like the row's measure, so normalize by it.
        let gap = (0..wq.nrows())
            .map(|i| {
                let sum = |m: &rowquad::sparse::SparseMatrix| -> f64 { m.row(i).1.iter().sum() };
                (sum(&wq) - sum(&sgq)).abs() / sum(&sgq).abs()
            })
            .fold(0.0f64, f64::max);
        gaps.push(gap);
    }
    println!("relative row-sum gaps {gaps:?}");
    assert!(gaps[1] < gaps[0] && gaps[2] < gaps[1], "{gaps:?} not decreasing");
}

#[test]
fn matrix_market_round_trip_preserves_values_exactly() {
    let space = SplineSpace::uniform(2, 2, 3).unwrap();
    let (m, _) = assemble_operator(
        &space,
        &bent_square_for_io(),
        Operator::Stiffness,
        RuleKind::Wq,
        None,
        1,
    )
    .unwrap();
    let mut buf = Vec::new();
    write_matrix_market(&m, &[("operator", "stiffness".into())], &mut buf).unwrap();
    let (back, meta) = read_matrix_market(Cursor::new(buf)).unwrap();
    assert_eq!(back.nrows(), m.nrows());
    assert_eq!(back.ncols(), m.ncols());
    assert_eq!(back.row_ptr(), m.row_ptr());
    assert_eq!(back.col_indices(), m.col_indices());
    assert_eq!(back.values(), m.values(), "decimal round trip must be bit exact");
    assert!(meta.iter().any(|(k, v)| k == "operator" && v == "stiffness"));
}

fn bent_square_for_io() -> GeometryMap {
    let kv = KnotVector::from_breakpoints(2, &[0.0, 1.0]).unwrap();
    let space = SplineSpace::new(vec![kv; 2]);
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
    GeometryMap::spline(space, pts.iter().flatten().copied().collect())
}

#[test]
fn thread_count_never_changes_a_bit_on_a_bent_cube() {
    let geom = bent_cube();
    let space = SplineSpace::uniform(3, 2, 4).unwrap();
    for op in [Operator::Mass, Operator::Stiffness] {
        let (one, _) = assemble_operator(&space, &geom, op, RuleKind::Wq, None, 1).unwrap();
        for threads in [2, 5] {
            let (many, _) = assemble_operator(&space, &geom, op, RuleKind::Wq, None, threads)
                .unwrap();
            assert_eq!(one.values(), many.values(), "{op:?} with {threads} threads");
        }
    }
}
