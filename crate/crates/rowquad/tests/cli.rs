use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rowquad::assembly::{assemble_operator, Operator, RuleKind};
use rowquad::bspline::{KnotVector, SplineSpace};
use rowquad::geometry::GeometryMap;
use rowquad::quadrature::DirectionRules;
use rowquad::sparse::load_matrix_market;

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rowquad"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = binary().args(args).output().expect("binary should launch");
    assert!(
        out.status.success(),
        "rowquad {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn assemble_writes_matrices_identical_to_in_process_assembly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["--cmd", "assemble", "--d", "1", "--p", "3", "--nel", "10", "--rule", "wq", "--out", out]);

    let space = SplineSpace::uniform(1, 3, 10).unwrap();
    let geom = GeometryMap::identity(1);
    for (op, name) in [(Operator::Mass, "mass"), (Operator::Stiffness, "stiffness")] {
        let path = dir.path().join(format!("{name}_wq_d1_p3_nel10.mtx"));
        let (loaded, meta) = load_matrix_market(&path).unwrap();
        for (key, want) in [("operator", name), ("rule", "wq"), ("d", "1"), ("p", "3"), ("nel", "10")] {
            assert!(
                meta.iter().any(|(k, v)| k == key && v == want),
                "{name}: metadata {key}={want} missing from {meta:?}"
            );
        }
        let n = space.num_functions();
        assert_eq!(loaded.nnz(), 7 * n - 12, "{name}: d=1 p=3 sparsity count");
        let (direct, _) = assemble_operator(&space, &geom, op, RuleKind::Wq, None, 1).unwrap();
        assert_eq!(loaded.col_indices(), direct.col_indices(), "{name}: structure");
        assert_eq!(loaded.values(), direct.values(), "{name}: shortest-decimal round trip");
    }
}

#[test]
fn assemble_accepts_the_shipped_json_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let geometry = repo_file("geometries/bent_square_2d.json");
    run_ok(&[
        "--cmd", "assemble", "--d", "2", "--p", "2", "--nel", "4",
        "--geometry", geometry.to_str().unwrap(),
        "--rule", "sgq", "--out", out,
    ]);
    let (loaded, _) = load_matrix_market(&dir.path().join("mass_sgq_d2_p2_nel4.mtx")).unwrap();
    let space = SplineSpace::uniform(2, 2, 4).unwrap();
    let geom = GeometryMap::from_json_file(&geometry).unwrap();
    let (direct, _) = assemble_operator(&space, &geom, Operator::Mass, RuleKind::Sgq, None, 1).unwrap();
    assert_eq!(loaded.values(), direct.values());
}

#[test]
fn convergence_csv_reports_rates_on_every_refined_rung() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["--cmd", "convergence", "--p", "2", "--nel", "8,16,32", "--rule", "wq", "--out", out]);
    let text = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "p,rule,n_el,n_dof,l2_error,l2_rate,h1_error,h1_rate,linf_error"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3, "one row per ladder rung");
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), 9);
        assert_eq!(row[0], "2");
        assert_eq!(row[1], "wq");
        assert_eq!(row[2], [8, 16, 32][k].to_string());
        for idx in [4, 6, 8] {
            let e: f64 = row[idx].parse().expect("error fields are numbers");
            assert!(e.is_finite() && e > 0.0);
        }
        for idx in [5, 7] {
            if k == 0 {
                assert!(row[idx].is_empty(), "coarsest rung has no rate");
            } else {
                let r: f64 = row[idx].parse().expect("rate fields are numbers");
                assert!(r.is_finite());
            }
        }
    }
    // The p=2 ladder is deep enough that the last rung sits near the
    // asymptotic orders.
    let last = rows.last().unwrap();
    let l2: f64 = last[5].parse().unwrap();
    let h1: f64 = last[7].parse().unwrap();
    assert!((l2 - 3.0).abs() < 0.3, "L2 rate {l2}");
    assert!((h1 - 2.0).abs() < 0.3, "H1 rate {h1}");
}

#[test]
fn bench_csv_has_one_row_per_degree_and_rule() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&["--cmd", "bench", "--d", "2", "--p", "2,3", "--nel", "4", "--trials", "1", "--out", out]);
    let text = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "p,rule,n_dof,nnz,rules_seconds,coeff_seconds,rows_seconds,sparse_seconds,total_seconds,mode_product_flops"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4, "two degrees, two rules");
    for row in &rows {
        assert_eq!(row.len(), 10);
        let flops: u64 = row[9].parse().unwrap();
        if row[1] == "wq" {
            assert!(flops > 0, "weighted path counts its mode products");
        } else {
            assert_eq!(row[1], "sgq");
            assert_eq!(flops, 0, "the element loop does no mode products");
        }
        let total: f64 = row[8].parse().unwrap();
        assert!(total > 0.0);
    }
}

#[test]
fn bad_flags_exit_nonzero_with_actionable_messages() {
    let cases: &[(&[&str], &str)] = &[
        (&["--cmd", "assemble", "--d", "5"], "--d must be 1, 2, or 3"),
        (&["--cmd", "assemble", "--p", "0"], "--p values must lie in 1..=10"),
        (&["--cmd", "assemble", "--p", "8:2"], "start exceeds end"),
        (&["--cmd", "assemble", "--p", "abc"], "--p expects a degree"),
        (&["--cmd", "assemble", "--nel", "4,8"], "--nel takes a single value here"),
        (&["--cmd", "convergence", "--d", "2"], "requires --d 1"),
        (&["--cmd", "assemble", "--dump-rules", "--rule", "sgq"], "requires the weighted rule"),
        (&["--cmd", "assemble", "--threads", "0"], "--threads must be at least 1"),
        (
            &["--cmd", "assemble", "--d", "2", "--geometry", "does_not_exist.json"],
            "does_not_exist.json",
        ),
    ];
    for (args, needle) in cases {
        let out = binary().args(*args).output().unwrap();
        assert!(!out.status.success(), "{args:?} should fail");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(
            stderr.contains(needle),
            "{args:?}: stderr {stderr:?} does not mention {needle:?}"
        );
    }
    // Unknown values and flags are clap's job; just pin the exit status.
    for args in [&["--cmd", "fly"][..], &["--frobnicate"][..]] {
        let out = binary().args(args).output().unwrap();
        assert!(!out.status.success(), "{args:?} should fail");
    }
}

#[test]
fn dumped_rules_reproduce_the_in_process_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&[
        "--cmd", "assemble", "--d", "1", "--p", "2", "--nel", "4",
        "--rule", "wq", "--dump-rules", "--out", out,
    ]);
    let text = std::fs::read_to_string(dir.path().join("rules_d1_p2_nel4.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "l,i,a,b,q,x,w");

    let kv = KnotVector::open_uniform(2, 4).unwrap();
    let rules = DirectionRules::build(&kv).unwrap();
    let mut seen = 0usize;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 7);
        assert_eq!(f[0], "0", "single direction");
        let i: usize = f[1].parse().unwrap();
        let a: usize = f[2].parse().unwrap();
        let b: usize = f[3].parse().unwrap();
        let q: usize = f[4].parse().unwrap();
        let x: f64 = f[5].parse().unwrap();
        let w: f64 = f[6].parse().unwrap();
        assert_eq!(x, rules.grid().points()[q], "point column round trips");
        let offset = q - rules.grid().active(i).start;
        assert_eq!(w, rules.weights(a, b, i)[offset], "weight column round trips");
        seen += 1;
    }
    // Every (row, family) pair lists each active point once.
    let want: usize = (0..kv.num_functions())
        .map(|i| 4 * rules.grid().active(i).len())
        .sum();
    assert_eq!(seen, want);
}
