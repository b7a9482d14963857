//! Timing comparison of the two assembly paths across degrees.
//!
//! The weighted path is rerun for a configurable number of trials and the
//! fastest observation of each phase is kept. The output matrix is
//! bit-identical run to run, so phases are independently comparable, and
//! per-phase minima are what survive scheduler noise on the sub-millisecond
//! phases at low degree. The element-loop baseline runs once, its cost
//! being orders of magnitude above timer noise at any size worth
//! benchmarking. No I/O happens between timed phases.

use std::io::{self, Write};

use crate::assembly::{assemble_operator, AssemblyError, AssemblyStats, Operator, RuleKind};
use crate::bspline::SplineSpace;
use crate::geometry::GeometryMap;
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub dim: usize,
    pub degrees: Vec<usize>,
    pub n_el: usize,
    pub trials: usize,
    pub threads: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchRecord {
    pub degree: usize,
    pub rule: RuleKind,
    pub n_dof: usize,
    pub nnz: usize,
    pub stats: AssemblyStats,
}

/// Assembles the mass matrix once per trial and keeps the fastest observed
/// time of each phase (fast-path trials only; see module docs).
pub fn run_bench(
    config: &BenchConfig,
    geom: &GeometryMap,
    rules: &[RuleKind],
) -> Result<Vec<BenchRecord>, AssemblyError> {
    let mut records = Vec::new();
    for &p in &config.degrees {
        let space = SplineSpace::uniform(config.dim, p, config.n_el).expect("valid space");
        for &rule in rules {
            let trials = match rule {
                RuleKind::Wq => config.trials.max(1),
                RuleKind::Sgq => 1,
            };
            let mut best: Option<(SparseMatrix, AssemblyStats)> = None;
            for _ in 0..trials {
                let (matrix, stats) =
                    assemble_operator(&space, geom, Operator::Mass, rule, None, config.threads)?;
                match &mut best {
                    None => best = Some((matrix, stats)),
                    Some((_, b)) => {
                        b.rules_seconds = b.rules_seconds.min(stats.rules_seconds);
                        b.coeff_seconds = b.coeff_seconds.min(stats.coeff_seconds);
                        b.rows_seconds = b.rows_seconds.min(stats.rows_seconds);
                        b.sparse_seconds = b.sparse_seconds.min(stats.sparse_seconds);
                    }
                }
            }
            let (matrix, stats) = best.expect("at least one trial");
            records.push(BenchRecord {
                degree: p,
                rule,
                n_dof: space.num_functions(),
                nnz: matrix.nnz(),
                stats,
            });
        }
    }
    Ok(records)
}

/// Least-squares slope of ln(y) against ln(x); the observed exponent when
/// y behaves like c * x^k.
pub fn fit_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two samples to fit a slope");
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

pub fn write_bench_csv(out: &mut dyn Write, records: &[BenchRecord]) -> io::Result<()> {
    writeln!(
        out,
        "p,rule,n_dof,nnz,rules_seconds,coeff_seconds,rows_seconds,sparse_seconds,total_seconds,mode_product_flops"
    )?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{:e},{:e},{:e},{:e},{:e},{}",
            r.degree,
            r.rule.name(),
            r.n_dof,
            r.nnz,
            r.stats.rules_seconds,
            r.stats.coeff_seconds,
            r.stats.rows_seconds,
            r.stats.sparse_seconds,
            r.stats.total_seconds(),
            r.stats.mode_product_flops
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_exact_power_laws() {
        let xs: Vec<f64> = (2..=8).map(|p| p as f64).collect();
        for k in [1.0, 2.5, 4.0] {
            let ys: Vec<f64> = xs.iter().map(|x| 3.7 * x.powf(k)).collect();
            assert!((fit_log_slope(&xs, &ys) - k).abs() <= 1e-12);
        }
    }

    #[test]
    fn bench_records_cover_both_paths() {
        let config = BenchConfig {
            dim: 2,
            degrees: vec![2, 3],
            n_el: 4,
            trials: 2,
            threads: 1,
        };
        let geom = GeometryMap::identity(2);
        let records =
            run_bench(&config, &geom, &[RuleKind::Wq, RuleKind::Sgq]).unwrap();
        assert_eq!(records.len(), 4);
        for r in &records {
            assert!(r.stats.total_seconds() > 0.0);
            assert!(r.nnz > 0);
            match r.rule {
                RuleKind::Wq => assert!(r.stats.mode_product_flops > 0),
                RuleKind::Sgq => assert_eq!(r.stats.mode_product_flops, 0),
            }
        }
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &records).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }
}

