//! Command-line driver: matrix assembly to Matrix Market files, the 1d
//! convergence study, and the weighted-vs-Gauss timing benchmark.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use rowquad::assembly::{assemble_operator, Operator, RuleKind};
use rowquad::bench::{fit_log_slope, run_bench, write_bench_csv, BenchConfig, BenchRecord};
use rowquad::bspline::SplineSpace;
use rowquad::convergence::{
    exponential_problem, run_ladder, write_convergence_header, write_convergence_rows,
    DEFAULT_LADDER,
};
use rowquad::geometry::GeometryMap;
use rowquad::quadrature::DirectionRules;
use rowquad::sparse::save_matrix_market;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    /// Assemble mass and stiffness matrices and write .mtx files.
    Assemble,
    /// Refinement study for the 1d reaction problem; writes convergence.csv.
    Convergence,
    /// Time both assembly paths across degrees; writes bench.csv.
    Bench,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RuleArg {
    Wq,
    Sgq,
}

impl From<RuleArg> for RuleKind {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Wq => RuleKind::Wq,
            RuleArg::Sgq => RuleKind::Sgq,
        }
    }
}

/// Assembles isogeometric Galerkin matrices by row-wise weighted quadrature
/// and checks them against element-wise Gauss quadrature.
#[derive(Debug, Parser)]
#[command(name = "rowquad", version)]
struct RunConfig {
    /// What to run.
    #[arg(long = "cmd", value_enum)]
    command: Command,

    /// Space dimension.
    #[arg(long, default_value_t = 1)]
    d: usize,

    /// Degrees: a single value "3", a range "2:8", or a list "2,4,6".
    #[arg(long, default_value = "3")]
    p: String,

    /// Elements per direction. A comma list forms the convergence ladder;
    /// assemble and bench take a single value.
    #[arg(long)]
    nel: Option<String>,

    /// "identity" or a path to a JSON spline geometry.
    #[arg(long, default_value = "identity")]
    geometry: String,

    /// Quadrature path. Convergence runs both when omitted; bench always
    /// times both.
    #[arg(long, value_enum)]
    rule: Option<RuleArg>,

    /// Directory for .mtx and .csv outputs.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Worker threads for the weighted row loop.
    #[arg(long, default_value_t = 1)]
    threads: usize,

    /// Timing repetitions for the weighted path in bench mode; the fastest
    /// run is reported.
    #[arg(long, default_value_t = 3)]
    trials: usize,

    /// Also write the weighted rules (l,i,a,b,q,x,w) as CSV in assemble
    /// mode; requires --rule wq.
    #[arg(long, default_value_t = false)]
    dump_rules: bool,

    /// Recorded in output metadata so runs can be reproduced; reserved for
    /// randomized diagnostics.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let config = RunConfig::parse();
    match run(&config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(config: &RunConfig) -> Result<(), String> {
    if !(1..=3).contains(&config.d) {
        return Err(format!("--d must be 1, 2, or 3 (got {})", config.d));
    }
    if config.threads == 0 {
        return Err("--threads must be at least 1".into());
    }
    if config.trials == 0 {
        return Err("--trials must be at least 1".into());
    }
    let degrees = parse_degrees(&config.p)?;
    fs::create_dir_all(&config.out)
        .map_err(|e| format!("cannot create output directory {}: {e}", config.out.display()))?;
    match config.command {
        Command::Assemble => run_assemble(config, &degrees),
        Command::Convergence => run_convergence(config, &degrees),
        Command::Bench => run_bench_cmd(config, &degrees),
    }
}

/// "3" -> [3], "2:8" -> [2..=8], "2,4,6" -> the list; all within 1..=10.
fn parse_degrees(text: &str) -> Result<Vec<usize>, String> {
    let bad = |_| format!("--p expects a degree like \"3\", a range like \"2:8\", or a list like \"2,4,6\" (got \"{text}\")");
    let degrees: Vec<usize> = if let Some((lo, hi)) = text.split_once(':') {
        let lo: usize = lo.trim().parse().map_err(bad)?;
        let hi: usize = hi.trim().parse().map_err(bad)?;
        if lo > hi {
            return Err(format!("--p range \"{text}\" is empty (start exceeds end)"));
        }
        (lo..=hi).collect()
    } else {
        text.split(',')
            .map(|part| part.trim().parse::<usize>().map_err(bad))
            .collect::<Result<_, _>>()?
    };
    for &p in &degrees {
        if !(1..=10).contains(&p) {
            return Err(format!("--p values must lie in 1..=10 (got {p})"));
        }
    }
    Ok(degrees)
}

fn parse_nel_list(text: &str) -> Result<Vec<usize>, String> {
    let list: Vec<usize> = text
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| format!("--nel expects a positive integer or comma list (got \"{text}\")"))
        })
        .collect::<Result<_, _>>()?;
    if list.iter().any(|&n| n == 0) {
        return Err("--nel values must be at least 1".into());
    }
    Ok(list)
}

fn single_nel(config: &RunConfig, default: usize) -> Result<usize, String> {
    match &config.nel {
        None => Ok(default),
        Some(text) => {
            let list = parse_nel_list(text)?;
            if list.len() != 1 {
                return Err(
                    "--nel takes a single value here; a comma list is the convergence ladder"
                        .into(),
                );
            }
            Ok(list[0])
        }
    }
}

fn load_geometry(config: &RunConfig) -> Result<GeometryMap, String> {
    let geom = if config.geometry == "identity" {
        GeometryMap::identity(config.d)
    } else {
        GeometryMap::from_json_file(std::path::Path::new(&config.geometry))
            .map_err(|e| format!("geometry file {}: {e}", config.geometry))?
    };
    if geom.dim() != config.d {
        return Err(format!(
            "--geometry has dimension {} but --d is {}",
            geom.dim(),
            config.d
        ));
    }
    Ok(geom)
}

fn run_assemble(config: &RunConfig, degrees: &[usize]) -> Result<(), String> {
    let geom = load_geometry(config)?;
    let n_el = single_nel(config, 8)?;
    let rule: RuleKind = config.rule.unwrap_or(RuleArg::Wq).into();
    if config.dump_rules && rule != RuleKind::Wq {
        return Err("--dump-rules requires the weighted rule (--rule wq)".into());
    }
    println!(
        "assemble d={} nel={} rule={} geometry={} seed={}",
        config.d,
        n_el,
        rule.name(),
        config.geometry,
        config.seed
    );
    for &p in degrees {
        let space = SplineSpace::uniform(config.d, p, n_el)
            .map_err(|e| format!("invalid space for p={p}, nel={n_el}: {e}"))?;
        for op in [Operator::Mass, Operator::Stiffness] {
            let (matrix, stats) =
                assemble_operator(&space, &geom, op, rule, None, config.threads)
                    .map_err(|e| format!("assembly failed for p={p} {}: {e}", op.name()))?;
            let name = format!("{}_{}_d{}_p{}_nel{}.mtx", op.name(), rule.name(), config.d, p, n_el);
            let path = config.out.join(&name);
            let metadata = [
                ("operator", op.name().to_string()),
                ("rule", rule.name().to_string()),
                ("d", config.d.to_string()),
                ("p", p.to_string()),
                ("nel", n_el.to_string()),
                ("seed", config.seed.to_string()),
            ];
            save_matrix_market(&matrix, &metadata, &path)
                .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
            let residual = stats
                .rule_residual
                .map(|r| format!(" rule_residual_max={r:.3e}"))
                .unwrap_or_default();
            println!(
                "  p={p} {}: n_dof={} nnz={} rules={:.3e}s coeff={:.3e}s rows={:.3e}s sparse={:.3e}s total={:.3e}s{residual} -> {}",
                op.name(),
                matrix.nrows(),
                matrix.nnz(),
                stats.rules_seconds,
                stats.coeff_seconds,
                stats.rows_seconds,
                stats.sparse_seconds,
                stats.total_seconds(),
                path.display()
            );
        }
        if config.dump_rules {
            let path = config.out.join(format!("rules_d{}_p{}_nel{}.csv", config.d, p, n_el));
            dump_rules_csv(&space, &path)?;
            println!("  p={p} rules -> {}", path.display());
        }
    }
    Ok(())
}

/// Full weighted-rule dump: one line per (direction, row, family, point).
fn dump_rules_csv(space: &SplineSpace, path: &std::path::Path) -> Result<(), String> {
    let file = File::create(path).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    let mut out = BufWriter::new(file);
    let io_err = |e: std::io::Error| format!("cannot write {}: {e}", path.display());
    writeln!(out, "l,i,a,b,q,x,w").map_err(io_err)?;
    for (l, kv) in space.dirs().iter().enumerate() {
        let rules = DirectionRules::build(kv)
            .map_err(|e| format!("rule construction failed in direction {l}: {e}"))?;
        let points = rules.grid().points().to_vec();
        for i in 0..kv.num_functions() {
            for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let weights = rules.weights(a, b, i);
                for (offset, q) in rules.grid().active(i).enumerate() {
                    writeln!(out, "{l},{i},{a},{b},{q},{:e},{:e}", points[q], weights[offset])
                        .map_err(io_err)?;
                }
            }
        }
    }
    out.flush().map_err(io_err)
}

fn run_convergence(config: &RunConfig, degrees: &[usize]) -> Result<(), String> {
    if config.d != 1 {
        return Err("--cmd convergence requires --d 1".into());
    }
    if config.geometry != "identity" {
        return Err("the convergence study fixes its own geometry; drop --geometry".into());
    }
    let ladder = match &config.nel {
        None => DEFAULT_LADDER.to_vec(),
        Some(text) => parse_nel_list(text)?,
    };
    if ladder.iter().any(|&n| n < 2) {
        return Err("convergence meshes need at least 2 elements (got a 1)".into());
    }
    let rules: Vec<RuleKind> = match config.rule {
        Some(r) => vec![r.into()],
        None => vec![RuleKind::Wq, RuleKind::Sgq],
    };
    let problem = exponential_problem();
    let path = config.out.join("convergence.csv");
    let file = File::create(&path).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    let mut out = BufWriter::new(file);
    let io_err = |e: std::io::Error| format!("cannot write {}: {e}", path.display());
    write_convergence_header(&mut out).map_err(io_err)?;
    println!("convergence ladder={ladder:?} seed={}", config.seed);
    for &p in degrees {
        for &rule in &rules {
            let rows = run_ladder(&problem, p, &ladder, rule, config.threads)
                .map_err(|e| format!("solve failed for p={p} {}: {e}", rule.name()))?;
            for row in &rows {
                println!(
                    "  p={p} rule={} nel={:>4} l2={:.3e} (rate {}) h1={:.3e} (rate {}) max={:.3e}",
                    rule.name(),
                    row.n_el,
                    row.l2_error,
                    row.l2_rate.map(|r| format!("{r:.2}")).unwrap_or_else(|| "  - ".into()),
                    row.h1_error,
                    row.h1_rate.map(|r| format!("{r:.2}")).unwrap_or_else(|| "  - ".into()),
                    row.linf_error
                );
            }
            write_convergence_rows(&mut out, p, rule, &rows).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_bench_cmd(config: &RunConfig, degrees: &[usize]) -> Result<(), String> {
    let geom = load_geometry(config)?;
    let n_el = single_nel(config, 8)?;
    let bench_config = BenchConfig {
        dim: config.d,
        degrees: degrees.to_vec(),
        n_el,
        trials: config.trials,
        threads: config.threads,
    };
    println!(
        "bench d={} nel={} trials={} threads={} seed={}",
        config.d, n_el, config.trials, config.threads, config.seed
    );
    let records = run_bench(&bench_config, &geom, &[RuleKind::Wq, RuleKind::Sgq])
        .map_err(|e| format!("bench run failed: {e}"))?;
    for r in &records {
        println!(
            "  p={} rule={:>3} n_dof={} nnz={} rules={:.3e}s coeff={:.3e}s rows={:.3e}s sparse={:.3e}s total={:.3e}s flops={}",
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
        );
    }
    if degrees.len() >= 2 {
        let wq: Vec<&BenchRecord> =
            records.iter().filter(|r| r.rule == RuleKind::Wq).collect();
        let ps: Vec<f64> = wq.iter().map(|r| r.degree as f64).collect();
        let flops: Vec<f64> = wq.iter().map(|r| r.stats.mode_product_flops as f64).collect();
        let sparse: Vec<f64> = wq.iter().map(|r| r.stats.sparse_seconds).collect();
        println!("  wq flop count vs p: fitted exponent {:.3}", fit_log_slope(&ps, &flops));
        println!(
            "  wq sparse-build time vs p: fitted exponent {:.3}",
            fit_log_slope(&ps, &sparse)
        );
    }
    let path = config.out.join("bench.csv");
    let file = File::create(&path).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    let mut out = BufWriter::new(file);
    write_bench_csv(&mut out, &records)
        .and_then(|()| out.flush())
        .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}
