//! Command-line driver: `solve` runs one problem end to end, `verify` runs a
//! mesh-refinement study against the analytic solution, `bench` sweeps worker
//! counts and reports a timing CSV.
//!
//! Configuration comes from flags plus an optional `key=value` file; flags
//! win. Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 solver did not converge, 4 verification order below threshold.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::field::{gradient, VectorField3D};
use crate::io::{self, MapKind, MapSource};
use crate::mesh::{build_mesh, read_mesh_file, Grid3D, MeshSpec};
use crate::operator::{
    assemble, enforce_solvability, BoundarySpec, GhostMode, ScalarMap2D, UpperBc,
};
use crate::parallel::{decompose, run_workers, ParallelStats};
use crate::solver::{default_max_iter, PcChoice, SolveConfig, TimerCategory, TIMER_CATEGORIES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NONCONVERGED: i32 = 3;
pub const EXIT_VERIFY_FAILED: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "pfsolve",
    version,
    about = "Potential-field solver for the solar corona"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Solve one potential-field problem and write Phi, B and stats
    Solve(RunArgs),
    /// Mesh-refinement study against the analytic solution
    Verify(VerifyArgs),
    /// Worker-count sweep with a CSV timing report
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Optional key=value config file; explicit flags win
    #[arg(long)]
    config: Option<PathBuf>,
    /// Radial cell count
    #[arg(long)]
    nr: Option<usize>,
    /// Theta cell count
    #[arg(long)]
    nt: Option<usize>,
    /// Phi cell count
    #[arg(long)]
    np: Option<usize>,
    /// Inner radius (solar radii)
    #[arg(long)]
    r0: Option<f64>,
    /// Outer radius (solar radii)
    #[arg(long)]
    r1: Option<f64>,
    /// Radial geometric stretch ratio (1 = uniform)
    #[arg(long)]
    stretch: Option<f64>,
    /// Face-coordinate mesh file; takes precedence over the grid flags
    #[arg(long)]
    mesh_file: Option<PathBuf>,
    /// Upper boundary condition: wall | ss
    #[arg(long)]
    upper: Option<String>,
    /// Boundary map: file:PATH | dipole | harmonic:L,M | random:SEED,LMAX
    #[arg(long)]
    map: Option<String>,
    /// Preconditioner: 1 (diagonal) | 2 (block ILU0)
    #[arg(long)]
    pc: Option<u8>,
    /// Relative residual tolerance
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration cap (default 10x the unknown count)
    #[arg(long)]
    max_iter: Option<usize>,
    /// Worker count for the decomposed solve
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Sum collectives in arrival order instead of deterministic rank order
    #[arg(long)]
    nondeterministic_reduce: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Number of grids in the refinement ladder (each doubles the previous)
    #[arg(long, default_value_t = 3)]
    verify_levels: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated worker counts
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    bench_workers: Vec<usize>,
}

#[derive(Debug, Clone)]
enum GridSource {
    Spec(MeshSpec),
    File(PathBuf),
}

/// Fully resolved run configuration (flags over config file over defaults).
#[derive(Debug, Clone)]
pub struct RunConfig {
    grid_source: GridSource,
    upper: UpperBc,
    map_source: MapSource,
    pc: PcChoice,
    tol: f64,
    max_iter: Option<usize>,
    workers: usize,
    out_dir: PathBuf,
    deterministic: bool,
}

const CONFIG_KEYS: [&str; 15] = [
    "nr",
    "nt",
    "np",
    "r0",
    "r1",
    "stretch",
    "mesh_file",
    "upper",
    "map",
    "pc",
    "tol",
    "max_iter",
    "workers",
    "out_dir",
    "nondeterministic_reduce",
];

fn read_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "config line {}: expected key=value, got `{line}`",
                lineno + 1
            )));
        };
        let key = k.trim().to_string();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!(
                "config line {}: unknown key `{key}`",
                lineno + 1
            )));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

fn pick<T: std::str::FromStr>(
    flag: Option<T>,
    file: &HashMap<String, String>,
    key: &str,
) -> Result<Option<T>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match file.get(key) {
        Some(s) => s
            .parse::<T>()
            .map(Some)
            .map_err(|_| Error::Config(format!("config key `{key}`: cannot parse `{s}`"))),
        None => Ok(None),
    }
}

fn parse_upper(s: &str) -> Result<UpperBc> {
    match s {
        "wall" => Ok(UpperBc::ClosedWall),
        "ss" => Ok(UpperBc::SourceSurface),
        other => Err(Error::Config(format!(
            "upper boundary must be `wall` or `ss`, got `{other}`"
        ))),
    }
}

fn parse_pc(v: u8) -> Result<PcChoice> {
    match v {
        1 => Ok(PcChoice::Pc1),
        2 => Ok(PcChoice::Pc2),
        other => Err(Error::Config(format!("pc must be 1 or 2, got {other}"))),
    }
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let file = match &args.config {
        Some(p) => read_config_file(p)?,
        None => HashMap::new(),
    };
    let mesh_file: Option<PathBuf> = pick(args.mesh_file.clone(), &file, "mesh_file")?;
    let grid_source = match mesh_file {
        Some(p) => GridSource::File(p),
        None => GridSource::Spec(MeshSpec {
            nr: pick(args.nr, &file, "nr")?.unwrap_or(16),
            nt: pick(args.nt, &file, "nt")?.unwrap_or(16),
            np: pick(args.np, &file, "np")?.unwrap_or(32),
            r0: pick(args.r0, &file, "r0")?.unwrap_or(1.0),
            r1: pick(args.r1, &file, "r1")?.unwrap_or(2.5),
            r_stretch: pick(args.stretch, &file, "stretch")?.unwrap_or(1.0),
        }),
    };
    let upper = parse_upper(
        &pick(args.upper.clone(), &file, "upper")?.unwrap_or_else(|| "ss".to_string()),
    )?;
    let map_source: MapSource = pick(args.map.clone(), &file, "map")?
        .unwrap_or_else(|| "dipole".to_string())
        .parse()?;
    let pc = parse_pc(pick(args.pc, &file, "pc")?.unwrap_or(1))?;
    let tol = pick(args.tol, &file, "tol")?.unwrap_or(1e-9);
    let max_iter = pick(args.max_iter, &file, "max_iter")?;
    let workers = pick(args.workers, &file, "workers")?.unwrap_or(1);
    let out_dir = pick(args.out_dir.clone(), &file, "out_dir")?.unwrap_or_else(|| "out".into());
    let file_nondet = file
        .get("nondeterministic_reduce")
        .map(|s| s == "true" || s == "1")
        .unwrap_or(false);
    Ok(RunConfig {
        grid_source,
        upper,
        map_source,
        pc,
        tol,
        max_iter,
        workers,
        out_dir,
        deterministic: !(args.nondeterministic_reduce || file_nondet),
    })
}

/// Build the grid; returns seconds spent reading a mesh file, if any.
fn build_grid(cfg: &RunConfig) -> Result<(Arc<Grid3D>, f64)> {
    match &cfg.grid_source {
        GridSource::Spec(spec) => Ok((Arc::new(build_mesh(spec)?), 0.0)),
        GridSource::File(path) => {
            let t = Instant::now();
            let g = read_mesh_file(path)?;
            Ok((Arc::new(g), t.elapsed().as_secs_f64()))
        }
    }
}

/// Load or synthesize the boundary map; returns file-read seconds.
fn build_map(cfg: &RunConfig, grid: &Grid3D) -> Result<(ScalarMap2D, f64)> {
    match &cfg.map_source {
        MapSource::File(path) => {
            let t = Instant::now();
            let map = io::read_map(path)?;
            let secs = t.elapsed().as_secs_f64();
            io::check_map_matches_grid(&map, grid)?;
            Ok((map, secs))
        }
        MapSource::Synth(kind) => Ok((io::synth_map(*kind, grid)?, 0.0)),
    }
}

fn prepare_bc(cfg: &RunConfig, grid: &Grid3D, map: ScalarMap2D) -> Result<BoundarySpec> {
    let br0 = match cfg.upper {
        // the pure-Neumann problem needs zero net flux through the surface
        UpperBc::ClosedWall => enforce_solvability(&map, grid)?,
        UpperBc::SourceSurface => map,
    };
    Ok(BoundarySpec {
        upper: cfg.upper,
        br0,
    })
}

fn solve_cfg(cfg: &RunConfig, n: usize) -> SolveConfig {
    SolveConfig::new(
        cfg.tol,
        cfg.max_iter.unwrap_or_else(|| default_max_iter(n)),
        cfg.pc,
    )
}

struct SolveOutput {
    grid: Arc<Grid3D>,
    bc: Arc<BoundarySpec>,
    x: Vec<f64>,
    pstats: ParallelStats,
    io_seconds: f64,
}

fn run_solve(cfg: &RunConfig, workers: usize) -> Result<SolveOutput> {
    let (grid, io_grid) = build_grid(cfg)?;
    let (map, io_map) = build_map(cfg, &grid)?;
    let bc = Arc::new(prepare_bc(cfg, &grid, map)?);
    let scfg = solve_cfg(cfg, grid.n_cells());
    let (x, pstats) = run_workers(&grid, &bc, workers, &scfg, cfg.deterministic)?;
    Ok(SolveOutput {
        grid,
        bc,
        x,
        pstats,
        io_seconds: io_grid + io_map,
    })
}

fn write_outputs(
    out_dir: &Path,
    grid: &Grid3D,
    x: &[f64],
    fld: &VectorField3D,
    pstats: &ParallelStats,
    io_before: f64,
) -> Result<(Vec<PathBuf>, f64)> {
    std::fs::create_dir_all(out_dir)?;
    let (nr, nt, np) = grid.dims();
    let rc: Vec<f64> = (0..nr).map(|i| grid.rmesh.center(i)).collect();
    let tc: Vec<f64> = (0..nt).map(|j| grid.tmesh.center(j)).collect();
    let pc: Vec<f64> = (0..np).map(|k| grid.pmesh.center(k)).collect();
    let dims = [nr, nt, np];
    let coords: [&[f64]; 3] = [&rc, &tc, &pc];

    let t = Instant::now();
    let mut written = Vec::new();
    for (name, data) in [
        ("phi.pf3d", x),
        ("br.pf3d", fld.br.as_slice()),
        ("bt.pf3d", fld.bt.as_slice()),
        ("bp.pf3d", fld.bp.as_slice()),
    ] {
        let path = out_dir.join(name);
        io::write_field(&path, &dims, &coords, data)?;
        written.push(path);
    }
    let rpath = out_dir.join("residuals.csv");
    io::write_residuals_csv(&pstats.stats.residual_history, &rpath)?;
    written.push(rpath);
    let io_seconds = io_before + t.elapsed().as_secs_f64();
    // stats last so the io_seconds row covers the field writes
    let spath = out_dir.join("stats.csv");
    io::write_stats_csv(&pstats.stats, io_seconds, &spath)?;
    written.push(spath);
    Ok((written, io_seconds))
}

fn cmd_solve(args: &RunArgs) -> Result<i32> {
    let cfg = resolve(args)?;
    let out = run_solve(&cfg, cfg.workers)?;
    let stats = &out.pstats.stats;

    // gradient needs the boundary-data ghost closure
    let op = assemble(out.grid.clone(), out.bc.clone())?;
    let xg = op.ghosted(&out.x, GhostMode::WithBoundaryData)?;
    let fld = gradient(&out.grid, &xg);

    let (written, io_seconds) = write_outputs(
        &cfg.out_dir,
        &out.grid,
        &out.x,
        &fld,
        &out.pstats,
        out.io_seconds,
    )?;

    let (nr, nt, np) = out.grid.dims();
    let (pr, pt, pp) = out.pstats.topology;
    println!("grid: {nr}x{nt}x{np} ({} cells)", out.grid.n_cells());
    println!("workers: {} (topology {pr}x{pt}x{pp})", cfg.workers);
    println!(
        "pc: {}  tol: {:e}  upper: {}",
        match cfg.pc {
            PcChoice::Pc1 => 1,
            PcChoice::Pc2 => 2,
        },
        cfg.tol,
        match cfg.upper {
            UpperBc::ClosedWall => "wall",
            UpperBc::SourceSurface => "ss",
        }
    );
    println!("iterations: {}", stats.iterations);
    println!("converged: {}", stats.converged);
    println!(
        "final_residual: {:e}",
        stats.residual_history.last().copied().unwrap_or(0.0)
    );
    println!("true_residual: {:e}", stats.true_residual);
    println!(
        "solve_seconds: {:.6}",
        stats.timers.get(TimerCategory::Total)
    );
    println!("io_seconds: {io_seconds:.6}");
    let names: Vec<String> = written.iter().map(|p| p.display().to_string()).collect();
    println!("wrote: {}", names.join(" "));

    Ok(if stats.converged {
        EXIT_OK
    } else {
        EXIT_NONCONVERGED
    })
}

/// Coefficients (a, b) of f(r) = a r^l + b r^-(l+1) with f'(r0) = 1 and the
/// upper condition f(r1) = 0 (source surface) or f'(r1) = 0 (closed wall).
fn analytic_radial_coeffs(l: u32, r0: f64, r1: f64, upper: UpperBc) -> (f64, f64) {
    let lf = l as f64;
    let m11 = lf * r0.powi(l as i32 - 1);
    let m12 = -(lf + 1.0) * r0.powi(-(l as i32) - 2);
    let (m21, m22) = match upper {
        UpperBc::SourceSurface => (r1.powi(l as i32), r1.powi(-(l as i32) - 1)),
        UpperBc::ClosedWall => (
            lf * r1.powi(l as i32 - 1),
            -(lf + 1.0) * r1.powi(-(l as i32) - 2),
        ),
    };
    let det = m11 * m22 - m12 * m21;
    ((m22) / det, (-m21) / det)
}

fn cmd_verify(vargs: &VerifyArgs) -> Result<i32> {
    let cfg = resolve(&vargs.run)?;
    let levels = vargs.verify_levels;
    if levels == 0 {
        return Err(Error::Config("verify needs at least one level".into()));
    }
    let base = match &cfg.grid_source {
        GridSource::Spec(s) => s.clone(),
        GridSource::File(_) => {
            return Err(Error::Config(
                "verify refines a spec grid; mesh files are not refinable".into(),
            ))
        }
    };
    let (l, angular): (u32, Box<dyn Fn(f64, f64) -> f64>) = match &cfg.map_source {
        MapSource::Synth(MapKind::Dipole) => (1, Box::new(|t: f64, _| t.cos())),
        MapSource::Synth(MapKind::Harmonic { l, m }) => {
            if *l == 0 {
                return Err(Error::Config(
                    "verify needs a degree >= 1 harmonic; l=0 has no flux".into(),
                ));
            }
            let (l, m) = (*l, *m);
            io::real_spherical_harmonic(l, m, 0.1, 0.1)?;
            (
                l,
                Box::new(move |t, p| {
                    io::real_spherical_harmonic(l, m, t, p).expect("degree validated")
                }),
            )
        }
        _ => {
            return Err(Error::Config(
                "verify needs a synthetic dipole or harmonic map".into(),
            ))
        }
    };
    let (ca, cb) = analytic_radial_coeffs(l, base.r0, base.r1, cfg.upper);
    let radial = |r: f64| ca * r.powi(l as i32) + cb * r.powi(-(l as i32) - 1);

    println!("level  grid            L2_error      Linf_error    order_L2  order_Linf");
    let mut errs: Vec<(f64, f64)> = Vec::new();
    let mut all_converged = true;
    for lvl in 0..levels {
        let scale = 1usize << lvl;
        // keep the total radial grading fixed while cells shrink, so the
        // refinement ladder studies one grid family
        let spec = MeshSpec {
            nr: base.nr * scale,
            nt: base.nt * scale,
            np: base.np * scale,
            r_stretch: base.r_stretch.powf(1.0 / scale as f64),
            ..base
        };
        let grid = Arc::new(build_mesh(&spec)?);
        let map = io::synth_map(
            match &cfg.map_source {
                MapSource::Synth(k) => *k,
                _ => unreachable!(),
            },
            &grid,
        )?;
        let bc = Arc::new(prepare_bc(&cfg, &grid, map)?);
        let scfg = solve_cfg(&cfg, grid.n_cells());
        let (x, pstats) = run_workers(&grid, &bc, cfg.workers, &scfg, cfg.deterministic)?;
        all_converged &= pstats.stats.converged;

        let (nr, nt, np) = grid.dims();
        let mut exact = vec![0.0; grid.n_cells()];
        for k in 0..np {
            for j in 0..nt {
                for i in 0..nr {
                    exact[grid.cell_index(i, j, k)] = radial(grid.rmesh.center(i))
                        * angular(grid.tmesh.center(j), grid.pmesh.center(k));
                }
            }
        }
        // the pure-Neumann solution is a gauge class; compare mean-free
        let (x_cmp, exact_cmp) = if cfg.upper == UpperBc::ClosedWall {
            (
                remove_volume_mean(&grid, &x),
                remove_volume_mean(&grid, &exact),
            )
        } else {
            (x.clone(), exact.clone())
        };
        let mut l2 = 0.0;
        let mut linf = 0.0f64;
        for (u, v) in x_cmp.iter().zip(&exact_cmp) {
            let d = (u - v).abs();
            l2 += d * d;
            linf = linf.max(d);
        }
        let l2 = (l2 / x_cmp.len() as f64).sqrt();
        let (o2, oinf) = if let Some((p2, pinf)) = errs.last() {
            (
                format!("{:.2}", (p2 / l2).log2()),
                format!("{:.2}", (pinf / linf).log2()),
            )
        } else {
            ("-".to_string(), "-".to_string())
        };
        println!(
            "{lvl:<6} {:<15} {l2:<13.4e} {linf:<13.4e} {o2:<9} {oinf}",
            format!("{}x{}x{}", spec.nr, spec.nt, spec.np)
        );
        errs.push((l2, linf));
    }
    if !all_converged {
        return Ok(EXIT_NONCONVERGED);
    }
    if levels >= 2 {
        let min_order = errs
            .windows(2)
            .map(|w| (w[0].1 / w[1].1).log2())
            .fold(f64::INFINITY, f64::min);
        println!("observed_order_linf: {min_order:.3}");
        if min_order < 1.8 {
            println!("verification FAILED: order {min_order:.3} < 1.8");
            return Ok(EXIT_VERIFY_FAILED);
        }
        println!("verification passed");
    }
    Ok(EXIT_OK)
}

fn remove_volume_mean(grid: &Grid3D, x: &[f64]) -> Vec<f64> {
    let (nr, nt, np) = grid.dims();
    let mut wsum = 0.0;
    let mut vsum = 0.0;
    for k in 0..np {
        for j in 0..nt {
            for i in 0..nr {
                let vol = grid.cell_volume(i, j, k).expect("in range");
                wsum += vol;
                vsum += vol * x[grid.cell_index(i, j, k)];
            }
        }
    }
    let mean = vsum / wsum;
    x.iter().map(|v| v - mean).collect()
}

fn cmd_bench(bargs: &BenchArgs) -> Result<i32> {
    let cfg = resolve(&bargs.run)?;
    let (grid, _) = build_grid(&cfg)?;
    let (map, _) = build_map(&cfg, &grid)?;
    let bc = Arc::new(prepare_bc(&cfg, &grid, map)?);
    let scfg = solve_cfg(&cfg, grid.n_cells());

    let mut lines = Vec::new();
    lines.push(
        "workers,topology,iterations,converged,solve_seconds,setup,matvec,precond,dot_allreduce,vector_ops,halo,speedup,status"
            .to_string(),
    );
    let mut baseline: Option<f64> = None;
    for &w in &bargs.bench_workers {
        if let Err(e) = decompose(w, grid.dims()) {
            eprintln!("workers={w}: skipped ({e})");
            lines.push(format!("{w},,,,,,,,,,,,skipped"));
            continue;
        }
        let (_, pstats) = run_workers(&grid, &bc, w, &scfg, cfg.deterministic)?;
        let s = &pstats.stats;
        let total = s.timers.get(TimerCategory::Total);
        let speedup = match baseline {
            Some(t0) => t0 / total,
            None => {
                baseline = Some(total);
                1.0
            }
        };
        let (pr, pt, pp) = pstats.topology;
        let mut row = format!(
            "{w},{pr}x{pt}x{pp},{},{},{total:.6}",
            s.iterations, s.converged
        );
        for c in TIMER_CATEGORIES
            .iter()
            .filter(|c| **c != TimerCategory::Total)
        {
            row.push_str(&format!(",{:.6}", s.timers.get(*c)));
        }
        lines.push(format!("{row},{speedup:.3},ok"));
    }
    let report = lines.join("\n") + "\n";
    print!("{report}");
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("bench.csv"), &report)?;
    Ok(EXIT_OK)
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Indefinite { .. } | Error::Collective(_) | Error::Protocol(_) | Error::Io(_) => {
            EXIT_RUNTIME
        }
        _ => EXIT_CONFIG,
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Solve(args) => cmd_solve(args),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::Bench(args) => cmd_bench(args),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
