//! End-to-end checks of the command-line driver: exit codes, file outputs,
//! config-file merging, and the verify/bench subcommands.

use std::path::Path;
use std::process::{Command, Output};

fn pfsolve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pfsolve"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn solve_with_mismatched_map_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    // write a dipole map for a 12x24 shell, then solve on 16x32
    let g = pfsolve::mesh::build_mesh(&pfsolve::mesh::MeshSpec {
        nr: 4,
        nt: 12,
        np: 24,
        r0: 1.0,
        r1: 2.5,
        r_stretch: 1.0,
    })
    .unwrap();
    let map = pfsolve::io::synth_map(pfsolve::io::MapKind::Dipole, &g).unwrap();
    let map_path = dir.path().join("wrong.pf3d");
    pfsolve::io::write_map(&map_path, &map).unwrap();

    let out = pfsolve(&[
        "solve",
        "--nr",
        "8",
        "--nt",
        "16",
        "--np",
        "32",
        "--map",
        &format!("file:{}", map_path.display()),
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn solve_hitting_iteration_cap_exits_nonconverged_with_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = pfsolve(&[
        "solve",
        "--nr",
        "8",
        "--nt",
        "8",
        "--np",
        "16",
        "--max-iter",
        "1",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stats = std::fs::read_to_string(out_dir.join("stats.csv")).unwrap();
    assert!(stats.contains("converged,false"));
    assert!(stats.contains("iterations,1"));
    assert!(out_dir.join("residuals.csv").exists());
}

#[test]
fn verify_reports_second_order_and_passes() {
    let out = pfsolve(&[
        "verify",
        "--nr",
        "12",
        "--nt",
        "12",
        "--np",
        "24",
        "--pc",
        "2",
        "--verify-levels",
        "3",
    ]);
    let text = stdout_of(&out);
    assert_eq!(out.status.code(), Some(0), "stdout: {text}");
    assert!(text.contains("verification passed"));
    let order: f64 = text
        .lines()
        .find(|l| l.starts_with("observed_order_linf"))
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|v| v.parse().ok())
        .expect("order line present");
    assert!((1.8..=2.2).contains(&order), "order {order}");
}

#[test]
fn verify_single_level_prints_errors_without_order() {
    let out = pfsolve(&[
        "verify",
        "--nr",
        "8",
        "--nt",
        "8",
        "--np",
        "16",
        "--verify-levels",
        "1",
    ]);
    let text = stdout_of(&out);
    assert_eq!(out.status.code(), Some(0), "stdout: {text}");
    assert!(text.contains("Linf_error"));
    assert!(!text.contains("observed_order_linf"));
}

#[test]
fn verify_holds_order_on_stretched_grids() {
    let out = pfsolve(&[
        "verify",
        "--nr",
        "12",
        "--nt",
        "12",
        "--np",
        "24",
        "--stretch",
        "1.06",
        "--pc",
        "2",
        "--verify-levels",
        "2",
    ]);
    let text = stdout_of(&out);
    assert_eq!(out.status.code(), Some(0), "stdout: {text}");
    assert!(text.contains("verification passed"));
}

#[test]
fn verify_rejects_random_maps() {
    let out = pfsolve(&["verify", "--map", "random:1,4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_harmonic_wall_converges_at_second_order() {
    let out = pfsolve(&[
        "verify",
        "--nr",
        "12",
        "--nt",
        "12",
        "--np",
        "24",
        "--map",
        "harmonic:2,1",
        "--upper",
        "wall",
        "--pc",
        "2",
        "--verify-levels",
        "2",
    ]);
    let text = stdout_of(&out);
    assert_eq!(out.status.code(), Some(0), "stdout: {text}");
    assert!(text.contains("verification passed"));
}

#[test]
fn bench_sweeps_workers_and_marks_infeasible_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = pfsolve(&[
        "bench",
        "--pc",
        "2",
        "--bench-workers",
        "1,2,1000",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    let text = stdout_of(&out);
    assert_eq!(out.status.code(), Some(0), "stdout: {text}");
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("workers,topology,iterations"));
    assert!(lines[1].starts_with("1,1x1x1,"));
    assert!(lines[1].contains(",1.000,ok"));
    assert!(lines[2].starts_with("2,"));
    assert!(lines[3].starts_with("1000,") && lines[3].ends_with("skipped"));
    assert!(dir.path().join("bench.csv").exists());
    // PC2 iteration counts may not drop as workers increase
    let it1: usize = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    let it2: usize = lines[2].split(',').nth(2).unwrap().parse().unwrap();
    assert!(it2 >= it1);
}

#[test]
fn repeated_bench_gives_identical_iteration_columns() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "bench",
        "--nr",
        "8",
        "--nt",
        "8",
        "--np",
        "16",
        "--pc",
        "2",
        "--bench-workers",
        "1,2,4",
        "--out-dir",
    ];
    let iterations = |out: &Output| -> Vec<String> {
        stdout_of(out)
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap_or("").to_string())
            .collect()
    };
    let a = pfsolve(&[&args[..], &[dir.path().join("a").to_str().unwrap()]].concat());
    let b = pfsolve(&[&args[..], &[dir.path().join("b").to_str().unwrap()]].concat());
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(iterations(&a), iterations(&b));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(
        &cfg_path,
        "# base configuration\nnr=8\nnt=8\nnp=16\npc=2\nout_dir=unused\n",
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = pfsolve(&[
        "solve",
        "--config",
        cfg_path.to_str().unwrap(),
        "--nt",
        "12",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    let text = stdout_of(&out);
    assert_eq!(out.status.code(), Some(0), "stdout: {text}");
    assert!(text.contains("grid: 8x12x16"), "stdout: {text}");
    assert!(out_dir.join("phi.pf3d").exists());
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.cfg");
    std::fs::write(&cfg_path, "frobnicate=1\n").unwrap();
    let out = pfsolve(&["solve", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mesh_file_defines_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mesh_path = dir.path().join("grid.mesh");
    let mut text = String::from("r 4\n");
    for i in 0..=4 {
        text.push_str(&format!("{}\n", 1.0 + 0.25 * i as f64));
    }
    text.push_str("theta 6\n");
    for j in 0..=6 {
        text.push_str(&format!("{}\n", std::f64::consts::PI * j as f64 / 6.0));
    }
    text.push_str("phi 8\n");
    for k in 0..=8 {
        text.push_str(&format!(
            "{}\n",
            2.0 * std::f64::consts::PI * k as f64 / 8.0
        ));
    }
    std::fs::write(&mesh_path, text).unwrap();
    let out_dir = dir.path().join("out");
    let out = pfsolve(&[
        "solve",
        "--mesh-file",
        mesh_path.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    let text = stdout_of(&out);
    assert_eq!(out.status.code(), Some(0), "stdout: {text}");
    assert!(text.contains("grid: 4x6x8"), "stdout: {text}");
}

#[test]
fn closed_wall_random_map_solve_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = pfsolve(&[
        "solve",
        "--nr",
        "8",
        "--nt",
        "8",
        "--np",
        "16",
        "--upper",
        "wall",
        "--map",
        "random:5,4",
        "--workers",
        "2",
        "--out-dir",
        dir.path().join("out").to_str().unwrap(),
    ]);
    let text = stdout_of(&out);
    assert_eq!(out.status.code(), Some(0), "stdout: {text}");
    assert!(text.contains("converged: true"));
}

fn assert_exists(p: &Path) {
    assert!(p.exists(), "missing {}", p.display());
}

#[test]
fn solve_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = pfsolve(&[
        "solve",
        "--nr",
        "8",
        "--nt",
        "8",
        "--np",
        "16",
        "--workers",
        "4",
        "--pc",
        "2",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    for f in [
        "phi.pf3d",
        "br.pf3d",
        "bt.pf3d",
        "bp.pf3d",
        "stats.csv",
        "residuals.csv",
    ] {
        assert_exists(&out_dir.join(f));
    }
    let text = stdout_of(&out);
    assert!(text.contains("workers: 4"));
}
