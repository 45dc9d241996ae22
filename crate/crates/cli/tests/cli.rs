use std::path::Path;
use std::process::Command as Process;

use clap::Parser;
use mfg_cli::config::{CustomProblem, DiscretizationConfig, OutputConfig, ProblemConfig, ProblemKind, SolverConfig};
use mfg_cli::{cmd_sample, cmd_solve, cmd_validate, run, validate_config, Cli, RunConfig};
use mfg_core::build_level_sets;

fn small_config(dir: &Path) -> RunConfig {
    RunConfig {
        problem: ProblemConfig {
            kind: ProblemKind::Custom,
            theta1: 1.0,
            theta2: 0.5,
            sigma: 0.1,
            custom: Some(CustomProblem {
                horizon: 0.5,
                drift: "-x".into(),
                gain: "1".into(),
                control_cost: "a^2/2".into(),
                running: "(x - 0.1)^2".into(),
                terminal: "0".into(),
                density: "1".into(),
                support: [-0.25, 0.25],
            }),
        },
        discretization: DiscretizationConfig {
            n_t: 10,
            n_s: 40,
            epsilon: 0.02,
            control_bound: 2.0,
        },
        solver: SolverConfig {
            deltas: vec![0.1, 0.01],
            max_iters: 200,
        },
        output: OutputConfig {
            dir: dir.to_path_buf(),
            ..OutputConfig::default()
        },
    }
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn solve_writes_the_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.output.dump_values = true;
    cfg.output.dump_kernels = true;
    cfg.output.dump_levelsets = true;
    cfg.output.dump_paths = true;
    cfg.output.path_count = 5;
    assert_eq!(cmd_solve(&cfg), 0);
    for name in [
        "config.toml",
        "report.json",
        "error_trace.csv",
        "flow.csv",
        "values.csv",
        "kernel.csv",
        "levelsets.csv",
        "paths.csv",
    ] {
        let text = read(&tmp.path().join(name));
        assert!(text.ends_with('\n'), "{name} lacks a final newline");
    }
    assert_eq!(RunConfig::load(&tmp.path().join("config.toml")).unwrap(), cfg);
    let report: serde_json::Value = serde_json::from_str(&read(&tmp.path().join("report.json"))).unwrap();
    assert_eq!(report["converged"], true);
    let stages = report["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 2);
    assert_eq!(stages[1]["delta"], 0.01);
    assert!(report["exploitability"].as_f64().unwrap() <= 0.01);
    let trace = read(&tmp.path().join("error_trace.csv"));
    assert!(trace.starts_with("iteration,stage,delta,error\n"));
    assert_eq!(trace.lines().count() - 1, report["total_iterations"].as_u64().unwrap() as usize);
    assert!(read(&tmp.path().join("flow.csv")).starts_with("k,t,x1,mass\n"));
    assert_eq!(read(&tmp.path().join("paths.csv")).lines().count(), 1 + 5 * 11);
}

#[test]
fn iteration_cap_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.solver.deltas = vec![1e-9];
    cfg.solver.max_iters = 1;
    assert_eq!(cmd_solve(&cfg), 2);
    let report: serde_json::Value = serde_json::from_str(&read(&tmp.path().join("report.json"))).unwrap();
    assert_eq!(report["converged"], false);
    assert_eq!(report["total_iterations"], 1);
}

#[test]
fn malformed_config_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[problem]\nkind = \"example1\"\ntheta1 = \"one\"\n").unwrap();
    let cli = Cli::parse_from(["mfg", "solve", "--config", path.to_str().unwrap()]);
    assert_eq!(run(cli), 1);

    let out = Process::new(env!("CARGO_BIN_EXE_mfg"))
        .args(["solve", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("theta1") && stderr.contains("line"), "{stderr}");
}

#[test]
fn binary_reports_non_convergence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(&tmp.path().join("run"));
    let path = tmp.path().join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let out = Process::new(env!("CARGO_BIN_EXE_mfg"))
        .args(["solve", "--config", path.to_str().unwrap(), "--deltas", "1e-9", "--max-iters", "1"])
        .env("MFG_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&read(&tmp.path().join("run/report.json"))).unwrap();
    assert_eq!(report["threads"], 2);
}

fn example1_config(dir: &Path, n_s: usize) -> RunConfig {
    RunConfig {
        problem: ProblemConfig::example1(1.0, 0.0),
        discretization: DiscretizationConfig {
            n_t: 30,
            n_s,
            epsilon: 0.002,
            control_bound: 4.0,
        },
        solver: SolverConfig::default(),
        output: OutputConfig {
            dir: dir.to_path_buf(),
            ..OutputConfig::default()
        },
    }
}

#[test]
fn validate_accepts_example1_and_rejects_coarse_time_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = example1_config(tmp.path(), 150);
    assert_eq!(cmd_validate(&cfg), 0);
    let too_coarse = example1_config(tmp.path(), 20);
    assert_eq!(cmd_validate(&too_coarse), 1);
}

#[test]
fn forecast_matches_the_built_level_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = example1_config(tmp.path(), 150);
    let summary = validate_config(&cfg).unwrap();
    let problem = cfg.build_problem().unwrap();
    let ls = build_level_sets(&problem, &cfg.discretization().unwrap(), usize::MAX).unwrap();
    let built = ls.sizes();
    let n_t = built.len() - 1;
    let rel = (summary.forecast[n_t] - built[n_t] as f64).abs() / built[n_t] as f64;
    assert!(rel <= 0.1, "forecast {} vs built {}", summary.forecast[n_t], built[n_t]);
}

#[test]
fn sampling_is_seeded_and_needs_a_solve_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("solve");
    assert_eq!(cmd_solve(&small_config(&dir)), 0);

    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    assert_eq!(cmd_sample(&dir, 10, Some(3), Some(&a), 1), 0);
    assert_eq!(cmd_sample(&dir, 10, Some(3), Some(&b), 3), 0);
    let text = read(&a);
    assert_eq!(text, read(&b));
    assert_eq!(text.lines().count(), 1 + 10 * 11);
    assert!(text.starts_with("path_id,k,t,x1\n"));

    let c = tmp.path().join("c.csv");
    assert_eq!(cmd_sample(&dir, 10, Some(4), Some(&c), 1), 0);
    assert_ne!(text, read(&c));

    let empty = tmp.path().join("empty.csv");
    assert_eq!(cmd_sample(&dir, 0, Some(3), Some(&empty), 1), 0);
    assert_eq!(read(&empty), "path_id,k,t,x1\n");

    assert_eq!(cmd_sample(&tmp.path().join("missing"), 10, None, Some(&c), 1), 1);
}

#[test]
fn stored_kernel_and_rebuilt_kernel_sample_alike() {
    let tmp = tempfile::tempdir().unwrap();
    let plain = tmp.path().join("plain");
    let dumped = tmp.path().join("dumped");
    assert_eq!(cmd_solve(&small_config(&plain)), 0);
    let mut cfg = small_config(&dumped);
    cfg.output.dump_kernels = true;
    assert_eq!(cmd_solve(&cfg), 0);
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    assert_eq!(cmd_sample(&plain, 20, Some(1), Some(&a), 1), 0);
    assert_eq!(cmd_sample(&dumped, 20, Some(1), Some(&b), 1), 0);
    assert_eq!(read(&a), read(&b));
}
