//! Command-line front end: configuration loading, solve orchestration and
//! artifact emission.
//!
//! A solve writes a directory holding `config.toml`, `report.json`,
//! `error_trace.csv`, `flow.csv` and, on request, `values.csv`,
//! `kernel.csv`, `levelsets.csv` and `paths.csv`. `mfg sample` reads such a
//! directory back.

pub mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mfg_core::analysis::{path_bounds_check, sample_trajectories, RNG_NAME};
use mfg_core::fixedpoint::{tolerance_schedule_run, FPOptions, FPReport};
use mfg_core::hjb::{saturation_report, KernelRows, SaturationReport};
use mfg_core::io;
use mfg_core::lattice::forecast_sizes;
use mfg_core::problem::validate;
use mfg_core::{Flow, Scheme};
use serde::Serialize;

pub use config::RunConfig;

pub const EXIT_CONVERGED: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

/// Population-weighted saturated mass above which a run is flagged.
pub const SATURATION_FLAG: f64 = 0.01;

/// Environment variable read when `--threads` is absent.
pub const THREADS_ENV: &str = "MFG_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mfg", version, about = "Fully discrete solver for deterministic mean field games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run fictitious play over the tolerance schedule and write the artifacts.
    Solve(SolveArgs),
    /// Check admissibility of the steps and forecast the level-set sizes.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sample paths from a finished solve directory.
    Sample {
        /// Directory written by `mfg solve`.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; defaults to `paths.csv` in the solve directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = THREADS_ENV)]
        threads: Option<usize>,
    },
}

#[derive(Debug, Args, Default)]
pub struct SolveArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated tolerance schedule, e.g. `0.1,0.01,0.001`.
    #[arg(long, value_delimiter = ',')]
    pub deltas: Option<Vec<f64>>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub dump_kernels: bool,
    #[arg(long)]
    pub dump_values: bool,
    #[arg(long)]
    pub dump_levelsets: bool,
    #[arg(long)]
    pub dump_paths: bool,
}

impl SolveArgs {
    /// Command-line flags take precedence over the file.
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(t) = self.threads {
            cfg.output.threads = t;
        }
        if let Some(s) = self.seed {
            cfg.output.seed = s;
        }
        if let Some(d) = &self.deltas {
            cfg.solver.deltas = d.clone();
        }
        if let Some(m) = self.max_iters {
            cfg.solver.max_iters = m;
        }
        cfg.output.dump_kernels |= self.dump_kernels;
        cfg.output.dump_values |= self.dump_values;
        cfg.output.dump_levelsets |= self.dump_levelsets;
        cfg.output.dump_paths |= self.dump_paths;
    }
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Solve(args) => match RunConfig::load(&args.config) {
            Ok(mut cfg) => {
                args.apply(&mut cfg);
                match cfg.check() {
                    Ok(()) => cmd_solve(&cfg),
                    Err(e) => report_error(&e),
                }
            }
            Err(e) => report_error(&e),
        },
        Command::Validate { config } => match RunConfig::load(&config) {
            Ok(cfg) => cmd_validate(&cfg),
            Err(e) => report_error(&e),
        },
        Command::Sample {
            dir,
            count,
            seed,
            out,
            threads,
        } => cmd_sample(&dir, count, seed, out.as_deref(), threads.unwrap_or(0)),
    }
}

fn report_error(e: &anyhow::Error) -> i32 {
    eprintln!("error: {e:#}");
    EXIT_ERROR
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building the thread pool")?
        .install(f)
}

#[derive(Debug, Clone, Serialize)]
pub struct StageSummary {
    pub delta: f64,
    pub iterations: usize,
    pub final_error: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SaturationSummary {
    pub max_over_nodes: f64,
    pub max_weighted: Option<f64>,
    pub flagged: bool,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub problem: String,
    pub dim: usize,
    pub control_dim: usize,
    pub n_t: usize,
    pub n_s: usize,
    pub dt: f64,
    pub dx: f64,
    pub epsilon: f64,
    pub control_bound: f64,
    pub c_k: Option<f64>,
    pub level_set_sizes: Vec<usize>,
    pub total_nodes: usize,
    pub bounding_radius: f64,
    pub stages: Vec<StageSummary>,
    pub total_iterations: usize,
    pub converged: bool,
    /// `|M − br(M)|` of the written flow.
    pub exploitability: f64,
    pub saturation: SaturationSummary,
    pub threads: usize,
    pub seed: u64,
    pub rng: String,
    pub runtime_seconds: f64,
}

/// Everything a solve produced, before it is written out.
pub struct SolveOutcome {
    pub report: SolveReport,
    pub fp: FPReport,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("creating {}", path.display()))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().with_context(|| format!("writing {}", path.display()))
}

/// Creates the output directory and checks that it accepts files.
fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let probe = dir.join(".write-test");
    File::create(&probe).with_context(|| format!("{} is not writable", dir.display()))?;
    std::fs::remove_file(&probe).ok();
    Ok(())
}

/// Runs the solve and writes all artifacts into `cfg.output.dir`.
pub fn solve(cfg: &RunConfig) -> Result<SolveOutcome> {
    let started = Instant::now();
    let dir = &cfg.output.dir;
    prepare_dir(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;

    let problem = cfg.build_problem()?;
    let scheme = Scheme::new(problem, &cfg.discretization()?)?;
    let opts = FPOptions {
        max_iters: cfg.solver.max_iters,
        picard: false,
    };
    let fp = tolerance_schedule_run(&scheme, &cfg.solver.deltas, None, opts)?;
    let flow = &fp.final_flow;
    let ls = &scheme.level_sets;
    let dt = scheme.disc.dt;

    write_file(&dir.join("flow.csv"), |w| Ok(io::write_flow(w, ls, flow, dt)?))?;
    write_file(&dir.join("error_trace.csv"), |w| Ok(io::write_error_trace(w, &fp)?))?;

    let vp = scheme.values(flow)?;
    let kernel = scheme.kernel(&vp)?;
    let saturation: SaturationReport = saturation_report(&kernel, Some(flow))?;
    if cfg.output.dump_values {
        write_file(&dir.join("values.csv"), |w| Ok(io::write_values(w, ls, &vp)?))?;
    }
    if cfg.output.dump_kernels {
        write_file(&dir.join("kernel.csv"), |w| Ok(io::write_kernel(w, ls, &kernel)?))?;
    }
    if cfg.output.dump_levelsets {
        write_file(&dir.join("levelsets.csv"), |w| Ok(io::write_level_sets(w, ls)?))?;
    }
    if cfg.output.dump_paths {
        let paths = sample_trajectories(&scheme.m0, &kernel, ls, dt, cfg.output.path_count, cfg.output.seed)?;
        write_file(&dir.join("paths.csv"), |w| Ok(io::write_paths(w, ls.dim, &paths)?))?;
    }

    let exploitability = fp.error_trace.last().copied().unwrap_or(f64::NAN);
    let report = SolveReport {
        problem: scheme.problem.name.clone(),
        dim: scheme.problem.dim(),
        control_dim: scheme.problem.control_dim(),
        n_t: scheme.disc.n_t,
        n_s: scheme.disc.n_s,
        dt,
        dx: scheme.disc.dx,
        epsilon: scheme.disc.epsilon,
        control_bound: scheme.disc.control_bound,
        c_k: scheme.disc.c_k_estimate,
        level_set_sizes: ls.sizes(),
        total_nodes: ls.total_nodes(),
        bounding_radius: ls.bounding_radius,
        stages: fp
            .stages
            .iter()
            .map(|s| StageSummary {
                delta: s.delta,
                iterations: s.iterations,
                final_error: s.final_error,
                converged: s.converged,
            })
            .collect(),
        total_iterations: fp.total_iterations(),
        converged: fp.converged,
        exploitability,
        saturation: SaturationSummary {
            max_over_nodes: saturation.max_over_nodes,
            max_weighted: saturation.max_weighted,
            flagged: saturation.flag_value() > SATURATION_FLAG,
        },
        threads: rayon::current_num_threads(),
        seed: cfg.output.seed,
        rng: RNG_NAME.into(),
        runtime_seconds: started.elapsed().as_secs_f64(),
    };
    let json = serde_json::to_string_pretty(&report).context("serializing the report")?;
    std::fs::write(dir.join("report.json"), json + "\n").context("writing report.json")?;
    Ok(SolveOutcome { report, fp })
}

/// Exit code 0 on convergence, 2 when a stage hit the iteration cap, 1 on any error.
pub fn cmd_solve(cfg: &RunConfig) -> i32 {
    match in_pool(cfg.output.threads, || solve(cfg)) {
        Ok(out) => {
            let r = &out.report;
            for (i, s) in r.stages.iter().enumerate() {
                println!(
                    "stage {}: delta {} iterations {} error {:.3e}{}",
                    i + 1,
                    s.delta,
                    s.iterations,
                    s.final_error,
                    if s.converged { "" } else { " (cap reached)" }
                );
            }
            if r.saturation.flagged {
                eprintln!(
                    "warning: {:.3} of the population uses controls near the bound {}",
                    r.saturation.max_weighted.unwrap_or(r.saturation.max_over_nodes),
                    r.control_bound
                );
            }
            println!("wrote {} in {:.1}s", cfg.output.dir.display(), r.runtime_seconds);
            if r.converged {
                EXIT_CONVERGED
            } else {
                eprintln!("not converged after {} iterations", r.total_iterations);
                EXIT_NOT_CONVERGED
            }
        }
        Err(e) => report_error(&e),
    }
}

/// Result of [`validate_config`].
#[derive(Debug, Clone)]
pub struct ValidateSummary {
    pub c_k: f64,
    pub ratio: f64,
    pub max_admissible_dx: f64,
    pub initial_mass: f64,
    /// Forecast `|S_k|`, `k = 0..=N_t`.
    pub forecast: Vec<f64>,
}

pub fn validate_config(cfg: &RunConfig) -> Result<ValidateSummary> {
    let problem = cfg.build_problem()?;
    let disc = cfg.discretization()?;
    let v = validate(&problem, &disc)?;
    let forecast = forecast_sizes(&problem, &v.accepted)?;
    Ok(ValidateSummary {
        c_k: v.c_k,
        ratio: v.ratio,
        max_admissible_dx: v.max_admissible_dx,
        initial_mass: v.initial_mass,
        forecast,
    })
}

pub fn cmd_validate(cfg: &RunConfig) -> i32 {
    match validate_config(cfg) {
        Ok(s) => {
            println!("c_K = {:.6}", s.c_k);
            println!("dx/dt = {:.6}: ok (largest admissible dx {:.6})", s.ratio, s.max_admissible_dx);
            println!("initial mass = {:.9}", s.initial_mass);
            let n_t = s.forecast.len() - 1;
            println!("forecast |S_0| = {:.0}, |S_{n_t}| = {:.0}", s.forecast[0], s.forecast[n_t]);
            println!("forecast total nodes = {:.0}", s.forecast.iter().sum::<f64>());
            EXIT_CONVERGED
        }
        Err(e) => {
            if let Some(mfg_core::MfgError::Configuration {
                max_admissible_dx: Some(dx),
                ..
            }) = e.downcast_ref::<mfg_core::MfgError>()
            {
                eprintln!("largest admissible dx for this dt: {dx:.6} (n_s >= {})", (1.0 / dx).ceil());
            }
            report_error(&e)
        }
    }
}

/// Reads a solve directory and writes `count` sampled paths to `out`.
pub fn sample(dir: &Path, count: usize, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg_path = dir.join("config.toml");
    if !cfg_path.exists() {
        bail!("{} is not a solve directory (no config.toml)", dir.display());
    }
    let cfg = RunConfig::load(&cfg_path)?;
    let flow_path = dir.join("flow.csv");
    let flow_file = File::open(&flow_path).with_context(|| format!("opening {}", flow_path.display()))?;
    let scheme = Scheme::new(cfg.build_problem()?, &cfg.discretization()?)?;
    let ls = &scheme.level_sets;
    let flow: Flow = io::read_flow(BufReader::new(flow_file), ls).context("reading flow.csv")?;
    let seed = seed.unwrap_or(cfg.output.seed);

    let kernel_path = dir.join("kernel.csv");
    let vp;
    let stored;
    let lazy;
    let kernel: &dyn KernelRows = if kernel_path.exists() {
        let f = File::open(&kernel_path).with_context(|| format!("opening {}", kernel_path.display()))?;
        stored = io::read_kernel(BufReader::new(f), ls).context("reading kernel.csv")?;
        &stored
    } else {
        vp = scheme.values(&flow)?;
        lazy = scheme.kernel(&vp)?;
        &lazy
    };
    let paths = sample_trajectories(&scheme.m0, kernel, ls, scheme.disc.dt, count, seed)?;
    if !paths.is_empty() {
        let (state, velocity) = path_bounds_check(&paths);
        eprintln!("max |state| = {state:.4}, max |velocity| = {velocity:.4}");
    }
    write_file(out, |w| Ok(io::write_paths(w, ls.dim, &paths)?))
}

pub fn cmd_sample(dir: &Path, count: usize, seed: Option<u64>, out: Option<&Path>, threads: usize) -> i32 {
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("paths.csv"));
    match in_pool(threads, || sample(dir, count, seed, &out)) {
        Ok(()) => {
            println!("wrote {count} paths to {}", out.display());
            EXIT_CONVERGED
        }
        Err(e) => report_error(&e),
    }
}
