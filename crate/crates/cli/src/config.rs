//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use mfg_core::examples::{example1, example2, GaussianConvolution, DEFAULT_CONTROL_BOUND, DEFAULT_SIGMA};
use mfg_core::expr::Expr;
use mfg_core::fixedpoint::DEFAULT_MAX_ITERS;
use mfg_core::problem::{AxisBox, CostSpec, Coupling, DiscreteMeasure, InitialMeasure, ProblemSpec, SplitDynamics, StateFn};
use mfg_core::Discretization;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    pub discretization: DiscretizationConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Example1,
    Example2,
    /// Scalar problem given by expressions in `[problem.custom]`.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    /// Weights of the Gaussian congestion terms in the running and terminal costs.
    #[serde(default)]
    pub theta1: f64,
    #[serde(default)]
    pub theta2: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<CustomProblem>,
}

impl ProblemConfig {
    pub fn example1(theta1: f64, theta2: f64) -> Self {
        ProblemConfig {
            kind: ProblemKind::Example1,
            theta1,
            theta2,
            sigma: DEFAULT_SIGMA,
            custom: None,
        }
    }

    pub fn example2(theta1: f64, theta2: f64) -> Self {
        ProblemConfig {
            kind: ProblemKind::Example2,
            ..ProblemConfig::example1(theta1, theta2)
        }
    }
}

/// `γ' = drift(t,x) + gain(t,x) a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomProblem {
    pub horizon: f64,
    /// In `t, x`.
    pub drift: String,
    /// In `t, x`.
    #[serde(default = "default_gain")]
    pub gain: String,
    /// In `t, a, x`.
    #[serde(default = "default_control_cost")]
    pub control_cost: String,
    /// Measure-independent part of the running cost, in `t, x`.
    #[serde(default = "default_zero")]
    pub running: String,
    /// Measure-independent part of the terminal cost, in `x`.
    #[serde(default = "default_zero")]
    pub terminal: String,
    /// Initial density in `x`, normalized over `support` on load.
    pub density: String,
    pub support: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationConfig {
    pub n_t: usize,
    pub n_s: usize,
    pub epsilon: f64,
    #[serde(default = "default_control_bound")]
    pub control_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            deltas: default_deltas(),
            max_iters: default_max_iters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Worker threads; 0 lets the pool decide.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dump_values: bool,
    #[serde(default)]
    pub dump_kernels: bool,
    #[serde(default)]
    pub dump_paths: bool,
    #[serde(default)]
    pub dump_levelsets: bool,
    /// Number of paths written when `dump_paths` is set.
    #[serde(default = "default_path_count")]
    pub path_count: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_dir(),
            threads: 0,
            seed: 0,
            dump_values: false,
            dump_kernels: false,
            dump_paths: false,
            dump_levelsets: false,
            path_count: default_path_count(),
        }
    }
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}
fn default_gain() -> String {
    "1".into()
}
fn default_control_cost() -> String {
    "a^2/2".into()
}
fn default_zero() -> String {
    "0".into()
}
fn default_control_bound() -> f64 {
    DEFAULT_CONTROL_BOUND
}
fn default_deltas() -> Vec<f64> {
    vec![0.1, 0.01, 0.001]
}
fn default_max_iters() -> usize {
    DEFAULT_MAX_ITERS
}
fn default_dir() -> PathBuf {
    PathBuf::from("mfg-out")
}
fn default_path_count() -> usize {
    100
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        RunConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Field-level checks that serde cannot express.
    pub fn check(&self) -> Result<()> {
        let s = &self.solver;
        if s.deltas.is_empty() {
            bail!("solver.deltas: at least one tolerance is required");
        }
        if s.deltas.iter().any(|d| !(*d > 0.0)) {
            bail!("solver.deltas: tolerances must be positive");
        }
        if s.deltas.windows(2).any(|w| w[1] > w[0]) {
            bail!("solver.deltas: tolerances must be nonincreasing");
        }
        if s.max_iters == 0 {
            bail!("solver.max_iters: must be at least 1");
        }
        let p = &self.problem;
        if !(p.sigma > 0.0) {
            bail!("problem.sigma: must be positive");
        }
        match (p.kind, &p.custom) {
            (ProblemKind::Custom, None) => bail!("problem.custom: required when kind = \"custom\""),
            (ProblemKind::Custom, Some(c)) => {
                if !(c.support[0] < c.support[1]) {
                    bail!("problem.custom.support: expected [lo, hi] with lo < hi");
                }
                if !(c.horizon > 0.0) {
                    bail!("problem.custom.horizon: must be positive");
                }
            }
            (_, Some(_)) => bail!("problem.custom: only allowed when kind = \"custom\""),
            (_, None) => {}
        }
        self.discretization()?;
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        match &self.problem.custom {
            Some(c) => c.horizon,
            None => 1.0,
        }
    }

    pub fn discretization(&self) -> Result<Discretization> {
        let d = &self.discretization;
        Discretization::new(self.horizon(), d.n_t, d.n_s, d.epsilon, d.control_bound).context("discretization")
    }

    pub fn build_problem(&self) -> Result<ProblemSpec> {
        let p = &self.problem;
        match (p.kind, &p.custom) {
            (ProblemKind::Example1, _) => Ok(example1(p.theta1, p.theta2, p.sigma)),
            (ProblemKind::Example2, _) => Ok(example2(p.theta1, p.theta2, p.sigma)),
            (ProblemKind::Custom, Some(c)) => c.build(p.theta1, p.theta2, p.sigma),
            (ProblemKind::Custom, None) => bail!("problem.custom: missing"),
        }
    }
}

fn parse(field: &str, text: &str, vars: &[&str]) -> Result<Arc<Expr>> {
    Expr::parse(text, vars)
        .map(Arc::new)
        .with_context(|| format!("problem.custom.{field}"))
}

/// `θ ρ_σ⋆μ + h(t, x)`.
struct ShiftedConvolution {
    conv: GaussianConvolution,
    shift: Arc<Expr>,
    /// Whether `shift` takes `t` as its first variable.
    timed: bool,
}

impl ShiftedConvolution {
    fn shift_at(&self, t: f64, x: f64) -> f64 {
        if self.timed {
            self.shift.eval(&[t, x])
        } else {
            self.shift.eval(&[x])
        }
    }
}

impl Coupling for ShiftedConvolution {
    fn value(&self, t: f64, x: &[f64], mu: &DiscreteMeasure) -> f64 {
        self.conv.value(t, x, mu) + self.shift_at(t, x[0])
    }

    fn field(&self, t: f64, points: &[f64], mu: &DiscreteMeasure) -> Vec<f64> {
        let mut out = self.conv.field(t, points, mu);
        for (v, x) in out.iter_mut().zip(points) {
            *v += self.shift_at(t, *x);
        }
        out
    }
}

impl CustomProblem {
    pub fn build(&self, theta1: f64, theta2: f64, sigma: f64) -> Result<ProblemSpec> {
        let drift = parse("drift", &self.drift, &["t", "x"])?;
        let gain = parse("gain", &self.gain, &["t", "x"])?;
        let l0 = parse("control_cost", &self.control_cost, &["t", "a", "x"])?;
        let running = parse("running", &self.running, &["t", "x"])?;
        let terminal = parse("terminal", &self.terminal, &["x"])?;
        let density = parse("density", &self.density, &["x"])?;

        let a: StateFn = Arc::new(move |t, x, out| out[0] = drift.eval(&[t, x[0]]));
        let b: StateFn = Arc::new(move |t, x, out| out[0] = gain.eval(&[t, x[0]]));
        let support = AxisBox::new(vec![self.support[0]], vec![self.support[1]]);
        let raw = InitialMeasure::new(
            {
                let density = density.clone();
                Arc::new(move |x: &[f64]| density.eval(&[x[0]]))
            },
            support.clone(),
        );
        let mass = raw.total_mass();
        if !(mass > 0.0 && mass.is_finite()) {
            bail!("problem.density: integrates to {mass} over the support");
        }
        let initial = InitialMeasure::new(Arc::new(move |x: &[f64]| density.eval(&[x[0]]) / mass), support);

        let mut cost = CostSpec::quadratic(
            Arc::new(ShiftedConvolution {
                conv: GaussianConvolution::new(theta1, sigma, 0),
                shift: running,
                timed: true,
            }),
            Arc::new(ShiftedConvolution {
                conv: GaussianConvolution::new(theta2, sigma, 0),
                shift: terminal,
                timed: false,
            }),
        );
        cost.control_cost = Arc::new(move |t, a, x| l0.eval(&[t, a[0], x[0]]));
        Ok(ProblemSpec {
            name: "custom".into(),
            horizon: self.horizon,
            dynamics: SplitDynamics::fully_actuated(1, a, b),
            cost,
            initial,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
[problem]
kind = "example1"
theta1 = 1.0
theta2 = 0.0

[discretization]
n_t = 30
n_s = 150
epsilon = 0.002
"#;

    fn custom(drift: &str, density: &str) -> CustomProblem {
        CustomProblem {
            horizon: 1.0,
            drift: drift.into(),
            gain: default_gain(),
            control_cost: default_control_cost(),
            running: default_zero(),
            terminal: default_zero(),
            density: density.into(),
            support: [-1.0, 1.0],
        }
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.solver.deltas, vec![0.1, 0.01, 0.001]);
        assert_eq!(cfg.discretization.control_bound, 4.0);
        assert_eq!(cfg.problem, ProblemConfig::example1(1.0, 0.0));
    }

    #[test]
    fn emit_and_reparse_is_identity() {
        let mut cfg = RunConfig::from_toml(EXAMPLE).unwrap();
        cfg.solver.deltas = vec![0.1 + 0.2, 0.3, 1e-7];
        cfg.output.seed = u32::MAX as u64;
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);

        cfg.problem.kind = ProblemKind::Custom;
        cfg.problem.sigma = 0.1;
        cfg.problem.custom = Some(CustomProblem {
            horizon: 0.5,
            running: "x^2".into(),
            support: [-0.25, 0.25],
            ..custom("-x", "1")
        });
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn diagnostics_name_the_field() {
        let bad = EXAMPLE.replace("n_s = 150", "n_s = \"many\"");
        let msg = format!("{:#}", RunConfig::from_toml(&bad).unwrap_err());
        assert!(msg.contains("n_s") && msg.contains("line 9"), "{msg}");
        let bad = EXAMPLE.replace("theta1 = 1.0", "theta1 = \"one\"");
        let msg = format!("{:#}", RunConfig::from_toml(&bad).unwrap_err());
        assert!(msg.contains("theta1") && msg.contains("line 4"), "{msg}");

        let unknown = format!("{EXAMPLE}\n[solver]\ndeltaz = [0.1]\n");
        let msg = format!("{:#}", RunConfig::from_toml(&unknown).unwrap_err());
        assert!(msg.contains("deltaz"), "{msg}");

        let rising = format!("{EXAMPLE}\n[solver]\ndeltas = [0.01, 0.1]\n");
        assert!(RunConfig::from_toml(&rising).is_err());

        let orphan = EXAMPLE.replace("kind = \"example1\"", "kind = \"custom\"");
        let msg = format!("{:#}", RunConfig::from_toml(&orphan).unwrap_err());
        assert!(msg.contains("problem.custom"), "{msg}");
    }

    #[test]
    fn custom_problem_is_normalized() {
        let p = custom("-2*x - sin(x)", "exp(-x^2/0.04)").build(1.0, 0.0, 0.03).unwrap();
        assert!((p.initial.total_mass() - 1.0).abs() < 1e-9);
        let mut out = [0.0];
        p.dynamics.a1(0.0, &[0.5], &mut out);
        assert_eq!(out[0], -1.0 - 0.5f64.sin());
        assert_eq!((p.cost.control_cost)(0.0, &[2.0], &[0.0]), 2.0);
    }

    #[test]
    fn bad_expression_reports_the_field() {
        let msg = format!("{:#}", custom("-x +", "1").build(0.0, 0.0, 0.03).unwrap_err());
        assert!(msg.contains("problem.custom.drift") && msg.contains("column"), "{msg}");
        assert!(custom("-x", "0").build(0.0, 0.0, 0.03).is_err());
    }
}
