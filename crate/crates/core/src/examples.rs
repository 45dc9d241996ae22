//! Builtin games: a one-dimensional problem with a nonlinear gradient-descent
//! drift, and a two-dimensional problem where agents control their
//! acceleration. Both use Gaussian-kernel congestion couplings.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;

use crate::problem::{AxisBox, CostSpec, Coupling, DiscreteMeasure, InitialMeasure, ProblemSpec, SplitDynamics, StateFn};
use crate::quadrature::adaptive_simpson;

/// Default kernel width of the congestion couplings.
pub const DEFAULT_SIGMA: f64 = 0.03;

/// Default control bound Ĉ for both examples.
pub const DEFAULT_CONTROL_BOUND: f64 = 4.0;

/// Beyond this many widths the kernel underflows to exactly zero in f64.
const CUTOFF_WIDTHS: f64 = 40.0;

/// `ρ_σ(x) = exp(-x²/2σ²) / (√(2π) σ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    pub sigma: f64,
}

impl GaussianKernel {
    pub fn new(sigma: f64) -> Self {
        assert!(sigma > 0.0, "kernel width must be positive");
        GaussianKernel { sigma }
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let s = self.sigma;
        (-(x * x) / (2.0 * s * s)).exp() / ((2.0 * PI).sqrt() * s)
    }

    /// Half-width outside of which the kernel is exactly zero.
    pub fn cutoff(&self) -> f64 {
        CUTOFF_WIDTHS * self.sigma
    }
}

/// `Σ_y ρ_σ(x − y) μ(y)` for atoms `(y, μ(y))` sorted by position.
pub fn convolve_with_measure(kernel: &GaussianKernel, atoms: &[(f64, f64)], x: f64) -> f64 {
    let cut = kernel.cutoff();
    let start = atoms.partition_point(|a| a.0 < x - cut);
    let end = atoms.partition_point(|a| a.0 <= x + cut);
    atoms[start..end]
        .iter()
        .map(|&(y, w)| kernel.eval(x - y) * w)
        .sum()
}

/// Relative distance to the nearest integer accepted by [`lattice_convolution`].
const LATTICE_SNAP: f64 = 1e-9;

/// Integer multiples of `h` when every coordinate is one, up to [`LATTICE_SNAP`].
fn lattice_indices(values: impl Iterator<Item = f64>, h: f64) -> Option<Vec<i64>> {
    values
        .map(|v| {
            let q = v / h;
            let r = q.round();
            ((q - r).abs() <= LATTICE_SNAP * r.abs().max(1.0)).then_some(r as i64)
        })
        .collect()
}

/// [`convolve_with_measure`] at sorted distinct `positions` when the positions
/// and the atoms share a uniform lattice whose step is the smallest gap
/// between positions. Kernel values are tabulated per index offset.
fn lattice_convolution(kernel: &GaussianKernel, atoms: &[(f64, f64)], positions: &[f64]) -> Option<Vec<f64>> {
    let h = positions
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    if !(h.is_finite() && h > 0.0) || atoms.is_empty() {
        return None;
    }
    let pi = lattice_indices(positions.iter().copied(), h)?;
    let ai = lattice_indices(atoms.iter().map(|a| a.0), h)?;
    let reach = (kernel.cutoff() / h).floor() as i64;
    let table: Vec<f64> = (0..=reach).map(|n| kernel.eval(n as f64 * h)).collect();
    let values = pi
        .par_iter()
        .map(|&i| {
            let start = ai.partition_point(|&j| j < i - reach);
            let end = ai.partition_point(|&j| j <= i + reach);
            (start..end)
                .map(|a| table[(i - ai[a]).unsigned_abs() as usize] * atoms[a].1)
                .sum()
        })
        .collect();
    Some(values)
}

/// `Φ(t, x, μ) = θ (ρ_σ ⋆ π_axis♯μ)(x_axis)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianConvolution {
    pub kernel: GaussianKernel,
    pub theta: f64,
    pub axis: usize,
}

impl GaussianConvolution {
    pub fn new(theta: f64, sigma: f64, axis: usize) -> Self {
        GaussianConvolution {
            kernel: GaussianKernel::new(sigma),
            theta,
            axis,
        }
    }
}

impl Coupling for GaussianConvolution {
    fn value(&self, _t: f64, x: &[f64], mu: &DiscreteMeasure) -> f64 {
        if self.theta == 0.0 {
            return 0.0;
        }
        let atoms = mu.project(self.axis);
        self.theta * convolve_with_measure(&self.kernel, &atoms, x[self.axis])
    }

    /// Projects `μ` once and evaluates the convolution once per distinct
    /// coordinate of the query points.
    fn field(&self, _t: f64, points: &[f64], mu: &DiscreteMeasure) -> Vec<f64> {
        let dim = mu.dim.max(1);
        let n = points.len() / dim;
        if self.theta == 0.0 {
            return vec![0.0; n];
        }
        let atoms = mu.project(self.axis);
        let mut positions: Vec<f64> = points.chunks_exact(dim).map(|p| p[self.axis]).collect();
        positions.sort_by(f64::total_cmp);
        positions.dedup();
        let values: Vec<f64> = match lattice_convolution(&self.kernel, &atoms, &positions) {
            Some(v) => v.into_iter().map(|c| self.theta * c).collect(),
            None => positions
                .par_iter()
                .map(|&x| self.theta * convolve_with_measure(&self.kernel, &atoms, x))
                .collect(),
        };
        let lookup: HashMap<u64, f64> = positions
            .iter()
            .zip(values)
            .map(|(x, v)| (x.to_bits(), v))
            .collect();
        points
            .chunks_exact(dim)
            .map(|p| lookup[&p[self.axis].to_bits()])
            .collect()
    }

    fn is_trivial(&self) -> bool {
        self.theta == 0.0
    }
}

/// `∫_{-half}^{half} exp(-y²/scale) dy` by adaptive quadrature.
pub fn truncated_gaussian_mass(scale: f64, half: f64) -> f64 {
    adaptive_simpson(|y| (-(y * y) / scale).exp(), -half, half, 1e-13)
}

fn constant(v: f64) -> StateFn {
    Arc::new(move |_, _, out: &mut [f64]| out.iter_mut().for_each(|o| *o = v))
}

/// One-dimensional game: `γ' = −2γ − sin γ + α`, running cost
/// `|α|²/2 + θ1 ρ_σ⋆μ`, terminal cost `θ2 ρ_σ⋆μ`, and initial density
/// `∝ exp(−x²/0.04)` on `[−1, 1]`.
pub fn example1(theta1: f64, theta2: f64, sigma: f64) -> ProblemSpec {
    let a: StateFn = Arc::new(|_, x, out| out[0] = -2.0 * x[0] - x[0].sin());
    let z = truncated_gaussian_mass(0.04, 1.0);
    ProblemSpec {
        name: "example1".into(),
        horizon: 1.0,
        dynamics: SplitDynamics::fully_actuated(1, a, constant(1.0)),
        cost: CostSpec::quadratic(
            Arc::new(GaussianConvolution::new(theta1, sigma, 0)),
            Arc::new(GaussianConvolution::new(theta2, sigma, 0)),
        ),
        initial: InitialMeasure::new(
            Arc::new(move |x| (-(x[0] * x[0]) / 0.04).exp() / z),
            AxisBox::new(vec![-1.0], vec![1.0]),
        ),
    }
}

/// Two-dimensional game with state (velocity, position): `γ1' = α`,
/// `γ2' = γ1`. Running cost `|α|²/2 + (x2 − 0.3)² + θ1 ρ_σ⋆μ2`, terminal
/// cost `θ2 ρ_σ⋆μ2` with `μ2` the position marginal. Initial velocity is
/// uniform on `[−0.02, 0.02]`, initial position `∝ exp(−x2²/0.001)` on `[−1, 1]`.
pub fn example2(theta1: f64, theta2: f64, sigma: f64) -> ProblemSpec {
    let a1 = constant(0.0);
    let a2: StateFn = Arc::new(|_, x, out| out[0] = x[0]);
    let b1 = constant(1.0);
    let b2 = constant(0.0);
    let z = truncated_gaussian_mass(0.001, 1.0);
    let mut cost = CostSpec::quadratic(
        Arc::new(GaussianConvolution::new(theta1, sigma, 1)),
        Arc::new(GaussianConvolution::new(theta2, sigma, 1)),
    );
    cost.control_cost = Arc::new(|_, a, x| 0.5 * a[0] * a[0] + (x[1] - 0.3) * (x[1] - 0.3));
    ProblemSpec {
        name: "example2".into(),
        horizon: 1.0,
        dynamics: SplitDynamics::new(2, 1, a1, a2, b1, b2),
        cost,
        initial: InitialMeasure::new(
            Arc::new(move |x| (-(x[1] * x[1]) / 0.001).exp() / z / 0.04),
            AxisBox::new(vec![-0.02, -1.0], vec![0.02, 1.0]),
        ),
    }
}
