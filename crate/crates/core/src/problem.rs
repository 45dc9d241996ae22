//! Continuous problem data (dynamics, costs, initial measure) and the
//! discretization parameters, together with the admissibility checks
//! that must hold before a lattice scheme can be built.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{MfgError, Result};
use crate::quadrature::composite_gauss_legendre;

/// `(t, x, out)`: writes a vector- or matrix-valued function of time and state into `out`.
pub type StateFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// `(t, a, x) -> ℓ0`: running cost in the control and state.
pub type ControlCostFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;

/// Smallest admissible `|det B1|`.
pub const DET_FLOOR: f64 = 1e-10;

/// Points per axis of the sampling lattice used to estimate `c_K`.
pub const CK_SAMPLES_PER_AXIS: usize = 32;

/// Finitely supported measure on `R^d`, points stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Self {
        assert_eq!(points.len(), dim * weights.len(), "point/weight length mismatch");
        DiscreteMeasure { dim, points, weights }
    }

    pub fn dirac(point: &[f64]) -> Self {
        DiscreteMeasure::new(point.len(), point.to_vec(), vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Pushforward by the projection onto one coordinate, as (position, weight)
    /// pairs merged on equal positions and sorted.
    pub fn project(&self, axis: usize) -> Vec<(f64, f64)> {
        let mut atoms: Vec<(f64, f64)> = (0..self.len())
            .map(|i| (self.point(i)[axis], self.weights[i]))
            .collect();
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (x, w) in atoms {
            match merged.last_mut() {
                Some(last) if last.0 == x => last.1 += w,
                _ => merged.push((x, w)),
            }
        }
        merged
    }
}

/// Control-affine dynamics `A(t,x) + B(t,x) a` split into the first `r`
/// rows (with `B1` invertible) and the remaining `d - r` rows.
#[derive(Clone)]
pub struct SplitDynamics {
    dim: usize,
    control_dim: usize,
    a1: StateFn,
    a2: StateFn,
    b1: StateFn,
    b2: StateFn,
}

impl fmt::Debug for SplitDynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SplitDynamics")
            .field("dim", &self.dim)
            .field("control_dim", &self.control_dim)
            .finish_non_exhaustive()
    }
}

impl SplitDynamics {
    /// `a1` writes `r` values, `a2` writes `d - r`, `b1` writes the `r × r`
    /// matrix row-major and `b2` the `(d - r) × r` matrix row-major.
    pub fn new(dim: usize, control_dim: usize, a1: StateFn, a2: StateFn, b1: StateFn, b2: StateFn) -> Self {
        assert!(control_dim >= 1 && control_dim <= dim, "need 1 <= r <= d");
        SplitDynamics {
            dim,
            control_dim,
            a1,
            a2,
            b1,
            b2,
        }
    }

    /// Dynamics with `d = r` (every state coordinate is directly controlled).
    pub fn fully_actuated(dim: usize, a: StateFn, b: StateFn) -> Self {
        let none: StateFn = Arc::new(|_, _, _| {});
        SplitDynamics::new(dim, dim, a, none.clone(), b, none)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn uncontrolled_dim(&self) -> usize {
        self.dim - self.control_dim
    }

    pub fn a1(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.a1)(t, x, out)
    }

    pub fn a2(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.a2)(t, x, out)
    }

    pub fn b1(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.b1)(t, x, out)
    }

    pub fn b2(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.b2)(t, x, out)
    }

    /// Full drift `A(t,x)`.
    pub fn drift(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let r = self.control_dim;
        let mut out = vec![0.0; self.dim];
        let (head, tail) = out.split_at_mut(r);
        self.a1(t, x, head);
        self.a2(t, x, tail);
        out
    }

    /// Full control matrix `B(t,x)` (`d × r`, row-major).
    pub fn control_matrix(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let r = self.control_dim;
        let mut out = vec![0.0; self.dim * r];
        let (head, tail) = out.split_at_mut(r * r);
        self.b1(t, x, head);
        self.b2(t, x, tail);
        out
    }
}

/// Evaluation of a mean-field coupling `Φ(t, x, μ)`.
pub trait Coupling: Send + Sync {
    fn value(&self, t: f64, x: &[f64], mu: &DiscreteMeasure) -> f64;

    /// Evaluates the coupling at every point of `points` (row-major, `mu.dim`
    /// columns). Implementations may override this with a faster batched path.
    fn field(&self, t: f64, points: &[f64], mu: &DiscreteMeasure) -> Vec<f64> {
        points
            .chunks_exact(mu.dim.max(1))
            .map(|x| self.value(t, x, mu))
            .collect()
    }

    /// `true` when the coupling ignores the measure entirely.
    fn is_trivial(&self) -> bool {
        false
    }
}

/// The zero coupling.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoCoupling;

impl Coupling for NoCoupling {
    fn value(&self, _t: f64, _x: &[f64], _mu: &DiscreteMeasure) -> f64 {
        0.0
    }

    fn field(&self, _t: f64, points: &[f64], mu: &DiscreteMeasure) -> Vec<f64> {
        vec![0.0; points.len() / mu.dim.max(1)]
    }

    fn is_trivial(&self) -> bool {
        true
    }
}

/// A coupling that does not depend on the measure: `Φ(t, x, μ) = h(t, x)`.
#[derive(Clone)]
pub struct StateCoupling(pub Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>);

impl Coupling for StateCoupling {
    fn value(&self, t: f64, x: &[f64], _mu: &DiscreteMeasure) -> f64 {
        (self.0)(t, x)
    }
}

/// Running cost `ℓ(t, a, x, μ) = ℓ0(t, a, x) + f(t, x, μ)` and terminal cost `g(x, μ)`.
#[derive(Clone)]
pub struct CostSpec {
    pub control_cost: ControlCostFn,
    pub running_coupling: Arc<dyn Coupling>,
    pub terminal: Arc<dyn Coupling>,
    /// Growth exponent of `ℓ0` in the control. Informational only.
    pub growth_p: f64,
}

impl fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CostSpec")
            .field("growth_p", &self.growth_p)
            .finish_non_exhaustive()
    }
}

impl CostSpec {
    /// `|a|² / 2` with the given couplings.
    pub fn quadratic(running: Arc<dyn Coupling>, terminal: Arc<dyn Coupling>) -> Self {
        CostSpec {
            control_cost: Arc::new(|_, a, _| 0.5 * a.iter().map(|v| v * v).sum::<f64>()),
            running_coupling: running,
            terminal,
            growth_p: 2.0,
        }
    }
}

/// Axis-aligned box `[lo, hi]` in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl AxisBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        AxisBox { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    pub fn inflate(&self, margin: f64) -> AxisBox {
        AxisBox {
            lo: self.lo.iter().map(|v| v - margin).collect(),
            hi: self.hi.iter().map(|v| v + margin).collect(),
        }
    }
}

/// Absolutely continuous initial distribution with compact support.
#[derive(Clone)]
pub struct InitialMeasure {
    density: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub support_box: AxisBox,
}

impl fmt::Debug for InitialMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InitialMeasure")
            .field("support_box", &self.support_box)
            .finish_non_exhaustive()
    }
}

impl InitialMeasure {
    pub fn new(density: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>, support_box: AxisBox) -> Self {
        InitialMeasure { density, support_box }
    }

    /// Density, forced to zero outside the support box.
    pub fn density(&self, x: &[f64]) -> f64 {
        if self.support_box.contains(x) {
            (self.density)(x)
        } else {
            0.0
        }
    }

    /// Total mass over the support box (composite 5-point Gauss–Legendre).
    pub fn total_mass(&self) -> f64 {
        let panels = match self.support_box.dim() {
            1 => 2000,
            2 => 200,
            _ => 24,
        };
        let f = |x: &[f64]| self.density(x);
        composite_gauss_legendre(&f, &self.support_box.lo, &self.support_box.hi, panels)
    }
}

/// Continuous mean field game data.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub name: String,
    pub horizon: f64,
    pub dynamics: SplitDynamics,
    pub cost: CostSpec,
    pub initial: InitialMeasure,
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }
}

/// Time and space steps of the fully discrete scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    pub horizon: f64,
    pub n_t: usize,
    pub n_s: usize,
    pub dt: f64,
    pub dx: f64,
    /// Entropy weight ε ≥ 0.
    pub epsilon: f64,
    /// Control bound Ĉ.
    pub control_bound: f64,
    /// Sampled bound on `|B1⁻¹|`; filled in by [`validate`].
    pub c_k_estimate: Option<f64>,
    /// Support radius of the interpolation basis, in cells.
    pub interp_radius: f64,
}

impl Discretization {
    pub fn new(horizon: f64, n_t: usize, n_s: usize, epsilon: f64, control_bound: f64) -> Result<Self> {
        if n_t == 0 || n_s == 0 {
            return Err(MfgError::config("n_t and n_s must be at least 1"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(MfgError::config("horizon must be positive"));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(MfgError::config("epsilon must be nonnegative"));
        }
        if !(control_bound > 0.0 && control_bound.is_finite()) {
            return Err(MfgError::config("control bound must be positive"));
        }
        Ok(Discretization {
            horizon,
            n_t,
            n_s,
            dt: horizon / n_t as f64,
            dx: 1.0 / n_s as f64,
            epsilon,
            control_bound,
            c_k_estimate: None,
            interp_radius: 1.0,
        })
    }

    /// Time of step `k`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Discretization {
            epsilon,
            ..self.clone()
        }
    }
}

/// Outcome of [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub c_k: f64,
    pub min_abs_det_b1: f64,
    pub ratio: f64,
    pub max_admissible_dx: f64,
    pub initial_mass: f64,
    pub working_box: AxisBox,
    /// The discretization with `c_k_estimate` set.
    pub accepted: Discretization,
}

/// Box on which `B1` is sampled: the support of `m0` inflated by `Ĉ·T`.
pub fn working_box(problem: &ProblemSpec, disc: &Discretization) -> AxisBox {
    problem
        .initial
        .support_box
        .inflate(disc.control_bound * problem.horizon)
}

/// Induced max-norm (max absolute row sum) of a square matrix.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverts `B1` given row-major, returning `(inverse, |det|)`.
pub fn invert_b1(r: usize, b1: &[f64]) -> Result<(DMatrix<f64>, f64)> {
    let m = DMatrix::from_row_slice(r, r, b1);
    let det = m.determinant().abs();
    if !det.is_finite() || det < DET_FLOOR {
        return Err(MfgError::Structural(format!(
            "B1 is singular (|det| = {det:e} < {DET_FLOOR:e})"
        )));
    }
    let inv = m
        .try_inverse()
        .ok_or_else(|| MfgError::Structural("B1 is not invertible".into()))?;
    Ok((inv, det))
}

/// Checks the structural assumptions and admissibility of the step pair:
/// `B1` invertible on a sampled lattice of the working box, `dx ≤ dt` and
/// `dx / dt ≤ Ĉ / c_K`, and that `m0` is normalized.
pub fn validate(problem: &ProblemSpec, disc: &Discretization) -> Result<ValidationReport> {
    let dim = problem.dim();
    let r = problem.control_dim();
    if problem.initial.support_box.dim() != dim {
        return Err(MfgError::Structural(format!(
            "initial support box has dimension {} but the state has dimension {dim}",
            problem.initial.support_box.dim()
        )));
    }
    if (disc.horizon - problem.horizon).abs() > 1e-12 * problem.horizon.max(1.0) {
        return Err(MfgError::config("discretization horizon differs from the problem horizon"));
    }

    let wbox = working_box(problem, disc);
    let n = CK_SAMPLES_PER_AXIS;
    let mut c_k: f64 = 0.0;
    let mut min_det = f64::INFINITY;
    let mut b1 = vec![0.0; r * r];
    let mut x = vec![0.0; dim];
    let mut counters = vec![0usize; dim];
    for k in 0..=disc.n_t {
        let t = disc.time(k);
        counters.iter_mut().for_each(|c| *c = 0);
        'lattice: loop {
            for axis in 0..dim {
                let s = counters[axis] as f64 / (n - 1) as f64;
                x[axis] = wbox.lo[axis] + s * (wbox.hi[axis] - wbox.lo[axis]);
            }
            problem.dynamics.b1(t, &x, &mut b1);
            if b1.iter().any(|v| !v.is_finite()) {
                return Err(MfgError::Structural(format!("B1 not finite at t={t}, x={x:?}")));
            }
            let (inv, det) = invert_b1(r, &b1).map_err(|e| match e {
                MfgError::Structural(msg) => {
                    MfgError::Structural(format!("{msg} at t={t}, x={x:?}"))
                }
                other => other,
            })?;
            c_k = c_k.max(inf_norm(&inv));
            min_det = min_det.min(det);

            let mut axis = 0;
            loop {
                if axis == dim {
                    break 'lattice;
                }
                counters[axis] += 1;
                if counters[axis] < n {
                    break;
                }
                counters[axis] = 0;
                axis += 1;
            }
        }
    }

    let bound = 1.0_f64.min(disc.control_bound / c_k);
    let ratio = disc.dx / disc.dt;
    let max_dx = disc.dt * bound;
    if ratio > bound * (1.0 + 1e-12) {
        return Err(MfgError::Configuration {
            message: format!(
                "dx/dt = {ratio:.6} exceeds min(1, Ĉ/c_K) = {bound:.6} (c_K = {c_k:.6})"
            ),
            max_admissible_dx: Some(max_dx),
        });
    }

    let mass = problem.initial.total_mass();
    if (mass - 1.0).abs() > 1e-6 {
        return Err(MfgError::Structural(format!(
            "initial density integrates to {mass:.9} over its support box"
        )));
    }

    let mut accepted = disc.clone();
    accepted.c_k_estimate = Some(c_k);
    Ok(ValidationReport {
        c_k,
        min_abs_det_b1: min_det,
        ratio,
        max_admissible_dx: max_dx,
        initial_mass: mass,
        working_box: wbox,
        accepted,
    })
}

/// `Σ_x (Φ(x,μ) − Φ(x,ν)) (μ − ν)(x)` for two measures on a common support.
/// Nonnegative for every pair exactly when `Φ` is monotone.
pub fn monotonicity_check(coupling: &dyn Coupling, t: f64, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
    debug_assert_eq!(mu.points, nu.points, "measures must share their support");
    let phi_mu = coupling.field(t, &mu.points, mu);
    let phi_nu = coupling.field(t, &nu.points, nu);
    phi_mu
        .iter()
        .zip(&phi_nu)
        .zip(mu.weights.iter().zip(&nu.weights))
        .map(|((a, b), (m, n))| (a - b) * (m - n))
        .sum()
}
