#![allow(dead_code)]

pub mod suite;

use std::sync::Arc;

use mfg_core::examples::GaussianConvolution;
use mfg_core::problem::{AxisBox, CostSpec, Coupling, InitialMeasure, NoCoupling, ProblemSpec, SplitDynamics, StateCoupling, StateFn};

/// Scalar problem `dγ = (drift(x) + a) dt` with `m0` uniform on `[-half, half]`.
pub fn line_problem(
    horizon: f64,
    drift: impl Fn(f64) -> f64 + Send + Sync + 'static,
    half: f64,
    running: Arc<dyn Coupling>,
    terminal: Arc<dyn Coupling>,
) -> ProblemSpec {
    let a: StateFn = Arc::new(move |_, x, out| out[0] = drift(x[0]));
    let b: StateFn = Arc::new(|_, _, out| out[0] = 1.0);
    ProblemSpec {
        name: "line".into(),
        horizon,
        dynamics: SplitDynamics::fully_actuated(1, a, b),
        cost: CostSpec::quadratic(running, terminal),
        initial: InitialMeasure::new(Arc::new(move |_| 0.5 / half), AxisBox::new(vec![-half], vec![half])),
    }
}

pub fn state_coupling(h: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Arc<dyn Coupling> {
    Arc::new(StateCoupling(Arc::new(move |t, x| h(t, x[0]))))
}

pub fn none() -> Arc<dyn Coupling> {
    Arc::new(NoCoupling)
}

pub fn gaussian(theta: f64, sigma: f64) -> Arc<dyn Coupling> {
    Arc::new(GaussianConvolution::new(theta, sigma, 0))
}

/// Double integrator `x1' = a`, `x2' = x1` with a velocity-axis Gaussian
/// congestion term and `m0` uniform on a small box.
pub fn plane_problem(horizon: f64, theta: f64) -> ProblemSpec {
    let a1: StateFn = Arc::new(|_, _, out| out[0] = 0.0);
    let a2: StateFn = Arc::new(|_, x, out| out[0] = x[0]);
    let b1: StateFn = Arc::new(|_, _, out| out[0] = 1.0);
    let b2: StateFn = Arc::new(|_, _, out| out[0] = 0.0);
    let mut cost = CostSpec::quadratic(gaussian(theta, 0.1), gaussian(theta, 0.1));
    cost.control_cost = Arc::new(|_, a, x| 0.5 * a[0] * a[0] + (x[1] - 0.2).powi(2));
    ProblemSpec {
        name: "plane".into(),
        horizon,
        dynamics: SplitDynamics::new(2, 1, a1, a2, b1, b2),
        cost,
        initial: InitialMeasure::new(
            Arc::new(|_| 1.0 / (0.2 * 0.4)),
            AxisBox::new(vec![-0.1, -0.2], vec![0.1, 0.2]),
        ),
    }
}
