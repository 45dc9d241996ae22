//! Equilibrium diagnostics: one-dimensional Wasserstein distances, sampled
//! trajectories of the discrete dynamics, and state/velocity bounds.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{MfgError, Result};
use crate::hjb::KernelRows;
use crate::lattice::LevelSets;
use crate::problem::{inf_norm, AxisBox, ProblemSpec};

/// Name of the generator used by [`sample_trajectories`].
pub const RNG_NAME: &str = "ChaCha8 (seed, stream = path index)";

/// Tolerance on the total mass of the inputs to [`wasserstein1_1d`].
const MASS_TOL: f64 = 1e-9;

/// `d₁` between two atomic probability measures on the line, given as
/// `(position, weight)` pairs in any order: the area between the CDFs.
pub fn wasserstein1_1d(mu: &[(f64, f64)], nu: &[(f64, f64)]) -> Result<f64> {
    for (name, m) in [("mu", mu), ("nu", nu)] {
        let mass: f64 = m.iter().map(|a| a.1).sum();
        if (mass - 1.0).abs() > MASS_TOL || m.iter().any(|a| a.1 < 0.0 || !a.0.is_finite()) {
            return Err(MfgError::Usage(format!("{name} is not a probability measure (mass {mass})")));
        }
    }
    // Signed atoms: +mu, −nu, swept in position order.
    let mut events: Vec<(f64, f64)> = mu
        .iter()
        .copied()
        .chain(nu.iter().map(|&(x, w)| (x, -w)))
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut cdf_gap = 0.0;
    let mut total = 0.0;
    for pair in events.windows(2) {
        cdf_gap += pair[0].1;
        total += cdf_gap.abs() * (pair[1].0 - pair[0].0);
    }
    Ok(total)
}

/// Positions `γ(t_k)` of one sampled path of the discrete dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    pub times: Vec<f64>,
    /// Multi-index of the lattice state at each time.
    pub indices: Vec<Vec<i64>>,
    /// Coordinates of the state at each time.
    pub states: Vec<Vec<f64>>,
    /// Node id in `S_k` at each time.
    pub node_ids: Vec<usize>,
}

/// Inverse-CDF draw from `(item, probability)` pairs; the last positive
/// entry absorbs rounding.
fn draw<T: Copy>(items: impl Iterator<Item = (T, f64)>, u: f64) -> Option<T> {
    let mut acc = 0.0;
    let mut last = None;
    for (item, p) in items {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = Some(item);
        if u < acc {
            return last;
        }
    }
    last
}

/// Draws `count` paths `γ(0) ~ M̂_0`, `γ(t_{k+1}) ~ P_k(γ(t_k), ·)`. Path `i`
/// uses a ChaCha8 generator seeded with `seed` on stream `i`, so results do
/// not depend on scheduling.
pub fn sample_trajectories(m0: &[f64], kernel: &dyn KernelRows, ls: &LevelSets, dt: f64, count: usize, seed: u64) -> Result<Vec<SampledPath>> {
    if m0.len() != ls.get(0).len() {
        return Err(MfgError::Usage("initial vector does not match S_0".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut id = draw(m0.iter().copied().enumerate(), rng.random::<f64>())
                .ok_or_else(|| MfgError::Usage("initial vector has no mass".into()))?;
            let mut path = SampledPath {
                times: Vec::with_capacity(ls.sets.len()),
                indices: Vec::with_capacity(ls.sets.len()),
                states: Vec::with_capacity(ls.sets.len()),
                node_ids: Vec::with_capacity(ls.sets.len()),
            };
            let mut idx = vec![0i64; ls.dim];
            for k in 0..=ls.n_t() {
                ls.get(k).index_of(id, &mut idx);
                path.times.push(k as f64 * dt);
                path.states.push(idx.iter().map(|&v| v as f64 * ls.dx).collect());
                path.indices.push(idx.clone());
                path.node_ids.push(id);
                if k == ls.n_t() {
                    break;
                }
                let row = kernel.row(k, id)?;
                id = draw(row.into_iter(), rng.random::<f64>())
                    .ok_or_else(|| MfgError::Internal(format!("empty kernel row at k={k}, id={id}")))?;
            }
            Ok(path)
        })
        .collect()
}

/// `(max_k |γ(t_k)|∞, max_k |γ(t_{k+1}) − γ(t_k)|∞ / Δt)` over all paths.
pub fn path_bounds_check(paths: &[SampledPath]) -> (f64, f64) {
    let mut max_state: f64 = 0.0;
    let mut max_velocity: f64 = 0.0;
    for p in paths {
        for (k, s) in p.states.iter().enumerate() {
            max_state = s.iter().fold(max_state, |m, v| m.max(v.abs()));
            if k + 1 < p.states.len() {
                let dt = p.times[k + 1] - p.times[k];
                let v = s
                    .iter()
                    .zip(&p.states[k + 1])
                    .map(|(a, b)| (b - a).abs() / dt)
                    .fold(0.0, f64::max);
                max_velocity = max_velocity.max(v);
            }
        }
    }
    (max_state, max_velocity)
}

/// Sampled growth constants of the dynamics on a box: the smallest `C_A`
/// with `|A(t,x)|∞ ≤ C_A (1 + |x|∞)` and `C_B = max |B(t,x)|∞` over a
/// `samples`-per-axis lattice and `times`.
pub fn growth_constants(problem: &ProblemSpec, bx: &AxisBox, times: &[f64], samples: usize) -> (f64, f64) {
    let d = problem.dim();
    let r = problem.control_dim();
    let samples = samples.max(2);
    let mut c_a: f64 = 0.0;
    let mut c_b: f64 = 0.0;
    let mut counters = vec![0usize; d];
    let mut x = vec![0.0; d];
    for &t in times {
        counters.iter_mut().for_each(|c| *c = 0);
        'grid: loop {
            for a in 0..d {
                x[a] = bx.lo[a] + (bx.hi[a] - bx.lo[a]) * counters[a] as f64 / (samples - 1) as f64;
            }
            let drift = problem.dynamics.drift(t, &x);
            let norm_x = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let norm_a = drift.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            c_a = c_a.max(norm_a / (1.0 + norm_x));
            let b = nalgebra::DMatrix::from_row_slice(d, r, &problem.dynamics.control_matrix(t, &x));
            c_b = c_b.max(inf_norm(&b));
            let mut a = 0;
            loop {
                if a == d {
                    break 'grid;
                }
                counters[a] += 1;
                if counters[a] < samples {
                    break;
                }
                counters[a] = 0;
                a += 1;
            }
        }
    }
    (c_a, c_b)
}

/// Velocity bound `C_A (1 + C_∞) + C_B Ĉ + C_I Δx/Δt` of the sampled paths.
pub fn velocity_bound(c_a: f64, c_b: f64, c_inf: f64, control_bound: f64, interp_radius: f64, dx: f64, dt: f64) -> f64 {
    c_a * (1.0 + c_inf) + c_b * control_bound + interp_radius * dx / dt
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn w1_examples() {
        assert!((wasserstein1_1d(&[(0.3, 1.0)], &[(-0.2, 1.0)]).unwrap() - 0.5).abs() < 1e-15);
        let v = wasserstein1_1d(&[(0.0, 0.5), (1.0, 0.5)], &[(0.5, 1.0)]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        let mu = [(0.1, 0.2), (0.4, 0.8)];
        assert_eq!(wasserstein1_1d(&mu, &mu).unwrap(), 0.0);
        assert!(wasserstein1_1d(&[(0.0, 0.5)], &mu).is_err());
    }

    #[test]
    fn draw_respects_zero_weights() {
        let items = [(0usize, 0.0), (1, 0.5), (2, 0.0), (3, 0.5)];
        assert_eq!(draw(items.iter().copied(), 0.0), Some(1));
        assert_eq!(draw(items.iter().copied(), 0.75), Some(3));
        assert_eq!(draw(items.iter().copied(), 1.0 - 1e-17), Some(3));
    }
}
