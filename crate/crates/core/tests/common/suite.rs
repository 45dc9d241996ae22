//! Property checks against independent oracles. Each check returns the
//! first counterexample as an error so that it can back a `#[test]` or be
//! tallied by the acceptance run.

use mfg_core::analysis::wasserstein1_1d;
use mfg_core::examples::GaussianConvolution;
use mfg_core::hjb::{entropic_objective, gibbs_step, KernelRows, SparseKernel};
use mfg_core::lattice::{control_for_target, q1_weights, reachable_controls, LevelSet, LevelSets};
use mfg_core::problem::{monotonicity_check, DiscreteMeasure};
use mfg_core::transport::forward_push;
use mfg_core::{Discretization, Flow, LatticePoint, Scheme};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseResult, TestRng, TestRunner};

use super::{gaussian, line_problem, plane_problem, state_coupling};

pub type Check = std::result::Result<(), String>;

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> TestCaseResult) -> Check {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    TestRunner::new_with_rng(config, rng)
        .run(&strategy, test)
        .map_err(|e| e.to_string())
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn partition_of_unity() -> Check {
    let strategy = (prop::collection::vec(-3.0f64..3.0, 1..4), 1usize..300);
    run(256, strategy, |(z, n_s)| {
        let dx = 1.0 / n_s as f64;
        let w = q1_weights(&z, dx);
        let total: f64 = w.iter().map(|p| p.1).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12, "weights sum to {total}");
        prop_assert!(w.iter().all(|p| p.1 > 0.0));
        prop_assert!(w.len() <= 1 << z.len());
        // Reproduces affine functions.
        for a in 0..z.len() {
            let v: f64 = w.iter().map(|(p, q)| q * p.idx[a] as f64 * dx).sum();
            prop_assert!((v - z[a]).abs() <= 1e-12 * (1.0 + z[a].abs()));
        }
        Ok(())
    })
}

/// Random kernels on the line sets `[-k, k]`, where each node moves by -1, 0 or +1.
pub fn random_line_kernel(n_t: usize, seeds: &[f64]) -> (LevelSets, SparseKernel) {
    let sets: Vec<LevelSet> = (0..=n_t as i64)
        .map(|k| LevelSet::from_indices(1, &(-k..=k).collect::<Vec<_>>()))
        .collect();
    let ls = LevelSets {
        sets,
        dim: 1,
        control_dim: 1,
        dx: 0.1,
        bounding_radius: n_t as f64 * 0.1,
    };
    let mut triplets = Vec::new();
    let mut s = seeds.iter().cycle();
    for k in 0..n_t {
        for src in 0..ls.get(k).len() {
            let w: Vec<f64> = (0..3).map(|_| *s.next().unwrap()).collect();
            let z: f64 = w.iter().sum();
            for (j, wj) in w.iter().enumerate() {
                triplets.push((k, src, src + j, wj / z));
            }
        }
    }
    let kernel = SparseKernel::from_triplets(&ls.sizes(), &triplets).unwrap();
    (ls, kernel)
}

pub fn push_conserves_mass() -> Check {
    let strategy = (1usize..12, prop::collection::vec(0.01f64..1.0, 5..40));
    run(64, strategy, |(n_t, seeds)| {
        let (ls, kernel) = random_line_kernel(n_t, &seeds);
        let flow = forward_push(&[1.0], &kernel, &ls).unwrap();
        for (k, mass) in flow.masses().into_iter().enumerate() {
            prop_assert!((mass - 1.0).abs() <= 1e-12, "mass {mass} at k={k}");
        }
        prop_assert!(flow.marginals.iter().flatten().all(|&m| m >= 0.0));
        Ok(())
    })
}

pub fn push_is_linear() -> Check {
    let strategy = (0.0f64..1.0, prop::collection::vec(0.01f64..1.0, 5..40));
    run(64, strategy, |(a, seeds)| {
        let (ls, kernel) = random_line_kernel(4, &seeds);
        let f = forward_push(&[1.0], &kernel, &ls).unwrap();
        let g = forward_push(&[a], &kernel, &ls).unwrap();
        for (u, v) in f.marginals.iter().flatten().zip(g.marginals.iter().flatten()) {
            prop_assert!((a * u - v).abs() <= 1e-15);
        }
        Ok(())
    })
}

pub fn random_flow(ls: &LevelSets, seed: u64) -> Flow {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64) / ((1u64 << 53) as f64)
    };
    let mut flow = Flow {
        marginals: ls.sets.iter().map(|s| (0..s.len()).map(|_| next()).collect()).collect(),
    };
    flow.renormalize();
    flow
}

/// Rows of scheme kernels sum to one, and best responses keep unit mass.
pub fn scheme_kernels_are_stochastic() -> Check {
    let plane = plane_problem(1.0, 1.0);
    let disc = Discretization::new(1.0, 5, 20, 0.01, 1.0).unwrap();
    let line = line_problem(1.0, |x| -x, 0.3, gaussian(1.0, 0.1), gaussian(0.5, 0.1));
    let disc_line = Discretization::new(1.0, 10, 30, 0.002, 2.0).unwrap();
    for (problem, disc) in [(plane, disc), (line, disc_line)] {
        let scheme = Scheme::new(problem, &disc).map_err(|e| e.to_string())?;
        for seed in 0..4 {
            let flow = random_flow(&scheme.level_sets, seed);
            let vp = scheme.values(&flow).map_err(|e| e.to_string())?;
            let kernel = scheme.kernel(&vp).map_err(|e| e.to_string())?;
            let mut worst: Option<String> = None;
            for k in 0..kernel.steps() {
                let n = scheme.level_sets.get(k).len();
                kernel
                    .for_rows(k, 0, n, &mut |id, row| {
                        let s: f64 = row.iter().map(|e| e.1).sum();
                        if worst.is_none() && ((s - 1.0).abs() > 1e-12 || row.iter().any(|e| e.1 < 0.0)) {
                            worst = Some(format!("{}: row {id} at k={k} sums to {s}", scheme.problem.name));
                        }
                    })
                    .map_err(|e| e.to_string())?;
            }
            if let Some(w) = worst {
                return Err(w);
            }
            let br = scheme.best_response(&flow).map_err(|e| e.to_string())?;
            for mass in br.masses() {
                ensure((mass - 1.0).abs() <= 1e-12, || format!("best response mass {mass}"))?;
            }
        }
    }
    Ok(())
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut tau = 0.0;
    for (i, ui) in u.iter().enumerate() {
        acc += ui;
        let t = (acc - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

/// Accelerated projected gradient with backtracking and adaptive restart on
/// `Σ p c + ε Σ p log p`.
pub fn projected_gradient(costs: &[f64], eps: f64) -> Vec<f64> {
    let n = costs.len();
    let f = |p: &[f64]| {
        if p.iter().any(|&q| q <= 0.0) {
            f64::INFINITY
        } else {
            entropic_objective(costs, p, eps)
        }
    };
    let grad = |p: &[f64]| -> Vec<f64> { p.iter().zip(costs).map(|(q, c)| c + eps * (1.0 + q.ln())).collect() };
    let mut p = vec![1.0 / n as f64; n];
    let mut y = p.clone();
    let mut momentum = 1.0f64;
    let mut step = 1.0;
    for _ in 0..100_000 {
        if y.iter().any(|&q| q <= 0.0) {
            y = p.clone();
            momentum = 1.0;
        }
        let g = grad(&y);
        let fy = f(&y);
        let next = loop {
            let trial = project_simplex(&y.iter().zip(&g).map(|(q, gi)| q - step * gi).collect::<Vec<_>>());
            let lin: f64 = trial.iter().zip(&y).zip(&g).map(|((t, q), gi)| gi * (t - q)).sum();
            let quad: f64 = trial.iter().zip(&y).map(|(t, q)| (t - q) * (t - q)).sum::<f64>() / (2.0 * step);
            if f(&trial) <= fy + lin + quad + 1e-15 * fy.abs() || step < 1e-20 {
                break trial;
            }
            step *= 0.5;
        };
        let moved = p.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let restart = f(&next) > f(&p);
        let m_next = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let beta = if restart { 0.0 } else { (momentum - 1.0) / m_next };
        y = next.iter().zip(&p).map(|(a, b)| a + beta * (a - b)).collect();
        momentum = if restart { 1.0 } else { m_next };
        p = next;
        if moved < 1e-14 && !restart {
            break;
        }
    }
    p
}

pub fn gibbs_matches_projected_gradient() -> Check {
    let strategy = (prop::collection::vec(0.0f64..1.0, 2..8), 0.2f64..1.0);
    run(100, strategy, |(costs, eps)| {
        let (value, probs) = gibbs_step(&costs, eps).unwrap();
        let oracle = projected_gradient(&costs, eps);
        for (a, b) in probs.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
        }
        prop_assert!((value - entropic_objective(&costs, &oracle, eps)).abs() <= 1e-8);
        prop_assert!((value - entropic_objective(&costs, &probs, eps)).abs() <= 1e-12);
        Ok(())
    })
}

pub fn gaussian_coupling_is_monotone() -> Check {
    let strategy = (
        prop::collection::vec(-1.0f64..1.0, 1..12),
        prop::collection::vec(0.01f64..1.0, 12),
        prop::collection::vec(0.01f64..1.0, 12),
        0.01f64..0.5,
    );
    run(100, strategy, |(xs, wa, wb, sigma)| {
        let n = xs.len();
        let norm = |w: &[f64]| {
            let z: f64 = w[..n].iter().sum();
            w[..n].iter().map(|v| v / z).collect::<Vec<_>>()
        };
        let mu = DiscreteMeasure::new(1, xs.clone(), norm(&wa));
        let nu = DiscreteMeasure::new(1, xs, norm(&wb));
        let c = GaussianConvolution::new(1.0, sigma, 0);
        let m = monotonicity_check(&c, 0.0, &mu, &nu);
        prop_assert!(m >= -1e-12, "monotonicity {m}");
        Ok(())
    })
}

/// Min-cost flow by successive shortest paths (Bellman–Ford) on the
/// bipartite transport network between two atomic measures.
pub fn transport_lp(mu: &[(f64, f64)], nu: &[(f64, f64)]) -> f64 {
    struct Edge {
        to: usize,
        cap: f64,
        cost: f64,
    }
    let (n, m) = (mu.len(), nu.len());
    let (src, sink) = (n + m, n + m + 1);
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n + m + 2];
    let add = |edges: &mut Vec<Edge>, adj: &mut Vec<Vec<usize>>, a: usize, b: usize, cap: f64, cost: f64| {
        adj[a].push(edges.len());
        edges.push(Edge { to: b, cap, cost });
        adj[b].push(edges.len());
        edges.push(Edge { to: a, cap: 0.0, cost: -cost });
    };
    for (i, a) in mu.iter().enumerate() {
        add(&mut edges, &mut adj, src, i, a.1, 0.0);
        for (j, b) in nu.iter().enumerate() {
            add(&mut edges, &mut adj, i, n + j, f64::INFINITY, (a.0 - b.0).abs());
        }
    }
    for (j, b) in nu.iter().enumerate() {
        add(&mut edges, &mut adj, n + j, sink, b.1, 0.0);
    }
    const TINY: f64 = 1e-15;
    let mut total = 0.0;
    loop {
        let mut dist = vec![f64::INFINITY; n + m + 2];
        let mut via = vec![usize::MAX; n + m + 2];
        dist[src] = 0.0;
        for _ in 0..n + m + 2 {
            let mut changed = false;
            for u in 0..n + m + 2 {
                if dist[u].is_infinite() {
                    continue;
                }
                for &e in &adj[u] {
                    let ed = &edges[e];
                    if ed.cap > TINY && dist[u] + ed.cost < dist[ed.to] - 1e-15 {
                        dist[ed.to] = dist[u] + ed.cost;
                        via[ed.to] = e;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[sink].is_infinite() {
            return total;
        }
        let mut push = f64::INFINITY;
        let mut v = sink;
        while v != src {
            let e = via[v];
            push = push.min(edges[e].cap);
            v = edges[e ^ 1].to;
        }
        let mut v = sink;
        while v != src {
            let e = via[v];
            edges[e].cap -= push;
            edges[e ^ 1].cap += push;
            total += push * edges[e].cost;
            v = edges[e ^ 1].to;
        }
    }
}

pub fn w1_matches_transport_lp() -> Check {
    let strategy = (
        prop::collection::vec(-2.0f64..2.0, 1..7),
        prop::collection::vec(-2.0f64..2.0, 1..7),
        prop::collection::vec(0.05f64..1.0, 7),
        prop::collection::vec(0.05f64..1.0, 7),
    );
    run(50, strategy, |(xa, xb, wa, wb)| {
        let atoms = |xs: &[f64], ws: &[f64]| {
            let z: f64 = ws[..xs.len()].iter().sum();
            xs.iter().zip(ws).map(|(x, w)| (*x, w / z)).collect::<Vec<_>>()
        };
        let mu = atoms(&xa, &wa);
        let nu = atoms(&xb, &wb);
        let fast = wasserstein1_1d(&mu, &nu).unwrap();
        let lp = transport_lp(&mu, &nu);
        prop_assert!((fast - lp).abs() <= 1e-9, "{fast} vs {lp}");
        Ok(())
    })
}

pub fn drift(x: f64) -> f64 {
    0.3 * x - 0.1
}

pub fn running_h(t: f64, x: f64) -> f64 {
    (3.0 * x).sin() + t * x * x
}

pub fn terminal_h(_t: f64, x: f64) -> f64 {
    (x - 0.1).powi(2) + 0.25 * x.abs()
}

/// Scalar test game on `[-0.2, 0.2]` with state-only couplings.
pub fn small_line(drift_scale: f64) -> mfg_core::problem::ProblemSpec {
    line_problem(
        0.6,
        move |x| drift_scale * drift(x),
        0.2,
        state_coupling(running_h),
        state_coupling(terminal_h),
    )
}

/// Minimum over all lattice paths from `idx` at step `k` of the path cost,
/// summed from the end so that each path total is `c_k + (c_{k+1} + ...)`.
fn best_path_cost(scheme: &Scheme, k: usize, idx: i64) -> f64 {
    let disc = &scheme.disc;
    let x = idx as f64 * disc.dx;
    let t = disc.time(k);
    if k == disc.n_t {
        return terminal_h(t, x);
    }
    let node = LatticePoint::new(vec![idx]);
    let l0 = &scheme.problem.cost.control_cost;
    let mut best = f64::INFINITY;
    for y in reachable_controls(&scheme.problem, disc, k, &node).unwrap() {
        let alpha = control_for_target(&scheme.problem, disc, k, &node, &y).unwrap();
        let rest = best_path_cost(scheme, k + 1, y[0]);
        let total = disc.dt * (l0(t, &alpha, &[x]) + running_h(t, x)) + rest;
        best = best.min(total);
    }
    best
}

/// The `ε = 0` sweep equals brute-force enumeration of lattice paths.
pub fn zero_entropy_sweep_equals_path_enumeration() -> Check {
    for (drift_scale, n_t, n_s) in [(1.0, 3, 10), (0.0, 3, 10), (-2.0, 2, 15), (1.0, 1, 20)] {
        let disc = Discretization::new(0.6, n_t, n_s, 0.0, 1.0).unwrap();
        let scheme = Scheme::new(small_line(drift_scale), &disc).map_err(|e| e.to_string())?;
        let sizes = scheme.level_sets.sizes();
        ensure(sizes.iter().all(|&n| n <= 50), || format!("level sets too large: {sizes:?}"))?;
        let vp = scheme
            .values(&Flow::uniform(&scheme.level_sets))
            .map_err(|e| e.to_string())?;
        let s0 = scheme.level_sets.get(0);
        let mut idx = [0i64];
        for id in 0..s0.len() {
            s0.index_of(id, &mut idx);
            let brute = best_path_cost(&scheme, 0, idx[0]);
            ensure(vp.values[0][id] == brute, || {
                format!("drift x{drift_scale}, n_t={n_t}, node {idx:?}: sweep {} vs paths {brute}", vp.values[0][id])
            })?;
        }
    }
    Ok(())
}
