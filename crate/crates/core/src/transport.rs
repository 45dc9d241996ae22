//! Population flows on the level sets: discretization of the initial
//! measure, the forward push through Markov kernels, and the best-response
//! map.

use rayon::prelude::*;

use crate::error::{MfgError, Result};
use crate::hjb::{backward_sweep, backward_sweep_recording, coupling_fields, KernelRows, TransitionKernel, ValuePolicy};
use crate::lattice::{build_level_sets, chunks, LevelSets, DEFAULT_MAX_LEVEL_SET};
use crate::problem::{validate, DiscreteMeasure, Discretization, InitialMeasure, ProblemSpec, ValidationReport};
use crate::quadrature::gauss_legendre_box;

/// Chunks merged per parallel wave in [`forward_push`].
const PUSH_WAVE: usize = 64;

/// Kernel entries a best response may keep in memory between the sweep and
/// the push; larger kernels are re-evaluated row by row during the push.
pub const ROW_CACHE_ENTRIES: usize = 20_000_000;

/// Time marginals `M_k ∈ P(S_k)`, indexed by node id.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub marginals: Vec<Vec<f64>>,
}

impl Flow {
    pub fn n_t(&self) -> usize {
        self.marginals.len() - 1
    }

    pub fn check_shape(&self, ls: &LevelSets) -> Result<()> {
        if self.marginals.len() != ls.sets.len()
            || self.marginals.iter().zip(&ls.sets).any(|(m, s)| m.len() != s.len())
        {
            return Err(MfgError::Usage("flow does not match the level sets".into()));
        }
        Ok(())
    }

    /// `M_k` as a measure on `R^d`; zero-mass atoms are dropped.
    pub fn measure(&self, k: usize, ls: &LevelSets) -> DiscreteMeasure {
        let dim = ls.dim;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let m = &self.marginals[k];
        ls.get(k).for_each_in(0, m.len(), |id, idx| {
            if m[id] != 0.0 {
                points.extend(idx.iter().map(|&i| i as f64 * ls.dx));
                weights.push(m[id]);
            }
        });
        DiscreteMeasure::new(dim, points, weights)
    }

    pub fn masses(&self) -> Vec<f64> {
        self.marginals.iter().map(|m| m.iter().sum()).collect()
    }

    /// Uniform marginal on every `S_k`.
    pub fn uniform(ls: &LevelSets) -> Flow {
        Flow {
            marginals: ls
                .sets
                .iter()
                .map(|s| vec![1.0 / s.len() as f64; s.len()])
                .collect(),
        }
    }

    /// `M_k = M_0` for every `k`, carried to `S_k` node by node. Requires
    /// `S_0 ⊆ S_k`.
    pub fn constant(ls: &LevelSets, m0: &[f64]) -> Result<Flow> {
        let s0 = ls.get(0);
        if m0.len() != s0.len() {
            return Err(MfgError::Usage("initial vector does not match S_0".into()));
        }
        let mut marginals = vec![m0.to_vec()];
        for set in &ls.sets[1..] {
            let mut m = vec![0.0; set.len()];
            let mut missing = false;
            s0.for_each_in(0, s0.len(), |id, idx| match set.id_of(idx) {
                Some(j) => m[j] = m0[id],
                None => missing |= m0[id] > 0.0,
            });
            if missing {
                return Err(MfgError::Usage(
                    "S_0 is not contained in every S_k; no constant-in-time flow".into(),
                ));
            }
            marginals.push(m);
        }
        Ok(Flow { marginals })
    }

    /// `a·self + b·other`, marginal by marginal.
    pub fn combine(&self, a: f64, other: &Flow, b: f64) -> Flow {
        Flow {
            marginals: self
                .marginals
                .iter()
                .zip(&other.marginals)
                .map(|(u, v)| u.iter().zip(v).map(|(x, y)| a * x + b * y).collect())
                .collect(),
        }
    }

    /// Rescales each marginal to total mass one.
    pub fn renormalize(&mut self) {
        for m in &mut self.marginals {
            let s: f64 = m.iter().sum();
            if s > 0.0 {
                m.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
}

/// `M̂_0(x) = m0(E(x))` for `x ∈ S_0` by 5-point Gauss–Legendre quadrature on
/// each cell intersected with the support box, renormalized to sum to one.
pub fn discretize_initial(m0: &InitialMeasure, ls: &LevelSets) -> Result<Vec<f64>> {
    let s0 = ls.get(0);
    let dx = ls.dx;
    let bx = &m0.support_box;
    let density = |x: &[f64]| m0.density(x);
    let parts: Vec<Vec<f64>> = chunks(s0.len())
        .into_par_iter()
        .map(|(start, end)| {
            let mut out = Vec::with_capacity(end - start);
            let mut lo = vec![0.0; ls.dim];
            let mut hi = vec![0.0; ls.dim];
            s0.for_each_in(start, end, |_, idx| {
                for a in 0..ls.dim {
                    let c = idx[a] as f64 * dx;
                    lo[a] = (c - 0.5 * dx).max(bx.lo[a]);
                    hi[a] = (c + 0.5 * dx).min(bx.hi[a]);
                }
                out.push(gauss_legendre_box(&density, &lo, &hi).max(0.0));
            });
            out
        })
        .collect();
    let mut masses = parts.concat();
    let total: f64 = masses.iter().sum();
    if !(total >= 0.99) {
        return Err(MfgError::Coverage { mass: total });
    }
    masses.iter_mut().for_each(|m| *m /= total);
    Ok(masses)
}

/// `M̂_{k+1}(y) = Σ_x P_k(x, y) M̂_k(x)` starting from `m0`.
///
/// Sources are processed in fixed chunks; each chunk accumulates into its
/// own window of targets and windows are added in chunk order, so the
/// result does not depend on the number of threads.
pub fn forward_push(m0: &[f64], kernel: &dyn KernelRows, ls: &LevelSets) -> Result<Flow> {
    if m0.len() != ls.get(0).len() || kernel.steps() != ls.n_t() {
        return Err(MfgError::Usage("kernel or initial vector does not match the level sets".into()));
    }
    let mut marginals = vec![m0.to_vec()];
    for k in 0..ls.n_t() {
        let src = &marginals[k];
        let mut next = vec![0.0; ls.get(k + 1).len()];
        let parts = chunks(src.len());
        for wave in parts.chunks(PUSH_WAVE) {
            let windows: Vec<(usize, Vec<f64>)> = wave
                .par_iter()
                .map(|&(start, end)| push_chunk(kernel, k, src, start, end))
                .collect::<Result<_>>()?;
            for (lo, w) in windows {
                for (slot, v) in next[lo..lo + w.len()].iter_mut().zip(&w) {
                    *slot += v;
                }
            }
        }
        marginals.push(next);
    }
    Ok(Flow { marginals })
}

fn push_chunk(kernel: &dyn KernelRows, k: usize, src: &[f64], start: usize, end: usize) -> Result<(usize, Vec<f64>)> {
    let mut entries: Vec<(usize, f64)> = Vec::new();
    let mut i = start;
    while i < end {
        if src[i] == 0.0 {
            i += 1;
            continue;
        }
        let run_start = i;
        while i < end && src[i] != 0.0 {
            i += 1;
        }
        kernel.for_rows(k, run_start, i, &mut |id, row| {
            let m = src[id];
            entries.extend(row.iter().map(|&(t, p)| (t, p * m)));
        })?;
    }
    let Some(lo) = entries.iter().map(|e| e.0).min() else {
        return Ok((0, Vec::new()));
    };
    let hi = entries.iter().map(|e| e.0).max().unwrap_or(lo);
    let mut window = vec![0.0; hi - lo + 1];
    for (t, v) in entries {
        window[t - lo] += v;
    }
    Ok((lo, window))
}

/// Problem, accepted discretization, level sets and discretized initial
/// measure: everything needed to evaluate best responses.
#[derive(Debug, Clone)]
pub struct Scheme {
    pub problem: ProblemSpec,
    pub disc: Discretization,
    pub level_sets: LevelSets,
    pub m0: Vec<f64>,
    pub validation: Option<ValidationReport>,
}

impl Scheme {
    /// Validates the configuration, then builds `S_k` and `M̂_0`.
    pub fn new(problem: ProblemSpec, disc: &Discretization) -> Result<Scheme> {
        Scheme::with_cap(problem, disc, DEFAULT_MAX_LEVEL_SET)
    }

    pub fn with_cap(problem: ProblemSpec, disc: &Discretization, max_level_set: usize) -> Result<Scheme> {
        let report = validate(&problem, disc)?;
        let disc = report.accepted.clone();
        let level_sets = build_level_sets(&problem, &disc, max_level_set)?;
        let m0 = discretize_initial(&problem.initial, &level_sets)?;
        Ok(Scheme {
            problem,
            disc,
            level_sets,
            m0,
            validation: Some(report),
        })
    }

    /// Builds the scheme without the admissibility check on the steps.
    pub fn unchecked(problem: ProblemSpec, disc: &Discretization) -> Result<Scheme> {
        let level_sets = build_level_sets(&problem, disc, DEFAULT_MAX_LEVEL_SET)?;
        let m0 = discretize_initial(&problem.initial, &level_sets)?;
        Ok(Scheme {
            problem,
            disc: disc.clone(),
            level_sets,
            m0,
            validation: None,
        })
    }

    /// Same lattice and problem with another entropy weight.
    pub fn with_epsilon(&self, epsilon: f64) -> Scheme {
        Scheme {
            disc: self.disc.with_epsilon(epsilon),
            ..self.clone()
        }
    }

    pub fn values(&self, flow: &Flow) -> Result<ValuePolicy> {
        backward_sweep(flow, &self.problem, &self.disc, &self.level_sets)
    }

    pub fn kernel<'a>(&'a self, vp: &'a ValuePolicy) -> Result<TransitionKernel<'a>> {
        TransitionKernel::new(&self.problem, &self.disc, &self.level_sets, vp)
    }

    pub fn best_response(&self, flow: &Flow) -> Result<Flow> {
        best_response(flow, self)
    }

    /// The time-constant flow `M_k = M̂_0`.
    pub fn constant_flow(&self) -> Result<Flow> {
        Flow::constant(&self.level_sets, &self.m0)
    }
}

/// `br(M)`: values against `M`, then the push of `M̂_0` through the induced kernels.
pub fn best_response(flow: &Flow, scheme: &Scheme) -> Result<Flow> {
    let (running, terminal) = coupling_fields(&scheme.problem, &scheme.disc, &scheme.level_sets, flow)?;
    let (vp, rows) = backward_sweep_recording(
        &scheme.problem,
        &scheme.disc,
        &scheme.level_sets,
        running,
        terminal,
        ROW_CACHE_ENTRIES,
    )?;
    match rows {
        Some(rows) => forward_push(&scheme.m0, &rows, &scheme.level_sets),
        None => forward_push(&scheme.m0, &scheme.kernel(&vp)?, &scheme.level_sets),
    }
}
