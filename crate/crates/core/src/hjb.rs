//! Backward dynamic programming on the level sets: the entropy-regularized
//! recursion with Gibbs policies (plain minimization when `ε = 0`), the
//! induced Markov kernels, and a semi-discrete reference solver.

use rayon::prelude::*;

use crate::error::{MfgError, Result};
use crate::lattice::{chunks, CandidateScratch, Geometry, LevelSets, NodeFrame, Q1Stencil};
use crate::problem::{DiscreteMeasure, Discretization, ProblemSpec};
use crate::transport::Flow;

/// Exponentials below this are flushed to zero in the Gibbs weights.
pub const UNDERFLOW: f64 = 1e-300;

/// Fraction of Ĉ above which a control counts as saturated.
pub const SATURATION_LEVEL: f64 = 0.95;

/// Writes the Gibbs distribution of `costs` at temperature `epsilon` into
/// `probs` and returns the regularized value `−ε log Σ exp(−c/ε)`. With
/// `epsilon == 0` the result is the minimum and a point mass on the first
/// minimizer.
pub fn gibbs_into(costs: &[f64], epsilon: f64, probs: &mut Vec<f64>) -> f64 {
    probs.clear();
    probs.resize(costs.len(), 0.0);
    let mut best = 0usize;
    for (i, &c) in costs.iter().enumerate() {
        if c < costs[best] {
            best = i;
        }
    }
    let m = costs[best];
    if epsilon == 0.0 {
        probs[best] = 1.0;
        return m;
    }
    let mut z = 0.0;
    for (p, &c) in probs.iter_mut().zip(costs) {
        let w = (-(c - m) / epsilon).exp();
        *p = if w < UNDERFLOW { 0.0 } else { w };
        z += *p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    m - epsilon * z.ln()
}

/// Minimizer of `Σ p c + ε Σ p log p` over the simplex, and its value.
pub fn gibbs_step(costs: &[f64], epsilon: f64) -> Result<(f64, Vec<f64>)> {
    if costs.is_empty() {
        return Err(MfgError::Internal("gibbs_step on an empty cost vector".into()));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(MfgError::Numeric("non-finite cost in gibbs_step".into()));
    }
    if !(epsilon >= 0.0) {
        return Err(MfgError::Usage("epsilon must be nonnegative".into()));
    }
    let mut probs = Vec::new();
    let v = gibbs_into(costs, epsilon, &mut probs);
    Ok((v, probs))
}

/// `Σ p c + ε Σ p log p` with `0 log 0 = 0`.
pub fn entropic_objective(costs: &[f64], probs: &[f64], epsilon: f64) -> f64 {
    costs
        .iter()
        .zip(probs)
        .map(|(c, &p)| p * c + if p > 0.0 { epsilon * p * p.ln() } else { 0.0 })
        .sum()
}

/// Value functions of one backward sweep together with the coupling fields
/// they were computed against. Policies and kernel rows are recomputed on
/// demand from these (see [`TransitionKernel`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ValuePolicy {
    pub epsilon: f64,
    /// `V_k` on `S_k`, indexed by node id, `k = 0..=N_t`.
    pub values: Vec<Vec<f64>>,
    /// `f(t_k, x, M_k)` on `S_k`, `k = 0..N_t`.
    pub running: Vec<Vec<f64>>,
}

/// Evaluates `f(t_k, ·, M_k)` on every `S_k` (`k < N_t`) and `g(·, M_{N_t})` on `S_{N_t}`.
pub fn coupling_fields(problem: &ProblemSpec, disc: &Discretization, ls: &LevelSets, flow: &Flow) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    flow.check_shape(ls)?;
    let n_t = ls.n_t();
    let field_at = |k: usize, coupling: &dyn crate::problem::Coupling| -> Vec<f64> {
        let set = ls.get(k);
        if coupling.is_trivial() {
            return vec![0.0; set.len()];
        }
        let mu = flow.measure(k, ls);
        coupling.field(disc.time(k), &set.coordinates(ls.dx), &mu)
    };
    let running = (0..n_t)
        .map(|k| field_at(k, problem.cost.running_coupling.as_ref()))
        .collect();
    let terminal = field_at(n_t, problem.cost.terminal.as_ref());
    Ok((running, terminal))
}

/// Same as [`coupling_fields`] for an arbitrary measure per time step.
pub fn coupling_fields_for_measures(problem: &ProblemSpec, disc: &Discretization, ls: &LevelSets, measures: &[DiscreteMeasure]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n_t = ls.n_t();
    if measures.len() != n_t + 1 {
        return Err(MfgError::Usage(format!("expected {} measures, got {}", n_t + 1, measures.len())));
    }
    let running = (0..n_t)
        .map(|k| {
            problem
                .cost
                .running_coupling
                .field(disc.time(k), &ls.get(k).coordinates(ls.dx), &measures[k])
        })
        .collect();
    let terminal = problem
        .cost
        .terminal
        .field(disc.time(n_t), &ls.get(n_t).coordinates(ls.dx), &measures[n_t]);
    Ok((running, terminal))
}

/// Per-node candidate evaluation shared by the sweep, the kernel and the
/// diagnostics, so that all of them see bit-identical costs.
pub(crate) struct RowEval<'a> {
    pub geom: Geometry<'a>,
    pub ls: &'a LevelSets,
}

/// Buffers for one row evaluation.
pub(crate) struct RowScratch {
    frame: NodeFrame,
    cand: CandidateScratch,
    stencil: Q1Stencil,
    target: Vec<i64>,
    /// Per-candidate total cost.
    pub costs: Vec<f64>,
    /// Per-candidate control, `r` values each.
    pub alphas: Vec<f64>,
    /// Per-candidate target index `y1`, `r` values each.
    pub targets_y1: Vec<i64>,
    /// `(target id in S_{k+1}, β weight)` for every candidate, concatenated.
    pub entries: Vec<(usize, f64)>,
    /// Start of each candidate's entries; one extra trailing element.
    pub starts: Vec<usize>,
    pub probs: Vec<f64>,
}

impl RowScratch {
    pub fn new(d: usize, r: usize) -> Self {
        RowScratch {
            frame: NodeFrame::new(d, r),
            cand: CandidateScratch::new(d, r),
            stencil: Q1Stencil::default(),
            target: vec![0; d],
            costs: Vec::new(),
            alphas: Vec::new(),
            targets_y1: Vec::new(),
            entries: Vec::new(),
            starts: Vec::new(),
            probs: Vec::new(),
        }
    }

    /// Kernel row `(target id, p(y1) β)` of the last evaluated node, skipping
    /// candidates with zero probability.
    pub fn for_row_entries(&self, mut f: impl FnMut(usize, f64)) {
        for c in 0..self.candidates() {
            let p = self.probs[c];
            if p == 0.0 {
                continue;
            }
            for &(target, w) in &self.entries[self.starts[c]..self.starts[c + 1]] {
                f(target, p * w);
            }
        }
    }

    pub fn candidates(&self) -> usize {
        self.costs.len()
    }
}

impl<'a> RowEval<'a> {
    pub fn new(problem: &'a ProblemSpec, disc: &'a Discretization, ls: &'a LevelSets) -> Self {
        RowEval {
            geom: Geometry::new(problem, disc),
            ls,
        }
    }

    pub fn scratch(&self) -> RowScratch {
        RowScratch::new(self.geom.dim(), self.geom.control_dim())
    }

    /// Fills per-candidate costs `Δt ℓ(t_k, α, x, M_k) + I[V_{k+1}](y)` and
    /// the target lists of node `idx ∈ S_k`.
    pub fn eval(&self, k: usize, idx: &[i64], f_x: f64, next_values: &[f64], s: &mut RowScratch) -> Result<()> {
        let (d, r) = (self.geom.dim(), self.geom.control_dim());
        let m = d - r;
        let dt = self.geom.disc.dt;
        let dx = self.geom.disc.dx;
        let control_cost = &self.geom.problem.cost.control_cost;
        let next = self.ls.get(k + 1);
        self.geom.frame(k, idx, &mut s.frame)?;
        s.costs.clear();
        s.alphas.clear();
        s.targets_y1.clear();
        s.entries.clear();
        s.starts.clear();
        let mut missing = None;
        let RowScratch {
            frame,
            cand,
            stencil,
            target,
            costs,
            alphas,
            targets_y1,
            entries,
            starts,
            ..
        } = s;
        let frame: &NodeFrame = frame;
        let t = frame.t;
        let x: &[f64] = &frame.x;
        self.geom.for_each_candidate(frame, cand, |y1, alpha, y2| {
            starts.push(entries.len());
            let mut interp = 0.0;
            if m == 0 {
                match next.id_of(y1) {
                    Some(id) => {
                        interp += next_values[id];
                        entries.push((id, 1.0));
                    }
                    None => {
                        if missing.is_none() {
                            missing = Some(y1.to_vec());
                        }
                    }
                }
            } else {
                stencil.fill(y2, dx);
                // Element-wise copies: these slices are tiny and
                // `copy_from_slice` lowers to a libc call.
                for (t, v) in target.iter_mut().zip(y1) {
                    *t = *v;
                }
                for c in 0..stencil.count {
                    for (t, v) in target[r..].iter_mut().zip(stencil.corner(c, m)) {
                        *t = *v;
                    }
                    match next.id_of(target) {
                        Some(id) => {
                            let w = stencil.weights[c];
                            interp += w * next_values[id];
                            entries.push((id, w));
                        }
                        None => {
                            if missing.is_none() {
                                missing = Some(target.clone());
                            }
                        }
                    }
                }
            }
            let cost = dt * (control_cost(t, alpha, x) + f_x) + interp;
            costs.push(cost);
            for &a in alpha {
                alphas.push(a);
            }
            for &y in y1 {
                targets_y1.push(y);
            }
        });
        starts.push(entries.len());
        if let Some(target) = missing {
            return Err(MfgError::Internal(format!(
                "interpolation corner {target:?} missing from S_{} (from node {idx:?} at k={k})",
                k + 1
            )));
        }
        if costs.is_empty() {
            return Err(MfgError::Internal(format!(
                "empty reachable control set at k={k}, x={idx:?}"
            )));
        }
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(MfgError::Numeric(format!("non-finite cost at k={k}, x={idx:?}")));
        }
        Ok(())
    }
}

/// Backward sweep against explicit coupling fields: `running[k]` holds
/// `f(t_k, ·, M_k)` on `S_k` and `terminal` holds `g(·, M_{N_t})` on `S_{N_t}`.
pub fn backward_sweep_with_fields(
    problem: &ProblemSpec,
    disc: &Discretization,
    ls: &LevelSets,
    running: Vec<Vec<f64>>,
    terminal: Vec<f64>,
) -> Result<ValuePolicy> {
    Ok(backward_sweep_recording(problem, disc, ls, running, terminal, 0)?.0)
}

/// One chunk of a sweep step: values, and the kernel rows while recording.
struct SweepPart {
    values: Vec<f64>,
    row_lens: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

/// [`backward_sweep_with_fields`] that also stores the kernel rows it
/// evaluates, as long as their total count stays within `max_entries`.
/// The stored rows equal those of [`TransitionKernel`] bit for bit.
pub fn backward_sweep_recording(
    problem: &ProblemSpec,
    disc: &Discretization,
    ls: &LevelSets,
    running: Vec<Vec<f64>>,
    terminal: Vec<f64>,
    max_entries: usize,
) -> Result<(ValuePolicy, Option<SparseKernel>)> {
    let n_t = ls.n_t();
    if running.len() != n_t || terminal.len() != ls.get(n_t).len() {
        return Err(MfgError::Usage("coupling fields do not match the level sets".into()));
    }
    for (k, f) in running.iter().enumerate() {
        if f.len() != ls.get(k).len() {
            return Err(MfgError::Usage(format!("running field at k={k} has the wrong length")));
        }
    }
    if terminal.iter().chain(running.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(MfgError::Numeric("non-finite coupling field".into()));
    }
    let eval = RowEval::new(problem, disc, ls);
    let eps = disc.epsilon;
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); n_t + 1];
    values[n_t] = terminal;
    let mut recording = max_entries > 0;
    let mut stored = 0usize;
    let mut kernel = SparseKernel {
        row_ptr: vec![Vec::new(); n_t],
        cols: vec![Vec::new(); n_t],
        vals: vec![Vec::new(); n_t],
    };
    for k in (0..n_t).rev() {
        let set = ls.get(k);
        let next_values = &values[k + 1];
        let f_k = &running[k];
        let parts: Vec<SweepPart> = chunks(set.len())
            .into_par_iter()
            .map(|(start, end)| -> Result<SweepPart> {
                let mut s = eval.scratch();
                let mut part = SweepPart {
                    values: Vec::with_capacity(end - start),
                    row_lens: Vec::new(),
                    cols: Vec::new(),
                    vals: Vec::new(),
                };
                let mut err = None;
                set.for_each_in(start, end, |id, idx| {
                    if err.is_some() {
                        return;
                    }
                    if let Err(e) = eval.eval(k, idx, f_k[id], next_values, &mut s) {
                        err = Some(e);
                        return;
                    }
                    part.values.push(gibbs_into(&s.costs, eps, &mut s.probs));
                    if recording {
                        let before = part.cols.len();
                        s.for_row_entries(|t, p| {
                            part.cols.push(t);
                            part.vals.push(p);
                        });
                        part.row_lens.push(part.cols.len() - before);
                    }
                });
                err.map_or(Ok(part), Err)
            })
            .collect::<Result<_>>()?;
        if recording {
            stored += parts.iter().map(|p| p.cols.len()).sum::<usize>();
            recording = stored <= max_entries;
        }
        if recording {
            let mut ptr = Vec::with_capacity(set.len() + 1);
            ptr.push(0usize);
            for p in &parts {
                for len in &p.row_lens {
                    ptr.push(ptr.last().unwrap() + len);
                }
            }
            kernel.row_ptr[k] = ptr;
            kernel.cols[k] = parts.iter().flat_map(|p| p.cols.iter().copied()).collect();
            kernel.vals[k] = parts.iter().flat_map(|p| p.vals.iter().copied()).collect();
        } else {
            kernel = SparseKernel::default();
        }
        values[k] = parts.into_iter().flat_map(|p| p.values).collect();
    }
    let kernel = (max_entries > 0 && recording).then_some(kernel);
    Ok((
        ValuePolicy {
            epsilon: eps,
            values,
            running,
        },
        kernel,
    ))
}

/// `V^M` for the flow `M`: terminal `g(·, M_{N_t})` then the regularized
/// recursion down to `k = 0`.
pub fn backward_sweep(flow: &Flow, problem: &ProblemSpec, disc: &Discretization, ls: &LevelSets) -> Result<ValuePolicy> {
    let (running, terminal) = coupling_fields(problem, disc, ls, flow)?;
    backward_sweep_with_fields(problem, disc, ls, running, terminal)
}

/// Row access to a family of Markov kernels `P_k : S_k → P(S_{k+1})`.
pub trait KernelRows: Sync {
    /// Number of transitions `N_t`.
    fn steps(&self) -> usize;

    /// Calls `f(source id, row)` for every source node `start..end` of `S_k`
    /// in order; `row` lists `(target id, probability)`.
    fn for_rows(&self, k: usize, start: usize, end: usize, f: &mut dyn FnMut(usize, &[(usize, f64)])) -> Result<()>;

    fn row(&self, k: usize, id: usize) -> Result<Vec<(usize, f64)>> {
        let mut out = Vec::new();
        self.for_rows(k, id, id + 1, &mut |_, row| out.extend_from_slice(row))?;
        Ok(out)
    }
}

/// The kernels `P_k(x, y) = p_k(x, y1) β_{y2}(y2(k, x, y1))` induced by a
/// [`ValuePolicy`], evaluated lazily row by row.
pub struct TransitionKernel<'a> {
    eval: RowEval<'a>,
    vp: &'a ValuePolicy,
}

impl<'a> TransitionKernel<'a> {
    pub fn new(problem: &'a ProblemSpec, disc: &'a Discretization, ls: &'a LevelSets, vp: &'a ValuePolicy) -> Result<Self> {
        if vp.values.len() != ls.sets.len() {
            return Err(MfgError::Usage("value policy does not match the level sets".into()));
        }
        if vp.epsilon != disc.epsilon {
            return Err(MfgError::Usage("value policy computed with a different epsilon".into()));
        }
        Ok(TransitionKernel {
            eval: RowEval::new(problem, disc, ls),
            vp,
        })
    }

    pub fn level_sets(&self) -> &LevelSets {
        self.eval.ls
    }

    /// Gibbs policy `p_k(x, ·)` at node `id` as (targets `y1`, probabilities).
    pub fn policy_row(&self, k: usize, id: usize) -> Result<(Vec<Vec<i64>>, Vec<f64>)> {
        let mut s = self.eval.scratch();
        let mut idx = vec![0i64; self.eval.geom.dim()];
        self.eval.ls.get(k).index_of(id, &mut idx);
        self.eval_node(k, id, &idx, &mut s)?;
        let r = self.eval.geom.control_dim();
        let targets = s.targets_y1.chunks(r).map(<[i64]>::to_vec).collect();
        Ok((targets, s.probs.clone()))
    }

    fn eval_node(&self, k: usize, id: usize, idx: &[i64], s: &mut RowScratch) -> Result<()> {
        self.eval.eval(k, idx, self.vp.running[k][id], &self.vp.values[k + 1], s)?;
        gibbs_into(&s.costs, self.vp.epsilon, &mut s.probs);
        Ok(())
    }

    /// Visits each node of `S_k` in `start..end` with its evaluated row.
    pub(crate) fn for_nodes(&self, k: usize, start: usize, end: usize, f: &mut dyn FnMut(usize, &RowScratch)) -> Result<()> {
        let mut s = self.eval.scratch();
        let mut err = None;
        self.eval.ls.get(k).for_each_in(start, end, |id, idx| {
            if err.is_some() {
                return;
            }
            match self.eval_node(k, id, idx, &mut s) {
                Ok(()) => f(id, &s),
                Err(e) => err = Some(e),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

impl KernelRows for TransitionKernel<'_> {
    fn steps(&self) -> usize {
        self.eval.ls.n_t()
    }

    fn for_rows(&self, k: usize, start: usize, end: usize, f: &mut dyn FnMut(usize, &[(usize, f64)])) -> Result<()> {
        let mut row: Vec<(usize, f64)> = Vec::new();
        self.for_nodes(k, start, end, &mut |id, s| {
            row.clear();
            s.for_row_entries(|t, p| row.push((t, p)));
            f(id, &row);
        })
    }
}

/// Kernels stored explicitly in compressed-row form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseKernel {
    /// Per step: row offsets (`|S_k| + 1` entries).
    pub row_ptr: Vec<Vec<usize>>,
    pub cols: Vec<Vec<usize>>,
    pub vals: Vec<Vec<f64>>,
}

impl SparseKernel {
    /// Materializes every row of `kernel` over the given set sizes.
    pub fn from_rows(kernel: &dyn KernelRows, sizes: &[usize]) -> Result<Self> {
        let mut out = SparseKernel::default();
        for k in 0..kernel.steps() {
            let mut ptr = vec![0usize];
            let mut cols = Vec::new();
            let mut vals = Vec::new();
            kernel.for_rows(k, 0, sizes[k], &mut |_, row| {
                for &(c, v) in row {
                    cols.push(c);
                    vals.push(v);
                }
                ptr.push(cols.len());
            })?;
            out.row_ptr.push(ptr);
            out.cols.push(cols);
            out.vals.push(vals);
        }
        Ok(out)
    }

    /// Builds the kernel from `(k, source id, target id, probability)`
    /// triplets; rows keep the triplet order.
    pub fn from_triplets(sizes: &[usize], triplets: &[(usize, usize, usize, f64)]) -> Result<Self> {
        let steps = sizes.len().saturating_sub(1);
        let mut rows: Vec<Vec<Vec<(usize, f64)>>> = (0..steps).map(|k| vec![Vec::new(); sizes[k]]).collect();
        for &(k, src, dst, p) in triplets {
            if k >= steps || src >= sizes[k] || dst >= sizes[k + 1] {
                return Err(MfgError::Usage(format!("kernel entry ({k}, {src}, {dst}) out of range")));
            }
            rows[k][src].push((dst, p));
        }
        let mut out = SparseKernel::default();
        for per_k in rows {
            let mut ptr = vec![0usize];
            let mut cols = Vec::new();
            let mut vals = Vec::new();
            for row in per_k {
                for (c, v) in row {
                    cols.push(c);
                    vals.push(v);
                }
                ptr.push(cols.len());
            }
            out.row_ptr.push(ptr);
            out.cols.push(cols);
            out.vals.push(vals);
        }
        Ok(out)
    }
}

impl KernelRows for SparseKernel {
    fn steps(&self) -> usize {
        self.row_ptr.len()
    }

    fn for_rows(&self, k: usize, start: usize, end: usize, f: &mut dyn FnMut(usize, &[(usize, f64)])) -> Result<()> {
        let ptr = &self.row_ptr[k];
        let mut row = Vec::new();
        for id in start..end.min(ptr.len() - 1) {
            row.clear();
            row.extend((ptr[id]..ptr[id + 1]).map(|e| (self.cols[k][e], self.vals[k][e])));
            f(id, &row);
        }
        Ok(())
    }
}

/// How much Gibbs mass sits on controls with `|α|∞ ≥ 0.95 Ĉ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationReport {
    /// Maximum over all `k` and nodes of `S_k`.
    pub max_over_nodes: f64,
    /// Maximum over `k` of the population-weighted saturated mass
    /// `Σ_x M_k(x) sat_k(x)`, when a flow is given.
    pub max_weighted: Option<f64>,
}

impl SaturationReport {
    /// The figure used to flag a run: the weighted one when available.
    pub fn flag_value(&self) -> f64 {
        self.max_weighted.unwrap_or(self.max_over_nodes)
    }
}

pub fn saturation_report(kernel: &TransitionKernel<'_>, flow: Option<&Flow>) -> Result<SaturationReport> {
    let ls = kernel.level_sets();
    let r = kernel.eval.geom.control_dim();
    let level = SATURATION_LEVEL * kernel.eval.geom.disc.control_bound;
    let mut max_nodes: f64 = 0.0;
    let mut max_weighted: f64 = 0.0;
    for k in 0..ls.n_t() {
        let parts: Vec<(f64, f64)> = chunks(ls.get(k).len())
            .into_par_iter()
            .map(|(start, end)| -> Result<(f64, f64)> {
                let mut node_max: f64 = 0.0;
                let mut weighted = 0.0;
                kernel.for_nodes(k, start, end, &mut |id, s| {
                    let sat: f64 = (0..s.candidates())
                        .filter(|&c| s.alphas[c * r..(c + 1) * r].iter().any(|a| a.abs() >= level))
                        .map(|c| s.probs[c])
                        .sum();
                    node_max = node_max.max(sat);
                    if let Some(fl) = flow {
                        weighted += fl.marginals[k][id] * sat;
                    }
                })?;
                Ok((node_max, weighted))
            })
            .collect::<Result<_>>()?;
        let weighted: f64 = parts.iter().map(|p| p.1).sum();
        max_nodes = parts.iter().fold(max_nodes, |m, p| m.max(p.0));
        max_weighted = max_weighted.max(weighted);
    }
    Ok(SaturationReport {
        max_over_nodes: max_nodes,
        max_weighted: flow.map(|_| max_weighted),
    })
}

/// Uniform auxiliary grid `lo + i·(hi − lo)/(n − 1)` per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
}

impl AuxGrid {
    pub fn len(&self) -> usize {
        self.n.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn step(&self, a: usize) -> f64 {
        (self.hi[a] - self.lo[a]) / (self.n[a] - 1) as f64
    }

    fn point(&self, mut lin: usize, out: &mut [f64]) {
        for a in (0..self.n.len()).rev() {
            let i = lin % self.n[a];
            lin /= self.n[a];
            out[a] = self.lo[a] + i as f64 * self.step(a);
        }
    }

    /// Multilinear interpolation of grid values, clamped to the box.
    fn interpolate(&self, values: &[f64], z: &[f64]) -> f64 {
        let dim = self.n.len();
        let mut base = [0usize; 2];
        let mut frac = [0f64; 2];
        for a in 0..dim {
            let s = ((z[a] - self.lo[a]) / self.step(a)).clamp(0.0, (self.n[a] - 1) as f64);
            let b = (s.floor() as usize).min(self.n[a] - 2);
            base[a] = b;
            frac[a] = s - b as f64;
        }
        let mut total = 0.0;
        for mask in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut lin = 0usize;
            for a in 0..dim {
                let bit = mask >> a & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                lin = lin * self.n[a] + base[a] + bit;
            }
            if w != 0.0 {
                total += w * values[lin];
            }
        }
        total
    }
}

/// Semi-discrete reference value: the time-discrete recursion
/// `v_k(x) = min_a Δt ℓ(t_k, a, x) + v_{k+1}(x + Δt [A + B a])` with the
/// minimum over a finite control grid and `v_{k+1}` interpolated on a dense
/// auxiliary grid. The step `k = 0` is evaluated exactly at `x0`.
///
/// `running(k, x)` supplies the frozen coupling term `f(t_k, x, m_k)` and
/// `terminal(x)` supplies `g(x, m_{N_t})`.
#[allow(clippy::too_many_arguments)]
pub fn semidiscrete_value(
    problem: &ProblemSpec,
    running: &(dyn Fn(usize, &[f64]) -> f64 + Sync),
    terminal: &(dyn Fn(&[f64]) -> f64 + Sync),
    n_t: usize,
    x0: &[f64],
    control_grid: &[Vec<f64>],
    aux: &AuxGrid,
) -> Result<f64> {
    let v = semidiscrete_values(problem, running, terminal, n_t, &[x0.to_vec()], control_grid, aux)?;
    Ok(v[0])
}

/// [`semidiscrete_value`] at several starting points, sharing the backward
/// recursion on the auxiliary grid.
#[allow(clippy::too_many_arguments)]
pub fn semidiscrete_values(
    problem: &ProblemSpec,
    running: &(dyn Fn(usize, &[f64]) -> f64 + Sync),
    terminal: &(dyn Fn(&[f64]) -> f64 + Sync),
    n_t: usize,
    starts: &[Vec<f64>],
    control_grid: &[Vec<f64>],
    aux: &AuxGrid,
) -> Result<Vec<f64>> {
    let d = problem.dim();
    let r = problem.control_dim();
    if d > 2 || aux.n.len() != d || starts.iter().any(|x0| x0.len() != d) {
        return Err(MfgError::Usage("semi-discrete oracle supports d <= 2 only".into()));
    }
    if n_t == 0 || n_t > 100 {
        return Err(MfgError::Usage("semi-discrete oracle needs 1 <= n_t <= 100".into()));
    }
    if control_grid.is_empty() || control_grid.len() > 4096 || control_grid.iter().any(|a| a.len() != r) {
        return Err(MfgError::Usage("control grid must hold between 1 and 4096 controls of dimension r".into()));
    }
    if aux.n.iter().any(|&n| n < 2) || aux.len() > 4_000_000 {
        return Err(MfgError::Usage("auxiliary grid must have 2..=4e6 points".into()));
    }
    let dt = problem.horizon / n_t as f64;
    let dyn_ = &problem.dynamics;
    let l0 = &problem.cost.control_cost;

    let step_value = |k: usize, x: &[f64], next: &[f64]| -> f64 {
        let t = k as f64 * dt;
        let a_vec = dyn_.drift(t, x);
        let b_mat = dyn_.control_matrix(t, x);
        let f = running(k, x);
        let mut y = vec![0.0; d];
        let mut best = f64::INFINITY;
        for a in control_grid {
            for i in 0..d {
                let drive: f64 = (0..r).map(|j| b_mat[i * r + j] * a[j]).sum();
                y[i] = x[i] + dt * (a_vec[i] + drive);
            }
            let c = dt * (l0(t, a, x) + f) + aux.interpolate(next, &y);
            if c < best {
                best = c;
            }
        }
        best
    };

    let mut values: Vec<f64> = (0..aux.len())
        .into_par_iter()
        .map(|lin| {
            let mut x = vec![0.0; d];
            aux.point(lin, &mut x);
            terminal(&x)
        })
        .collect();
    for k in (1..n_t).rev() {
        values = (0..aux.len())
            .into_par_iter()
            .map(|lin| {
                let mut x = vec![0.0; d];
                aux.point(lin, &mut x);
                step_value(k, &x, &values)
            })
            .collect();
    }
    let out: Vec<f64> = starts.par_iter().map(|x0| step_value(0, x0, &values)).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(MfgError::Numeric("semi-discrete value is not finite".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_costs_give_uniform_policy() {
        let (v, p) = gibbs_step(&[0.7; 8], 0.002).unwrap();
        assert!(p.iter().all(|q| (q - 0.125).abs() < 1e-15));
        assert!((v - (0.7 - 0.002 * 8f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn small_temperature_limit() {
        let (v, p) = gibbs_step(&[0.0, 10.0], 1e-3).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn closed_form_probabilities() {
        let (v, p) = gibbs_step(&[1.0, 2.0, 4.0], 1.0).unwrap();
        let w = [(-1f64).exp(), (-2f64).exp(), (-4f64).exp()];
        let z: f64 = w.iter().sum();
        for i in 0..3 {
            assert!((p[i] - w[i] / z).abs() < 1e-15);
        }
        assert!((v + z.ln()).abs() < 1e-14);
        assert!((entropic_objective(&[1.0, 2.0, 4.0], &p, 1.0) - v).abs() < 1e-14);
    }

    #[test]
    fn zero_temperature_takes_first_minimizer() {
        let (v, p) = gibbs_step(&[3.0, 1.0, 1.0, 2.0], 0.0).unwrap();
        assert_eq!(v, 1.0);
        assert_eq!(p, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_costs_are_an_error() {
        assert!(matches!(gibbs_step(&[], 0.1), Err(MfgError::Internal(_))));
    }

    #[test]
    fn extreme_spreads_stay_stochastic() {
        let (_, p) = gibbs_step(&[0.0, 1.0, 1e6], 1e-4).unwrap();
        assert_eq!(p[2], 0.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn aux_grid_interpolation_is_exact_on_bilinear() {
        let g = AuxGrid {
            lo: vec![-1.0, 0.0],
            hi: vec![1.0, 2.0],
            n: vec![5, 9],
        };
        let mut x = [0.0; 2];
        let vals: Vec<f64> = (0..g.len())
            .map(|i| {
                g.point(i, &mut x);
                1.0 + 2.0 * x[0] - x[1] + 0.5 * x[0] * x[1]
            })
            .collect();
        let z = [0.3, 1.37];
        let exact = 1.0 + 0.6 - 1.37 + 0.5 * 0.3 * 1.37;
        assert!((g.interpolate(&vals, &z) - exact).abs() < 1e-12);
    }
}
