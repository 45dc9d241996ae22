//! Uniform lattice `Δx·Z^d`, the control and image maps of the scheme,
//! Q1 interpolation on the uncontrolled coordinates, and the reachable
//! level sets `S_k`.
//!
//! A point `x = (x1, x2)` is split into its first `r` coordinates `x1`
//! (moved directly by the control through the invertible block `B1`) and
//! the remaining `d - r` coordinates `x2`, which are advanced by the
//! dynamics and then spread onto lattice nodes with multilinear hat
//! weights. Lattice points are always addressed by their integer index;
//! coordinates are recomputed as `index * Δx`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{MfgError, Result};
use crate::problem::{invert_b1, Discretization, ProblemSpec};

/// Relative slack on the control bound when testing `|α|∞ ≤ Ĉ`, absorbing
/// rounding in `(y1 - x1)/Δt` for targets exactly on the bound.
pub const CONTROL_SLACK: f64 = 1e-9;

/// Fractional offsets (in cell units) below this are snapped onto the node.
pub const SNAP: f64 = 1e-11;

/// Nodes per parallel work unit. Fixed so that results never depend on the
/// number of threads.
pub const CHUNK: usize = 2048;

/// Default cap on `|S_k|`.
pub const DEFAULT_MAX_LEVEL_SET: usize = 50_000_000;

/// Lattice point addressed by its integer multi-index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LatticePoint {
    pub idx: Vec<i64>,
}

impl LatticePoint {
    pub fn new(idx: Vec<i64>) -> Self {
        LatticePoint { idx }
    }

    pub fn coords(&self, dx: f64) -> Vec<f64> {
        self.idx.iter().map(|&i| i as f64 * dx).collect()
    }

    /// `(x1, x2)` split after the first `r` coordinates.
    pub fn split(&self, r: usize) -> (&[i64], &[i64]) {
        self.idx.split_at(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Run {
    lo: i64,
    hi: i64,
    base: usize,
}

impl Run {
    fn len(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }
}

/// A finite set of lattice points, stored as runs along the last axis for
/// each row of the leading `d - 1` axes. Node ids follow lexicographic
/// order of the multi-index.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSet {
    dim: usize,
    prefix_lo: Vec<i64>,
    prefix_shape: Vec<usize>,
    row_start: Vec<usize>,
    runs: Vec<Run>,
    len: usize,
}

impl LevelSet {
    /// Builds a set from an arbitrary list of multi-indices (row-major, `dim` columns).
    pub fn from_indices(dim: usize, flat: &[i64]) -> Self {
        assert!(dim >= 1);
        let mut pts: Vec<&[i64]> = flat.chunks_exact(dim).collect();
        pts.sort();
        pts.dedup();
        if pts.is_empty() {
            return LevelSet::empty(dim);
        }
        let mut lo = vec![i64::MAX; dim];
        let mut hi = vec![i64::MIN; dim];
        for p in &pts {
            for a in 0..dim {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let shape: Vec<usize> = (0..dim).map(|a| (hi[a] - lo[a] + 1) as usize).collect();
        let words = BitBox::words_for(&shape);
        let bits: Vec<AtomicU64> = (0..words).map(|_| AtomicU64::new(0)).collect();
        let bb = BitBox {
            lo: lo.clone(),
            shape: shape.clone(),
            bits,
        };
        for p in &pts {
            bb.set(p);
        }
        bb.into_level_set()
    }

    pub fn empty(dim: usize) -> Self {
        LevelSet {
            dim,
            prefix_lo: vec![0; dim - 1],
            prefix_shape: vec![0; dim - 1],
            row_start: vec![0],
            runs: Vec::new(),
            len: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn row_of(&self, prefix: &[i64]) -> Option<usize> {
        let mut row = 0usize;
        for (a, &p) in prefix.iter().enumerate() {
            let off = p - self.prefix_lo[a];
            if off < 0 || off as usize >= self.prefix_shape[a] {
                return None;
            }
            row = row * self.prefix_shape[a] + off as usize;
        }
        Some(row)
    }

    fn decode_row(&self, mut row: usize, out: &mut [i64]) {
        for a in (0..self.dim - 1).rev() {
            let s = self.prefix_shape[a];
            out[a] = self.prefix_lo[a] + (row % s) as i64;
            row /= s;
        }
    }

    /// Node id of a multi-index, if present.
    #[inline]
    pub fn id_of(&self, idx: &[i64]) -> Option<usize> {
        let (prefix, last) = idx.split_at(self.dim - 1);
        let row = self.row_of(prefix)?;
        let runs = &self.runs[self.row_start[row]..self.row_start[row + 1]];
        let v = last[0];
        if runs.len() == 1 {
            let r = runs[0];
            return (r.lo <= v && v <= r.hi).then(|| r.base + (v - r.lo) as usize);
        }
        let pos = runs.partition_point(|r| r.hi < v);
        let r = runs.get(pos)?;
        (r.lo <= v).then(|| r.base + (v - r.lo) as usize)
    }

    pub fn contains(&self, idx: &[i64]) -> bool {
        self.id_of(idx).is_some()
    }

    /// Multi-index of node `id`.
    pub fn index_of(&self, id: usize, out: &mut [i64]) {
        assert!(id < self.len, "node id out of range");
        let run_pos = self.runs.partition_point(|r| r.base + r.len() <= id);
        let row = self.row_start.partition_point(|&s| s <= run_pos) - 1;
        self.decode_row(row, out);
        let r = self.runs[run_pos];
        out[self.dim - 1] = r.lo + (id - r.base) as i64;
    }

    /// Calls `f(id, idx)` for every node with `start <= id < end`, in id order.
    pub fn for_each_in<F: FnMut(usize, &[i64])>(&self, start: usize, end: usize, mut f: F) {
        let end = end.min(self.len);
        if start >= end {
            return;
        }
        let mut idx = vec![0i64; self.dim];
        let mut run_pos = self.runs.partition_point(|r| r.base + r.len() <= start);
        let mut row = self.row_start.partition_point(|&s| s <= run_pos) - 1;
        self.decode_row(row, &mut idx);
        let mut id = start;
        while id < end {
            while self.row_start[row + 1] <= run_pos {
                row += 1;
                self.decode_row(row, &mut idx);
            }
            let r = self.runs[run_pos];
            let from = id - r.base;
            let to = (end - r.base).min(r.len());
            for off in from..to {
                idx[self.dim - 1] = r.lo + off as i64;
                f(r.base + off, &idx);
            }
            id = r.base + to;
            run_pos += 1;
        }
    }

    /// All multi-indices, row-major.
    pub fn indices(&self) -> Vec<i64> {
        let mut out = Vec::with_capacity(self.len * self.dim);
        self.for_each_in(0, self.len, |_, idx| out.extend_from_slice(idx));
        out
    }

    /// All coordinates, row-major.
    pub fn coordinates(&self, dx: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len * self.dim);
        self.for_each_in(0, self.len, |_, idx| out.extend(idx.iter().map(|&i| i as f64 * dx)));
        out
    }

    pub fn points(&self) -> Vec<LatticePoint> {
        self.indices()
            .chunks_exact(self.dim)
            .map(|c| LatticePoint::new(c.to_vec()))
            .collect()
    }

    /// Largest `|i|∞` over the set.
    pub fn max_abs_index(&self) -> i64 {
        let mut best = 0i64;
        let mut prefix = vec![0i64; self.dim];
        for row in 0..self.row_start.len() - 1 {
            let runs = &self.runs[self.row_start[row]..self.row_start[row + 1]];
            if runs.is_empty() {
                continue;
            }
            self.decode_row(row, &mut prefix);
            let p = prefix[..self.dim - 1].iter().map(|v| v.abs()).max().unwrap_or(0);
            for r in runs {
                best = best.max(p).max(r.lo.abs()).max(r.hi.abs());
            }
        }
        best
    }

    /// Inclusive index bounding box `(lo, hi)` of a nonempty set.
    pub fn bounding_box(&self) -> Option<(Vec<i64>, Vec<i64>)> {
        if self.len == 0 {
            return None;
        }
        let mut lo = vec![i64::MAX; self.dim];
        let mut hi = vec![i64::MIN; self.dim];
        let mut prefix = vec![0i64; self.dim];
        for row in 0..self.row_start.len() - 1 {
            let runs = &self.runs[self.row_start[row]..self.row_start[row + 1]];
            if runs.is_empty() {
                continue;
            }
            self.decode_row(row, &mut prefix);
            for a in 0..self.dim - 1 {
                lo[a] = lo[a].min(prefix[a]);
                hi[a] = hi[a].max(prefix[a]);
            }
            let last = self.dim - 1;
            lo[last] = lo[last].min(runs[0].lo);
            hi[last] = hi[last].max(runs[runs.len() - 1].hi);
        }
        Some((lo, hi))
    }
}

/// Dense bitmap over an index box, filled concurrently.
struct BitBox {
    lo: Vec<i64>,
    shape: Vec<usize>,
    bits: Vec<AtomicU64>,
}

impl BitBox {
    fn words_for(shape: &[usize]) -> usize {
        let n: usize = shape.iter().product();
        n.div_ceil(64)
    }

    fn new(lo: Vec<i64>, hi: &[i64]) -> Self {
        let shape: Vec<usize> = lo.iter().zip(hi).map(|(a, b)| (b - a + 1) as usize).collect();
        let words = Self::words_for(&shape);
        BitBox {
            lo,
            shape,
            bits: (0..words).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    #[inline]
    fn set(&self, idx: &[i64]) {
        let mut lin = 0usize;
        for (a, &v) in idx.iter().enumerate() {
            let off = v - self.lo[a];
            debug_assert!(off >= 0 && (off as usize) < self.shape[a]);
            lin = lin * self.shape[a] + off as usize;
        }
        self.bits[lin / 64].fetch_or(1u64 << (lin % 64), Ordering::Relaxed);
    }

    #[inline]
    fn get(&self, lin: usize) -> bool {
        self.bits[lin / 64].load(Ordering::Relaxed) & (1u64 << (lin % 64)) != 0
    }

    fn into_level_set(self) -> LevelSet {
        let dim = self.lo.len();
        let last_len = self.shape[dim - 1];
        let rows: usize = self.shape[..dim - 1].iter().product();
        let mut row_start = Vec::with_capacity(rows + 1);
        let mut runs = Vec::new();
        let mut len = 0usize;
        for row in 0..rows {
            row_start.push(runs.len());
            let base_lin = row * last_len;
            let mut j = 0usize;
            while j < last_len {
                if !self.get(base_lin + j) {
                    j += 1;
                    continue;
                }
                let start = j;
                while j < last_len && self.get(base_lin + j) {
                    j += 1;
                }
                let run = Run {
                    lo: self.lo[dim - 1] + start as i64,
                    hi: self.lo[dim - 1] + (j - 1) as i64,
                    base: len,
                };
                len += run.len();
                runs.push(run);
            }
        }
        row_start.push(runs.len());
        LevelSet {
            dim,
            prefix_lo: self.lo[..dim - 1].to_vec(),
            prefix_shape: self.shape[..dim - 1].to_vec(),
            row_start,
            runs,
            len,
        }
    }
}

/// The time-indexed family `S_0, …, S_{N_t}`.
#[derive(Debug, Clone)]
pub struct LevelSets {
    pub sets: Vec<LevelSet>,
    pub dim: usize,
    pub control_dim: usize,
    pub dx: f64,
    /// `C_∞`: every `S_k` lies in the closed max-norm ball of this radius.
    pub bounding_radius: f64,
}

impl LevelSets {
    pub fn n_t(&self) -> usize {
        self.sets.len() - 1
    }

    pub fn get(&self, k: usize) -> &LevelSet {
        &self.sets[k]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.sets.iter().map(LevelSet::len).collect()
    }

    pub fn total_nodes(&self) -> usize {
        self.sets.iter().map(LevelSet::len).sum()
    }

    /// Two families over the same lattice with identical sets.
    pub fn same_as(&self, other: &LevelSets) -> bool {
        self.dim == other.dim && self.dx == other.dx && self.sets == other.sets
    }
}

/// Dynamics of one lattice node at one time step, evaluated once and reused
/// for every candidate target.
#[derive(Debug, Clone)]
pub struct NodeFrame {
    pub k: usize,
    pub t: f64,
    pub idx: Vec<i64>,
    pub x: Vec<f64>,
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub b1: Vec<f64>,
    pub b1_inv: Vec<f64>,
    pub b2: Vec<f64>,
}

impl NodeFrame {
    pub fn new(dim: usize, r: usize) -> Self {
        NodeFrame {
            k: 0,
            t: 0.0,
            idx: vec![0; dim],
            x: vec![0.0; dim],
            a1: vec![0.0; r],
            a2: vec![0.0; dim - r],
            b1: vec![0.0; r * r],
            b1_inv: vec![0.0; r * r],
            b2: vec![0.0; (dim - r) * r],
        }
    }
}

/// Cell index and fractional offset of a coordinate in units of `Δx`, with
/// offsets within [`SNAP`] of a node moved onto it.
#[inline]
fn snapped_cell(s: f64) -> (i64, f64) {
    let fl = s.floor();
    let f = s - fl;
    if f < SNAP {
        (fl as i64, 0.0)
    } else if f > 1.0 - SNAP {
        (fl as i64 + 1, 0.0)
    } else {
        (fl as i64, f)
    }
}

/// Multilinear hat weights of a point in `R^m` on the corners of its cell.
/// Corners with zero weight are omitted.
#[derive(Debug, Clone, Default)]
pub struct Q1Stencil {
    pub count: usize,
    /// `count × m` corner indices, row-major.
    pub corners: Vec<i64>,
    pub weights: Vec<f64>,
}

impl Q1Stencil {
    pub fn corner(&self, i: usize, m: usize) -> &[i64] {
        &self.corners[i * m..(i + 1) * m]
    }

    /// Fills the stencil for `z` given in coordinates.
    pub fn fill(&mut self, z: &[f64], dx: f64) {
        let m = z.len();
        self.corners.clear();
        self.weights.clear();
        if m == 0 {
            self.count = 1;
            self.weights.push(1.0);
            return;
        }
        if m == 1 {
            let (b, f) = snapped_cell(z[0] / dx);
            self.corners.push(b);
            if f > 0.0 {
                self.corners.push(b + 1);
                self.weights.extend_from_slice(&[1.0 - f, f]);
                self.count = 2;
            } else {
                self.weights.push(1.0);
                self.count = 1;
            }
            return;
        }
        // Per-axis base index and fractional part.
        let mut base = [0i64; 8];
        let mut frac = [0f64; 8];
        let mut base_vec;
        let mut frac_vec;
        let (base, frac): (&mut [i64], &mut [f64]) = if m <= 8 {
            (&mut base[..m], &mut frac[..m])
        } else {
            base_vec = vec![0i64; m];
            frac_vec = vec![0f64; m];
            (&mut base_vec[..], &mut frac_vec[..])
        };
        for a in 0..m {
            (base[a], frac[a]) = snapped_cell(z[a] / dx);
        }
        for mask in 0..(1usize << m) {
            let mut w = 1.0;
            for a in 0..m {
                w *= if mask >> a & 1 == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w > 0.0 {
                for a in 0..m {
                    self.corners.push(base[a] + (mask >> a & 1) as i64);
                }
                self.weights.push(w);
            }
        }
        self.count = self.weights.len();
    }
}

/// Multilinear hat weights of `z` (coordinates in `R^{d-r}`) as a list of
/// (lattice point, weight). For `d = r` the list is a single entry with the
/// empty point and weight one.
pub fn q1_weights(z: &[f64], dx: f64) -> Vec<(LatticePoint, f64)> {
    let mut st = Q1Stencil::default();
    st.fill(z, dx);
    (0..st.count)
        .map(|i| (LatticePoint::new(st.corner(i, z.len()).to_vec()), st.weights[i]))
        .collect()
}

/// Q1 interpolant of lattice values at `z`. Missing corners are an error.
pub fn interpolate(values: &HashMap<LatticePoint, f64>, z: &[f64], dx: f64) -> Result<f64> {
    q1_weights(z, dx).into_iter().try_fold(0.0, |acc, (p, w)| {
        values
            .get(&p)
            .map(|v| acc + w * v)
            .ok_or_else(|| MfgError::Internal(format!("no value at interpolation corner {:?}", p.idx)))
    })
}

/// Evaluates the control map, image map and candidate sets of the scheme
/// for one problem and discretization.
#[derive(Clone, Copy)]
pub struct Geometry<'a> {
    pub problem: &'a ProblemSpec,
    pub disc: &'a Discretization,
}

impl<'a> Geometry<'a> {
    pub fn new(problem: &'a ProblemSpec, disc: &'a Discretization) -> Self {
        Geometry { problem, disc }
    }

    pub fn dim(&self) -> usize {
        self.problem.dim()
    }

    pub fn control_dim(&self) -> usize {
        self.problem.control_dim()
    }

    /// Evaluates `A1, A2, B1, B1⁻¹, B2` at node `idx` and time step `k`.
    pub fn frame(&self, k: usize, idx: &[i64], frame: &mut NodeFrame) -> Result<()> {
        let dyn_ = &self.problem.dynamics;
        let r = dyn_.control_dim();
        frame.k = k;
        frame.t = self.disc.time(k);
        frame.idx.copy_from_slice(idx);
        for (x, &i) in frame.x.iter_mut().zip(idx) {
            *x = i as f64 * self.disc.dx;
        }
        let t = frame.t;
        dyn_.a1(t, &frame.x, &mut frame.a1);
        dyn_.a2(t, &frame.x, &mut frame.a2);
        dyn_.b1(t, &frame.x, &mut frame.b1);
        dyn_.b2(t, &frame.x, &mut frame.b2);
        if r == 1 {
            let b = frame.b1[0];
            if !(b.abs() >= crate::problem::DET_FLOOR) {
                return Err(MfgError::Structural(format!(
                    "B1 is singular at t={t}, x={:?}",
                    frame.x
                )));
            }
            frame.b1_inv[0] = 1.0 / b;
        } else {
            let (inv, _) = invert_b1(r, &frame.b1)?;
            for i in 0..r {
                for j in 0..r {
                    frame.b1_inv[i * r + j] = inv[(i, j)];
                }
            }
        }
        let finite = frame.a1.iter().chain(&frame.a2).chain(&frame.b1).chain(&frame.b2).all(|v| v.is_finite());
        if !finite {
            return Err(MfgError::Numeric(format!("non-finite dynamics at t={t}, x={:?}", frame.x)));
        }
        Ok(())
    }

    /// `α(k, x, y1) = B1⁻¹ [(y1 − x1)/Δt − A1]` for a lattice target `y1`.
    #[inline]
    pub fn control_into(&self, frame: &NodeFrame, y1: &[i64], alpha: &mut [f64]) {
        let r = frame.a1.len();
        let scale = self.disc.dx / self.disc.dt;
        if r == 1 {
            alpha[0] = frame.b1_inv[0] * ((y1[0] - frame.idx[0]) as f64 * scale - frame.a1[0]);
            return;
        }
        let mut diff = [0f64; 8];
        let mut diff_vec;
        let diff: &mut [f64] = if r <= 8 {
            &mut diff[..r]
        } else {
            diff_vec = vec![0.0; r];
            &mut diff_vec[..]
        };
        for j in 0..r {
            diff[j] = (y1[j] - frame.idx[j]) as f64 * scale - frame.a1[j];
        }
        for i in 0..r {
            alpha[i] = (0..r).map(|j| frame.b1_inv[i * r + j] * diff[j]).sum();
        }
    }

    /// `y2(k, x, y1) = x2 + Δt [A2 + B2 α]`, given the control `α`.
    #[inline]
    pub fn image_into(&self, frame: &NodeFrame, alpha: &[f64], y2: &mut [f64]) {
        let r = alpha.len();
        let dt = self.disc.dt;
        for (i, out) in y2.iter_mut().enumerate() {
            let drive: f64 = (0..r).map(|j| frame.b2[i * r + j] * alpha[j]).sum();
            *out = frame.x[r + i] + dt * (frame.a2[i] + drive);
        }
    }

    #[inline]
    pub fn within_bound(&self, alpha: &[f64]) -> bool {
        let cap = self.disc.control_bound * (1.0 + CONTROL_SLACK);
        alpha.iter().all(|a| a.abs() <= cap)
    }

    /// Index box enclosing `S¹_{k+1}(x)`: `x1 + Δt A1 + Δt |B1| Ĉ [-1, 1]^r`.
    pub fn candidate_box(&self, frame: &NodeFrame, lo: &mut [i64], hi: &mut [i64]) {
        let r = frame.a1.len();
        let dt = self.disc.dt;
        let dx = self.disc.dx;
        let c_hat = self.disc.control_bound * (1.0 + CONTROL_SLACK);
        for j in 0..r {
            let center = frame.x[j] + dt * frame.a1[j];
            let spread: f64 = (0..r).map(|i| frame.b1[j * r + i].abs()).sum::<f64>() * dt * c_hat;
            lo[j] = ((center - spread) / dx - 1e-9).ceil() as i64;
            hi[j] = ((center + spread) / dx + 1e-9).floor() as i64;
        }
    }

    /// Visits every `y1 ∈ S¹_{k+1}(x)` in lexicographic order, passing the
    /// target index, its control and the image `y2`.
    pub fn for_each_candidate<F>(&self, frame: &NodeFrame, scratch: &mut CandidateScratch, mut f: F)
    where
        F: FnMut(&[i64], &[f64], &[f64]),
    {
        let r = frame.a1.len();
        self.candidate_box(frame, &mut scratch.lo, &mut scratch.hi);
        if scratch.lo.iter().zip(&scratch.hi).any(|(a, b)| a > b) {
            return;
        }
        scratch.y1.copy_from_slice(&scratch.lo);
        loop {
            self.control_into(frame, &scratch.y1, &mut scratch.alpha);
            if self.within_bound(&scratch.alpha) {
                self.image_into(frame, &scratch.alpha, &mut scratch.y2);
                f(&scratch.y1, &scratch.alpha, &scratch.y2);
            }
            // Odometer with the last axis fastest.
            let mut axis = r;
            loop {
                if axis == 0 {
                    return;
                }
                axis -= 1;
                scratch.y1[axis] += 1;
                if scratch.y1[axis] <= scratch.hi[axis] {
                    break;
                }
                scratch.y1[axis] = scratch.lo[axis];
            }
        }
    }
}

/// Reusable buffers for [`Geometry::for_each_candidate`].
#[derive(Debug, Clone)]
pub struct CandidateScratch {
    lo: Vec<i64>,
    hi: Vec<i64>,
    y1: Vec<i64>,
    alpha: Vec<f64>,
    y2: Vec<f64>,
}

impl CandidateScratch {
    pub fn new(dim: usize, r: usize) -> Self {
        CandidateScratch {
            lo: vec![0; r],
            hi: vec![0; r],
            y1: vec![0; r],
            alpha: vec![0.0; r],
            y2: vec![0.0; dim - r],
        }
    }
}

/// `α(k, x, y1)` for a lattice node `x` and a lattice target `y1`.
pub fn control_for_target(problem: &ProblemSpec, disc: &Discretization, k: usize, x: &LatticePoint, y1: &[i64]) -> Result<Vec<f64>> {
    let g = Geometry::new(problem, disc);
    let mut frame = NodeFrame::new(problem.dim(), problem.control_dim());
    g.frame(k, &x.idx, &mut frame)?;
    let mut alpha = vec![0.0; problem.control_dim()];
    g.control_into(&frame, y1, &mut alpha);
    Ok(alpha)
}

/// `y2(k, x, y1)`; empty when `d = r`.
pub fn image_y2(problem: &ProblemSpec, disc: &Discretization, k: usize, x: &LatticePoint, y1: &[i64]) -> Result<Vec<f64>> {
    let g = Geometry::new(problem, disc);
    let mut frame = NodeFrame::new(problem.dim(), problem.control_dim());
    g.frame(k, &x.idx, &mut frame)?;
    let mut alpha = vec![0.0; problem.control_dim()];
    g.control_into(&frame, y1, &mut alpha);
    let mut y2 = vec![0.0; problem.dim() - problem.control_dim()];
    g.image_into(&frame, &alpha, &mut y2);
    Ok(y2)
}

/// `S¹_{k+1}(x)`: lattice targets in the controlled coordinates reachable
/// with `|α|∞ ≤ Ĉ`, as index vectors in lexicographic order.
pub fn reachable_controls(problem: &ProblemSpec, disc: &Discretization, k: usize, x: &LatticePoint) -> Result<Vec<Vec<i64>>> {
    let g = Geometry::new(problem, disc);
    let (d, r) = (problem.dim(), problem.control_dim());
    let mut frame = NodeFrame::new(d, r);
    g.frame(k, &x.idx, &mut frame)?;
    let mut scratch = CandidateScratch::new(d, r);
    let mut out = Vec::new();
    g.for_each_candidate(&frame, &mut scratch, |y1, _, _| out.push(y1.to_vec()));
    if out.is_empty() {
        return Err(MfgError::Internal(format!(
            "empty reachable control set at k={k}, x={:?}",
            x.idx
        )));
    }
    Ok(out)
}

/// Index range of nodes whose closed cell `E(x)` overlaps `[lo, hi]` with
/// positive length along one axis.
fn covering_range(lo: f64, hi: f64, dx: f64) -> (i64, i64) {
    let first = (lo / dx - 0.5).floor() as i64 + 1;
    let last = (hi / dx + 0.5).ceil() as i64 - 1;
    (first, last)
}

/// `S_0`: all lattice points whose cell meets the support box of `m0`.
pub fn initial_level_set(problem: &ProblemSpec, dx: f64) -> LevelSet {
    let bx = &problem.initial.support_box;
    let dim = bx.dim();
    let ranges: Vec<(i64, i64)> = (0..dim).map(|a| covering_range(bx.lo[a], bx.hi[a], dx)).collect();
    if ranges.iter().any(|(a, b)| a > b) {
        return LevelSet::empty(dim);
    }
    let lo: Vec<i64> = ranges.iter().map(|r| r.0).collect();
    let hi: Vec<i64> = ranges.iter().map(|r| r.1).collect();
    let bb = BitBox::new(lo.clone(), &hi);
    bb.bits.iter().for_each(|w| w.store(0, Ordering::Relaxed));
    let mut idx = lo.clone();
    loop {
        bb.set(&idx);
        let mut axis = dim;
        loop {
            if axis == 0 {
                return bb.into_level_set();
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] <= hi[axis] {
                break;
            }
            idx[axis] = lo[axis];
        }
    }
}

/// Chunked node ranges `[start, end)` of a set.
pub fn chunks(len: usize) -> Vec<(usize, usize)> {
    (0..len.div_ceil(CHUNK))
        .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(len)))
        .collect()
}

/// Builds `S_0, …, S_{N_t}` by forward reachability:
/// `S_{k+1} = ∪_{x ∈ S_k} {(y1, y2) : y1 ∈ S¹_{k+1}(x), y2 a Q1 corner of y2(k,x,y1)}`.
pub fn build_level_sets(problem: &ProblemSpec, disc: &Discretization, max_size: usize) -> Result<LevelSets> {
    let (d, r) = (problem.dim(), problem.control_dim());
    let g = Geometry::new(problem, disc);
    let s0 = initial_level_set(problem, disc.dx);
    if s0.is_empty() {
        return Err(MfgError::Coverage { mass: 0.0 });
    }
    if s0.len() > max_size {
        return Err(MfgError::LevelSetTooLarge {
            k: 0,
            size: s0.len(),
            cap: max_size,
        });
    }
    let mut sets = vec![s0];
    for k in 0..disc.n_t {
        let current = &sets[k];
        let parts = chunks(current.len());

        // Pass 1: bounding box of all targets, and nonemptiness of every S¹.
        let boxes: Vec<(Vec<i64>, Vec<i64>)> = parts
            .par_iter()
            .map(|&(start, end)| -> Result<(Vec<i64>, Vec<i64>)> {
                let mut frame = NodeFrame::new(d, r);
                let mut scratch = CandidateScratch::new(d, r);
                let mut stencil = Q1Stencil::default();
                let mut lo = vec![i64::MAX; d];
                let mut hi = vec![i64::MIN; d];
                let mut err = None;
                current.for_each_in(start, end, |_, idx| {
                    if err.is_some() {
                        return;
                    }
                    if let Err(e) = g.frame(k, idx, &mut frame) {
                        err = Some(e);
                        return;
                    }
                    let mut any = false;
                    g.for_each_candidate(&frame, &mut scratch, |y1, _, y2| {
                        any = true;
                        stencil.fill(y2, disc.dx);
                        for (j, &v) in y1.iter().enumerate() {
                            lo[j] = lo[j].min(v);
                            hi[j] = hi[j].max(v);
                        }
                        for c in 0..stencil.count {
                            for (a, &v) in stencil.corner(c, d - r).iter().enumerate() {
                                lo[r + a] = lo[r + a].min(v);
                                hi[r + a] = hi[r + a].max(v);
                            }
                        }
                    });
                    if !any {
                        err = Some(MfgError::Internal(format!(
                            "empty reachable control set at k={k}, x={idx:?}; Ĉ too small for the steps"
                        )));
                    }
                });
                match err {
                    Some(e) => Err(e),
                    None => Ok((lo, hi)),
                }
            })
            .collect::<Result<_>>()?;
        let mut lo = vec![i64::MAX; d];
        let mut hi = vec![i64::MIN; d];
        for (blo, bhi) in &boxes {
            for a in 0..d {
                lo[a] = lo[a].min(blo[a]);
                hi[a] = hi[a].max(bhi[a]);
            }
        }
        let volume: f64 = lo.iter().zip(&hi).map(|(a, b)| (b - a + 1) as f64).product();
        if volume > 64.0 * max_size as f64 {
            return Err(MfgError::LevelSetTooLarge {
                k: k + 1,
                size: volume as usize,
                cap: max_size,
            });
        }

        // Pass 2: mark every reachable node.
        let bb = BitBox::new(lo, &hi);
        parts.par_iter().for_each(|&(start, end)| {
            let mut frame = NodeFrame::new(d, r);
            let mut scratch = CandidateScratch::new(d, r);
            let mut stencil = Q1Stencil::default();
            let mut target = vec![0i64; d];
            current.for_each_in(start, end, |_, idx| {
                if g.frame(k, idx, &mut frame).is_err() {
                    return;
                }
                g.for_each_candidate(&frame, &mut scratch, |y1, _, y2| {
                    stencil.fill(y2, disc.dx);
                    target[..r].copy_from_slice(y1);
                    for c in 0..stencil.count {
                        target[r..].copy_from_slice(stencil.corner(c, d - r));
                        bb.set(&target);
                    }
                });
            });
        });
        let next = bb.into_level_set();
        if next.len() > max_size {
            return Err(MfgError::LevelSetTooLarge {
                k: k + 1,
                size: next.len(),
                cap: max_size,
            });
        }
        sets.push(next);
    }
    let max_idx = sets.iter().map(LevelSet::max_abs_index).max().unwrap_or(0);
    Ok(LevelSets {
        sets,
        dim: d,
        control_dim: r,
        dx: disc.dx,
        bounding_radius: max_idx as f64 * disc.dx,
    })
}

/// Cheap forecast of `|S_k|` for every `k`: the index bounding box is
/// propagated through the reachable-target bounds of a sample of its
/// points, and its volume reported. Exact for monotone one-dimensional
/// dynamics; an upper estimate otherwise.
pub fn forecast_sizes(problem: &ProblemSpec, disc: &Discretization) -> Result<Vec<f64>> {
    let (d, r) = (problem.dim(), problem.control_dim());
    let g = Geometry::new(problem, disc);
    let s0 = initial_level_set(problem, disc.dx);
    let (mut lo, mut hi) = s0.bounding_box().ok_or(MfgError::Coverage { mass: 0.0 })?;
    let mut out = vec![lo.iter().zip(&hi).map(|(a, b)| (b - a + 1) as f64).product()];
    const SAMPLES: i64 = 9;
    let mut frame = NodeFrame::new(d, r);
    let mut scratch = CandidateScratch::new(d, r);
    let mut stencil = Q1Stencil::default();
    for k in 0..disc.n_t {
        let mut nlo = vec![i64::MAX; d];
        let mut nhi = vec![i64::MIN; d];
        let mut counters = vec![0i64; d];
        let mut idx = vec![0i64; d];
        'samples: loop {
            for a in 0..d {
                let span = hi[a] - lo[a];
                idx[a] = lo[a] + (span * counters[a]) / (SAMPLES - 1);
            }
            g.frame(k, &idx, &mut frame)?;
            g.for_each_candidate(&frame, &mut scratch, |y1, _, y2| {
                stencil.fill(y2, disc.dx);
                for (j, &v) in y1.iter().enumerate() {
                    nlo[j] = nlo[j].min(v);
                    nhi[j] = nhi[j].max(v);
                }
                for c in 0..stencil.count {
                    for (a, &v) in stencil.corner(c, d - r).iter().enumerate() {
                        nlo[r + a] = nlo[r + a].min(v);
                        nhi[r + a] = nhi[r + a].max(v);
                    }
                }
            });
            let mut axis = d;
            loop {
                if axis == 0 {
                    break 'samples;
                }
                axis -= 1;
                counters[axis] += 1;
                if counters[axis] < SAMPLES {
                    break;
                }
                counters[axis] = 0;
            }
        }
        lo = nlo;
        hi = nhi;
        out.push(lo.iter().zip(&hi).map(|(a, b)| (b - a + 1) as f64).product());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_set_lookup_round_trips() {
        let pts = vec![0, 0, 0, 1, 0, 3, 2, -1, 2, 0, 5, 5];
        let s = LevelSet::from_indices(2, &pts);
        assert_eq!(s.len(), 6);
        let mut idx = [0i64; 2];
        for id in 0..s.len() {
            s.index_of(id, &mut idx);
            assert_eq!(s.id_of(&idx), Some(id));
        }
        assert_eq!(s.id_of(&[0, 2]), None);
        assert_eq!(s.id_of(&[1, 0]), None);
        assert_eq!(s.id_of(&[9, 0]), None);
        assert_eq!(s.indices(), vec![0, 0, 0, 1, 0, 3, 2, -1, 2, 0, 5, 5]);
        assert_eq!(s.max_abs_index(), 5);
        assert_eq!(s.bounding_box(), Some((vec![0, -1], vec![5, 5])));
    }

    #[test]
    fn for_each_in_partial_ranges() {
        let pts: Vec<i64> = (-3..=3).chain(10..=12).collect();
        let s = LevelSet::from_indices(1, &pts);
        let mut seen = Vec::new();
        s.for_each_in(5, 9, |id, idx| seen.push((id, idx[0])));
        assert_eq!(seen, vec![(5, 2), (6, 3), (7, 10), (8, 11)]);
    }

    #[test]
    fn q1_on_node_midpoint_and_cell_center() {
        let dx = 0.1;
        let on = q1_weights(&[0.3], dx);
        assert_eq!(on.len(), 1);
        assert_eq!(on[0].0.idx, vec![3]);
        assert_eq!(on[0].1, 1.0);

        let mid = q1_weights(&[0.35], dx);
        assert_eq!(mid.len(), 2);
        for (_, w) in &mid {
            assert!((w - 0.5).abs() < 1e-12);
        }

        let center = q1_weights(&[0.05, -0.15], dx);
        assert_eq!(center.len(), 4);
        for (_, w) in &center {
            assert!((w - 0.25).abs() < 1e-12);
        }

        let empty = q1_weights(&[], dx);
        assert_eq!(empty, vec![(LatticePoint::new(vec![]), 1.0)]);
    }

    #[test]
    fn interpolation_examples() {
        let dx = 0.01;
        let mut values = HashMap::new();
        values.insert(LatticePoint::new(vec![0]), 1.0);
        values.insert(LatticePoint::new(vec![1]), 3.0);
        let v = interpolate(&values, &[0.25 * dx], dx).unwrap();
        assert!((v - 1.5).abs() < 1e-12);
        assert!(interpolate(&values, &[1.5 * dx], dx).is_err());
    }
}
