//! Small quadrature helpers: fixed 5-point Gauss–Legendre rules and
//! adaptive Simpson integration.

/// Nodes of the 5-point Gauss–Legendre rule on [-1, 1].
pub const GL5_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];

/// Weights of the 5-point Gauss–Legendre rule on [-1, 1].
pub const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_08,
    0.478_628_670_499_366_47,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_47,
    0.236_926_885_056_189_08,
];

/// Integrates `f` over the axis-aligned box `[lo, hi]` with a tensor
/// 5-point Gauss–Legendre rule. Degenerate boxes integrate to zero.
pub fn gauss_legendre_box<F>(f: &F, lo: &[f64], hi: &[f64]) -> f64
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let dim = lo.len();
    if lo.iter().zip(hi).any(|(a, b)| b <= a) {
        return 0.0;
    }
    let half: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (b - a)).collect();
    let mid: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let jac: f64 = half.iter().product();

    let mut point = vec![0.0; dim];
    let mut counters = vec![0usize; dim];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for axis in 0..dim {
            point[axis] = mid[axis] + half[axis] * GL5_NODES[counters[axis]];
            w *= GL5_WEIGHTS[counters[axis]];
        }
        total += w * f(&point);

        let mut axis = 0;
        loop {
            if axis == dim {
                return total * jac;
            }
            counters[axis] += 1;
            if counters[axis] < 5 {
                break;
            }
            counters[axis] = 0;
            axis += 1;
        }
    }
}

/// Composite Gauss–Legendre integration over a box split into `panels`
/// equal sub-boxes per axis.
pub fn composite_gauss_legendre<F>(f: &F, lo: &[f64], hi: &[f64], panels: usize) -> f64
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let dim = lo.len();
    let panels = panels.max(1);
    let step: Vec<f64> = lo
        .iter()
        .zip(hi)
        .map(|(a, b)| (b - a) / panels as f64)
        .collect();
    let mut counters = vec![0usize; dim];
    let mut sub_lo = vec![0.0; dim];
    let mut sub_hi = vec![0.0; dim];
    let mut total = 0.0;
    loop {
        for axis in 0..dim {
            sub_lo[axis] = lo[axis] + step[axis] * counters[axis] as f64;
            sub_hi[axis] = if counters[axis] + 1 == panels {
                hi[axis]
            } else {
                lo[axis] + step[axis] * (counters[axis] + 1) as f64
            };
        }
        total += gauss_legendre_box(f, &sub_lo, &sub_hi);

        let mut axis = 0;
        loop {
            if axis == dim {
                return total;
            }
            counters[axis] += 1;
            if counters[axis] < panels {
                break;
            }
            counters[axis] = 0;
            axis += 1;
        }
    }
}

/// Adaptive Simpson integration of a scalar function on `[a, b]`.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, tol: f64) -> f64
where
    F: Fn(f64) -> f64,
{
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }

    if b <= a {
        return 0.0;
    }
    // Start from a few panels so narrow peaks are not missed by the first estimate.
    const START_PANELS: usize = 16;
    let h = (b - a) / START_PANELS as f64;
    let mut total = 0.0;
    for i in 0..START_PANELS {
        let lo = a + h * i as f64;
        let hi = if i + 1 == START_PANELS { b } else { lo + h };
        let fa = f(lo);
        let fb = f(hi);
        let fm = f(0.5 * (lo + hi));
        let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
        total += recurse(&f, lo, hi, fa, fm, fb, whole, tol / START_PANELS as f64, 48);
    }
    total
}
