//! Fictitious play for the discrete game, the L1 flow metric, and the
//! warm-started tolerance schedule.

use crate::error::{MfgError, Result};
use crate::transport::{Flow, Scheme};

/// Default cap on best-response evaluations per stage.
pub const DEFAULT_MAX_ITERS: usize = 500;

/// `(1/(N_t+1)) Σ_k Σ_x |a_k(x) − b_k(x)|`.
pub fn l1_flow_distance(a: &Flow, b: &Flow) -> Result<f64> {
    if a.marginals.len() != b.marginals.len()
        || a.marginals.iter().zip(&b.marginals).any(|(u, v)| u.len() != v.len())
    {
        return Err(MfgError::Usage("flows live on different level sets".into()));
    }
    let total: f64 = a
        .marginals
        .iter()
        .zip(&b.marginals)
        .map(|(u, v)| u.iter().zip(v).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    Ok(total / a.marginals.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FPOptions {
    pub max_iters: usize,
    /// Replace averaging by plain best-response iteration `M ← br(M)`.
    pub picard: bool,
}

impl Default for FPOptions {
    fn default() -> Self {
        FPOptions {
            max_iters: DEFAULT_MAX_ITERS,
            picard: false,
        }
    }
}

/// One tolerance stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub delta: f64,
    pub iterations: usize,
    pub final_error: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FPReport {
    pub stages: Vec<StageReport>,
    /// Residual `e_n` of every best-response evaluation, all stages in order.
    pub error_trace: Vec<f64>,
    pub converged: bool,
    pub final_flow: Flow,
}

impl FPReport {
    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }
}

/// Fictitious play from `initial` at tolerance `delta`:
/// `M^{n+1} = br(M̄^n)`, `e = |M^{n+1} − M̄^n|`, `M̄^{n+1} = (n M̄^n + M^{n+1})/(n+1)`,
/// stopping once `e ≤ delta`. The returned flow is the last `M̄^n` that was
/// fed to `br`, so its residual is exactly the final error.
pub fn fictitious_play(scheme: &Scheme, initial: &Flow, delta: f64, opts: FPOptions) -> Result<FPReport> {
    fictitious_play_with(initial, delta, opts, |m| scheme.best_response(m))
}

/// [`fictitious_play`] with an arbitrary best-response map.
pub fn fictitious_play_with<F>(initial: &Flow, delta: f64, opts: FPOptions, mut br: F) -> Result<FPReport>
where
    F: FnMut(&Flow) -> Result<Flow>,
{
    if !(delta > 0.0) {
        return Err(MfgError::Usage("tolerance must be positive".into()));
    }
    let mut bar = initial.clone();
    let mut n = 1usize;
    let mut e = delta + 1.0;
    let mut trace = Vec::new();
    let mut returned = bar.clone();
    while e > delta {
        if trace.len() >= opts.max_iters {
            break;
        }
        let response = br(&bar)?;
        e = l1_flow_distance(&response, &bar)?;
        trace.push(e);
        let a = n as f64 / (n + 1) as f64;
        let b = 1.0 / (n + 1) as f64;
        let mut next = if opts.picard {
            response
        } else {
            bar.combine(a, &response, b)
        };
        next.renormalize();
        returned = std::mem::replace(&mut bar, next);
        n += 1;
    }
    let converged = e <= delta;
    Ok(FPReport {
        stages: vec![StageReport {
            delta,
            iterations: trace.len(),
            final_error: trace.last().copied().unwrap_or(f64::NAN),
            converged,
        }],
        error_trace: trace,
        converged,
        final_flow: returned,
    })
}

/// Runs [`fictitious_play`] once per tolerance, each stage starting from the
/// previous stage's output. The first stage starts from `initial`, or from
/// the time-constant flow `M_k = M̂_0` when `None`. Stops at the first
/// stage that hits the iteration cap.
pub fn tolerance_schedule_run(scheme: &Scheme, deltas: &[f64], initial: Option<Flow>, opts: FPOptions) -> Result<FPReport> {
    let start = match initial {
        Some(f) => f,
        None => scheme.constant_flow()?,
    };
    tolerance_schedule_with(&start, deltas, opts, |m| scheme.best_response(m))
}

/// [`tolerance_schedule_run`] with an arbitrary best-response map.
pub fn tolerance_schedule_with<F>(initial: &Flow, deltas: &[f64], opts: FPOptions, mut br: F) -> Result<FPReport>
where
    F: FnMut(&Flow) -> Result<Flow>,
{
    if deltas.is_empty() {
        return Err(MfgError::Usage("at least one tolerance is required".into()));
    }
    if deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(MfgError::Usage("tolerances must be positive".into()));
    }
    if deltas.windows(2).any(|w| w[1] > w[0]) {
        return Err(MfgError::Usage("tolerances must be nonincreasing".into()));
    }
    let mut report = FPReport {
        stages: Vec::new(),
        error_trace: Vec::new(),
        converged: true,
        final_flow: initial.clone(),
    };
    for &delta in deltas {
        let stage = fictitious_play_with(&report.final_flow, delta, opts, &mut br)?;
        report.stages.extend(stage.stages);
        report.error_trace.extend(stage.error_trace);
        report.final_flow = stage.final_flow;
        if !stage.converged {
            report.converged = false;
            break;
        }
    }
    Ok(report)
}

/// `|M − br(M)|`, the fixed-point residual.
pub fn exploitability(flow: &Flow, scheme: &Scheme) -> Result<f64> {
    l1_flow_distance(flow, &scheme.best_response(flow)?)
}
