//! Bounded-variable least squares.
//!
//! Minimises `0.5 * ||A x - y||^2` subject to `lower <= x <= upper` with an
//! active-set method: variables start on a bound, the worst
//! gradient-violating variable is freed, and the free subproblem is solved
//! by SVD (minimal-norm on rank deficiency). When the free solution leaves
//! the box, the step is cut at the first blocking variable, which returns to
//! its bound. A variable freed and immediately re-bound without progress is
//! banned until the iterate moves, which breaks cycles.
//!
//! Every answer carries a KKT report: at optimality the gradient
//! `g = A^T (A x - y)` must vanish for interior variables, be nonnegative at
//! lower bounds and nonpositive at upper bounds, all within a tolerance
//! relative to `||A^T y||_inf`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarStatus {
    AtLower,
    Interior,
    AtUpper,
}

/// KKT state of one variable at the returned point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktEntry {
    pub status: VarStatus,
    pub gradient: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    /// Absolute gradient tolerance the entries were checked against.
    pub tol: f64,
    pub entries: Vec<KktEntry>,
    pub satisfied: bool,
}

#[derive(Debug, Clone)]
pub struct BvlsSolution {
    pub x: DVector<f64>,
    /// `0.5 * ||A x - y||^2` at `x`.
    pub objective: f64,
    /// Outer iterations (variables freed).
    pub iterations: usize,
    pub kkt: KktReport,
}

#[derive(Debug, Error)]
pub enum BvlsError {
    #[error("matrix or target contains non-finite values")]
    NonFinite,
    #[error("invalid bounds at index {index}: [{lower}, {upper}]")]
    InvalidBounds { index: usize, lower: f64, upper: f64 },
    #[error("no convergence in {iterations} iterations; best objective {:.6e}", best.objective)]
    IterationLimit {
        iterations: usize,
        /// Best iterate reached, KKT report included.
        best: Box<BvlsSolution>,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct BvlsOptions {
    /// Outer iteration cap; 0 picks `100 + 20 n`.
    pub max_iter: usize,
    /// Gradient tolerance relative to `||A^T y||_inf`.
    pub tol_rel: f64,
}

impl Default for BvlsOptions {
    fn default() -> Self {
        Self { max_iter: 0, tol_rel: 1e-8 }
    }
}

/// Minimal-norm least-squares solution via SVD with a relative singular
/// value cutoff.
pub(crate) fn lsq_min_norm(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let vt = svd.v_t.as_ref().expect("svd requested v_t");
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = smax * 1e-12;
    let mut w = u.transpose() * b;
    for i in 0..s.len() {
        w[i] = if s[i] > cutoff { w[i] / s[i] } else { 0.0 };
    }
    vt.transpose() * w
}

fn gradient(a: &DMatrix<f64>, y: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    a.transpose() * (a * x - y)
}

fn objective(a: &DMatrix<f64>, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * (a * x - y).norm_squared()
}

fn gradient_tol(a: &DMatrix<f64>, y: &DVector<f64>, tol_rel: f64) -> f64 {
    let aty_inf = (a.transpose() * y).amax();
    if aty_inf > 0.0 {
        tol_rel * aty_inf
    } else {
        // Degenerate scaling; fall back to the relative tolerance itself.
        tol_rel
    }
}

/// Classifies `x` against the bounds and checks the KKT conditions. Usable
/// on any point, not just solver output.
pub fn kkt_report(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    x: &DVector<f64>,
    tol_rel: f64,
) -> KktReport {
    let g = gradient(a, y, x);
    let tol = gradient_tol(a, y, tol_rel);
    let entries: Vec<KktEntry> = (0..x.len())
        .map(|j| {
            let at = |bound: f64| bound.is_finite() && (x[j] - bound).abs() <= 1e-10 * (1.0 + bound.abs());
            let status = if at(lower[j]) {
                VarStatus::AtLower
            } else if at(upper[j]) {
                VarStatus::AtUpper
            } else {
                VarStatus::Interior
            };
            let ok = if lower[j] == upper[j] {
                true
            } else {
                match status {
                    VarStatus::Interior => g[j].abs() <= tol,
                    VarStatus::AtLower => g[j] >= -tol,
                    VarStatus::AtUpper => g[j] <= tol,
                }
            };
            KktEntry { status, gradient: g[j], ok }
        })
        .collect();
    let satisfied = entries.iter().all(|e| e.ok);
    KktReport { tol, entries, satisfied }
}

pub fn solve_bvls(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    opts: &BvlsOptions,
) -> Result<BvlsSolution, BvlsError> {
    let n = a.ncols();
    assert_eq!(a.nrows(), y.len(), "row count mismatch");
    assert_eq!(lower.len(), n, "lower bound length mismatch");
    assert_eq!(upper.len(), n, "upper bound length mismatch");
    if a.iter().any(|v| !v.is_finite()) || y.iter().any(|v| !v.is_finite()) {
        return Err(BvlsError::NonFinite);
    }
    for j in 0..n {
        let (l, u) = (lower[j], upper[j]);
        if l.is_nan() || u.is_nan() || l > u {
            return Err(BvlsError::InvalidBounds { index: j, lower: l, upper: u });
        }
    }
    let max_iter = if opts.max_iter == 0 { 100 + 20 * n } else { opts.max_iter };
    let tol = gradient_tol(a, y, opts.tol_rel);

    #[derive(Clone, Copy, PartialEq, Eq)]
    enum St {
        Lower,
        Upper,
        Free,
    }
    let mut x = DVector::zeros(n);
    let mut status = vec![St::Lower; n];
    for j in 0..n {
        if lower[j].is_finite() {
            x[j] = lower[j];
            status[j] = St::Lower;
        } else if upper[j].is_finite() {
            x[j] = upper[j];
            status[j] = St::Upper;
        } else {
            x[j] = 0.0;
            status[j] = St::Free;
        }
    }
    let mut banned = vec![false; n];
    let mut iterations = 0usize;
    // Unbounded variables start free; settle them before the first
    // gradient check.
    if status.contains(&St::Free) {
        inner_descent(a, y, lower, upper, &mut x, &mut status, &mut banned, None);
    }

    loop {
        let g = gradient(a, y, &x);
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if status[j] == St::Free || banned[j] || lower[j] == upper[j] {
                continue;
            }
            let v = match status[j] {
                St::Lower => -g[j],
                St::Upper => g[j],
                St::Free => unreachable!(),
            };
            if v > tol && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        let Some((jstar, _)) = best else {
            let kkt = kkt_report(a, y, lower, upper, &x, opts.tol_rel);
            return Ok(BvlsSolution { x: x.clone(), objective: objective(a, y, &x), iterations, kkt });
        };
        if iterations >= max_iter {
            let kkt = kkt_report(a, y, lower, upper, &x, opts.tol_rel);
            let best = BvlsSolution { x: x.clone(), objective: objective(a, y, &x), iterations, kkt };
            return Err(BvlsError::IterationLimit { iterations, best: Box::new(best) });
        }
        iterations += 1;
        status[jstar] = St::Free;
        banned[jstar] = false;
        inner_descent(a, y, lower, upper, &mut x, &mut status, &mut banned, Some(jstar));
    }

    #[allow(clippy::too_many_arguments)]
    fn inner_descent(
        a: &DMatrix<f64>,
        y: &DVector<f64>,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
        x: &mut DVector<f64>,
        status: &mut [St],
        banned: &mut [bool],
        mut just_freed: Option<usize>,
    ) {
        let n = a.ncols();
        // Each pass either finishes or binds one variable, so n+1 passes
        // always suffice.
        for _ in 0..=n {
            let free: Vec<usize> = (0..n).filter(|&j| status[j] == St::Free).collect();
            if free.is_empty() {
                return;
            }
            let af = a.select_columns(free.iter());
            let mut xb = x.clone();
            for &j in &free {
                xb[j] = 0.0;
            }
            let rhs = y - a * xb;
            let z = lsq_min_norm(&af, &rhs);

            // Step toward z, cut at the first bound crossing. Ascending
            // index with a strict '<' keeps ties deterministic.
            let mut alpha = f64::INFINITY;
            let mut blocker: Option<(usize, St)> = None;
            for (fi, &j) in free.iter().enumerate() {
                let zj = z[fi];
                if zj < lower[j] {
                    let aj = if x[j] <= lower[j] { 0.0 } else { (x[j] - lower[j]) / (x[j] - zj) };
                    if aj < alpha {
                        alpha = aj;
                        blocker = Some((j, St::Lower));
                    }
                } else if zj > upper[j] {
                    let aj = if x[j] >= upper[j] { 0.0 } else { (upper[j] - x[j]) / (zj - x[j]) };
                    if aj < alpha {
                        alpha = aj;
                        blocker = Some((j, St::Upper));
                    }
                }
            }
            match blocker {
                None => {
                    for (fi, &j) in free.iter().enumerate() {
                        x[j] = z[fi];
                    }
                    banned.iter_mut().for_each(|b| *b = false);
                    return;
                }
                Some((k, side)) => {
                    for (fi, &j) in free.iter().enumerate() {
                        x[j] += alpha * (z[fi] - x[j]);
                        x[j] = x[j].clamp(lower[j], upper[j]);
                    }
                    if alpha > 0.0 {
                        banned.iter_mut().for_each(|b| *b = false);
                        just_freed = None;
                    }
                    x[k] = if side == St::Lower { lower[k] } else { upper[k] };
                    status[k] = side;
                    if just_freed == Some(k) {
                        banned[k] = true;
                    }
                }
            }
        }
        unreachable!("inner descent exceeded the free-variable count");
    }
}
