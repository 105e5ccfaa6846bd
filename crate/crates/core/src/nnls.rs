//! Lawson-Hanson active-set non-negative least squares.
//!
//! Columns are scaled to unit norm before solving and the solution is mapped
//! back afterwards. Each passive-set subproblem is solved by Householder QR,
//! with an SVD fallback when the passive columns are rank deficient.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
}

/// Minimizes `‖a·x − b‖₂` subject to `x ≥ 0`.
///
/// Converged when every inactive gradient component is at most
/// `tol · ‖a‖_F · ‖b‖` in the column-scaled system. The entering index is the
/// largest gradient component, lowest index on exact ties. Outer iterations are
/// capped at `3·n`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Result<NnlsSolution> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(Error::Shape(format!(
            "matrix has {m} rows but right-hand side has {}",
            b.len()
        )));
    }
    if !(tol >= 0.0) {
        return Err(Error::Value(format!("tolerance must be non-negative, got {tol}")));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Value("system contains non-finite values".into()));
    }
    if n == 0 {
        return Ok(NnlsSolution { x: DVector::zeros(0), iterations: 0 });
    }

    let norms: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    if let Some(j) = norms.iter().position(|&s| s == 0.0) {
        return Err(Error::Coverage(format!("column {j} is identically zero")));
    }
    let mut scaled = a.clone();
    for (j, &s) in norms.iter().enumerate() {
        scaled.column_mut(j).unscale_mut(s);
    }
    let threshold = tol * scaled.norm() * b.norm();

    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let cap = 3 * n;
    let mut iterations = 0;
    // Index that just entered and was immediately rejected; it may not re-enter
    // until some other index has changed the residual.
    let mut blocked: Option<usize> = None;

    loop {
        let w = scaled.tr_mul(&(b - &scaled * &x));
        let entering = (0..n)
            .filter(|&j| !passive[j] && Some(j) != blocked && w[j] > threshold)
            .fold(None::<usize>, |best, j| match best {
                Some(k) if w[k] >= w[j] => Some(k),
                _ => Some(j),
            });
        let Some(j) = entering else { break };
        if iterations == cap {
            let best = unscale(&x, &norms);
            let residual_norm = (a * &best - b).norm();
            return Err(Error::Solver {
                iterations,
                residual_norm,
                best_iterate: best.iter().copied().collect(),
            });
        }
        iterations += 1;
        passive[j] = true;

        let mut z = passive_solve(&scaled, b, &passive);
        if z[j] <= 0.0 {
            passive[j] = false;
            blocked = Some(j);
            continue;
        }
        blocked = None;
        while let Some((alpha, leaving)) = step_length(&x, &z, &passive) {
            for k in 0..n {
                if passive[k] {
                    x[k] += alpha * (z[k] - x[k]);
                }
            }
            x[leaving] = 0.0;
            passive[leaving] = false;
            for k in 0..n {
                if passive[k] && x[k] <= f64::EPSILON * x.amax() {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
            z = passive_solve(&scaled, b, &passive);
        }
        for k in 0..n {
            x[k] = if passive[k] { z[k] } else { 0.0 };
        }
    }
    Ok(NnlsSolution { x: unscale(&x, &norms), iterations })
}

/// Largest step from `x` toward `z` that keeps passive entries non-negative
/// and the index that hits zero first, or `None` when `z` is already feasible.
fn step_length(x: &DVector<f64>, z: &DVector<f64>, passive: &[bool]) -> Option<(f64, usize)> {
    passive
        .iter()
        .enumerate()
        .filter(|&(k, &p)| p && z[k] <= 0.0)
        .map(|(k, _)| (x[k] / (x[k] - z[k]), k))
        .fold(None, |acc: Option<(f64, usize)>, cand| match acc {
            Some(best) if best.0 <= cand.0 => Some(best),
            _ => Some(cand),
        })
}

fn unscale(x: &DVector<f64>, norms: &[f64]) -> DVector<f64> {
    DVector::from_iterator(x.len(), x.iter().zip(norms).map(|(v, s)| v / s))
}

/// Unconstrained least squares on the passive columns, zero elsewhere.
fn passive_solve(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..passive.len()).filter(|&k| passive[k]).collect();
    let mut full = DVector::zeros(passive.len());
    if cols.is_empty() {
        return full;
    }
    let sub = a.select_columns(&cols);
    let sol = least_squares(&sub, b);
    for (i, &k) in cols.iter().enumerate() {
        full[k] = sol[i];
    }
    full
}

/// Dense least-squares solve: QR when the system is tall and well ranked, SVD
/// otherwise.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (m, n) = a.shape();
    if m >= n {
        let qr = a.clone().qr();
        let r = qr.r();
        let diag_max = r.diagonal().amax();
        let rank_ok = r
            .diagonal()
            .iter()
            .all(|d| d.abs() > diag_max * n as f64 * f64::EPSILON);
        if rank_ok {
            let qtb = qr.q().tr_mul(b);
            if let Some(sol) = r.solve_upper_triangular(&qtb) {
                return sol;
            }
        }
    }
    let svd = a.clone().svd(true, true);
    let eps = svd.singular_values.amax() * m.max(n) as f64 * f64::EPSILON;
    svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(n))
}
