//! One-sided (Hestenes) Jacobi SVD for small dense matrices.
//!
//! Columns of a working copy are rotated pairwise until every pair is
//! orthogonal to within [`CONVERGENCE_TOL`] in cosine. The column norms are
//! then the singular values. Matrices with more columns than rows are handled
//! through the transpose.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAX_SWEEPS: usize = 100;
pub const CONVERGENCE_TOL: f64 = 1e-12;

/// Thin SVD `m = u · diag(s) · vt` with `p = min(rows, cols)` singular values.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `rows x p`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative.
    pub s: Vec<f64>,
    /// `p x cols`, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.s.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        crate::linalg::matmul(&us, &self.vt).expect("shapes agree by construction")
    }

    /// Number of singular values strictly above `tol`.
    pub fn rank(&self, tol: f64) -> usize {
        self.s.iter().filter(|&&s| s > tol).count()
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.is_empty() {
        return Err(Error::invalid("svd of an empty matrix"));
    }
    if !m.is_finite() {
        return Err(Error::invalid("svd input has non-finite entries"));
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose())?;
        Ok(SvdResult {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (x, y) = (&mut lo[p], &mut hi[0]);
    for (xi, yi) in x.iter_mut().zip(y.iter_mut()) {
        let (a, b) = (*xi, *yi);
        *xi = c * a - s * b;
        *yi = s * a + c * b;
    }
}

fn jacobi_tall(m: &Matrix) -> Result<SvdResult> {
    let (rows, n) = m.shape();
    // column-major working copies
    let mut work: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&work[p], &work[p]);
                let beta = dot(&work[q], &work[q]);
                let gamma = dot(&work[p], &work[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= CONVERGENCE_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NumericalFailure { sweeps: MAX_SWEEPS });
    }

    let mut order: Vec<(f64, usize)> = work
        .iter()
        .enumerate()
        .map(|(j, c)| (dot(c, c).sqrt(), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &(sigma, j)) in order.iter().enumerate() {
        s.push(sigma);
        if sigma > 0.0 {
            u_cols.push(work[j].iter().map(|x| x / sigma).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            missing.push(slot);
        }
    }
    complete_basis(&mut u_cols, &missing);

    let mut u = Matrix::zeros(rows, n);
    for (j, col) in u_cols.iter().enumerate() {
        for i in 0..rows {
            u[(i, j)] = col[i];
        }
    }
    let mut vt = Matrix::zeros(n, n);
    for (slot, &(_, j)) in order.iter().enumerate() {
        vt.row_mut(slot).copy_from_slice(&v[j]);
    }
    Ok(SvdResult { u, s, vt })
}

/// Fills the zero-norm slots with unit vectors orthogonal to every other column.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let rows = cols[0].len();
    let mut candidate = 0;
    for &slot in missing {
        loop {
            let mut e = vec![0.0; rows];
            e[candidate % rows] = 1.0;
            candidate += 1;
            // two Gram-Schmidt passes against all filled columns
            for _ in 0..2 {
                for (j, col) in cols.iter().enumerate() {
                    if j == slot || col.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let d = dot(&e, col);
                    for (ei, ci) in e.iter_mut().zip(col) {
                        *ei -= d * ci;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-6 {
                cols[slot] = e.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}
