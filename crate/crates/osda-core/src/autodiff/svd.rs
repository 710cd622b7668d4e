//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! Sized for the `[batch, classes]` probability matrices fed to the nuclear
//! norm: a handful of columns, a few dozen rows.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

/// Off-diagonal tolerance relative to the column norms.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// `A = U diag(sigma) V^T` with `k = min(rows, cols)` singular triplets.
///
/// `u` is `rows x k`, `v` is `cols x k`, both row-major. Singular values are
/// sorted in decreasing order. Left vectors belonging to zero singular values
/// are left as zero columns.
#[derive(Debug, Clone)]
pub struct Svd {
    pub rows: usize,
    pub cols: usize,
    pub sigma: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U V^T` restricted to the numerically nonzero singular values; the
    /// subgradient of the nuclear norm.
    pub fn polar_factor(&self) -> Vec<f64> {
        let k = self.rank();
        let smax = self.sigma.first().copied().unwrap_or(0.0);
        let cutoff = smax * 1e-12 * (self.rows.max(self.cols) as f64);
        let mut out = vec![0.0; self.rows * self.cols];
        for j in 0..k {
            if self.sigma[j] <= cutoff || self.sigma[j] == 0.0 {
                continue;
            }
            for r in 0..self.rows {
                let ur = self.u[r * k + j];
                if ur == 0.0 {
                    continue;
                }
                for c in 0..self.cols {
                    out[r * self.cols + c] += ur * self.v[c * k + j];
                }
            }
        }
        out
    }
}

/// Decompose a row-major `rows x cols` matrix.
pub fn svd(data: &[f64], rows: usize, cols: usize) -> Result<Svd> {
    debug_assert_eq!(data.len(), rows * cols);
    if rows >= cols {
        jacobi(data, rows, cols)
    } else {
        // Work on the tall transpose and swap the factors back.
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = data[r * cols + c];
            }
        }
        let s = jacobi(&t, cols, rows)?;
        Ok(Svd { rows, cols, sigma: s.sigma, u: s.v, v: s.u })
    }
}

pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    Ok(svd(data, rows, cols)?.sigma)
}

// rows >= cols
fn jacobi(data: &[f64], rows: usize, cols: usize) -> Result<Svd> {
    let n = cols;
    // Column-major working copies keep each rotation contiguous.
    let mut w: Vec<Vec<f64>> = (0..n).map(|c| (0..rows).map(|r| data[r * cols + c]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (wp, wq) = (&w[p], &w[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for i in 0..rows {
                        a += wp[i] * wp[i];
                        b += wq[i] * wq[i];
                        g += wp[i] * wq[i];
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = libm::copysign(1.0, zeta) / (zeta.abs() + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps: JACOBI_MAX_SWEEPS });
    }

    let norms: Vec<f64> = w.iter().map(|col| libm::sqrt(col.iter().map(|x| x * x).sum())).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let k = n;
    let mut sigma = Vec::with_capacity(k);
    let mut u = vec![0.0; rows * k];
    let mut vm = vec![0.0; n * k];
    for (j, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        if s > 0.0 {
            for r in 0..rows {
                u[r * k + j] = w[src][r] / s;
            }
        }
        for r in 0..n {
            vm[r * k + j] = v[src][r];
        }
    }
    Ok(Svd { rows, cols, sigma, u, v: vm })
}

fn rotate(m: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = m.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}
