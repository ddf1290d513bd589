//! Symmetric eigendecomposition by cyclic Jacobi rotations.
//!
//! Matrices here are small (mixing matrices, task covariances), so the
//! quadratic-per-sweep cost is irrelevant and Jacobi's accuracy on
//! tiny eigenvalues is what matters.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const SYMMETRY_TOL: f64 = 1e-10;
const OFF_DIAG_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigenvalues sorted descending, with matching eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEig {
    /// `V · diag(f(λ)) · Vᵀ`
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let mapped: Vec<f64> = self.values.iter().map(|v| f(*v)).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for (k, lam) in mapped.iter().enumerate() {
                    s += self.vectors.get(i, k) * lam * self.vectors.get(j, k);
                }
                out.set(i, j, s);
                out.set(j, i, s);
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|v| v)
    }
}

fn off_diag_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j) * a.get(i, j);
            }
        }
    }
    s.sqrt()
}

pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    if !a.is_square() {
        return Err(Error::Validation(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::Numeric(
            "sym_eig input has non-finite entries".into(),
        ));
    }
    let scale = a.max_abs().max(1.0);
    if !a.is_symmetric(SYMMETRY_TOL * scale) {
        return Err(Error::Validation("sym_eig input is not symmetric".into()));
    }
    let n = a.rows();
    let mut m = a.symmetrize()?;
    let mut v = Matrix::identity(n);
    let threshold = OFF_DIAG_TOL * scale;

    let mut converged = off_diag_norm(&m) < threshold;
    let mut sweep = 0;
    while !converged && sweep < MAX_SWEEPS {
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    let new_kp = c * akp - s * akq;
                    let new_kq = s * akp + c * akq;
                    m.set(k, p, new_kp);
                    m.set(p, k, new_kp);
                    m.set(k, q, new_kq);
                    m.set(q, k, new_kq);
                }
                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        sweep += 1;
        converged = off_diag_norm(&m) < threshold;
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi iteration did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        // sign convention: largest-magnitude component positive
        let mut pivot = 0.0f64;
        for k in 0..n {
            let x = v.get(k, src);
            if x.abs() > pivot.abs() + 1e-14 {
                pivot = x;
            }
        }
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors.set(k, dst, sign * v.get(k, src));
        }
    }
    Ok(SymEig { values, vectors })
}

/// Inverse of `a + eps·I` for symmetric `a`, via its eigendecomposition.
pub fn regularized_inverse(a: &Matrix, eps: f64) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    let min = eig.values.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if min + eps <= 0.0 {
        return Err(Error::Numeric(format!(
            "matrix is singular after regularization (min eigenvalue {min})"
        )));
    }
    Ok(eig.reconstruct_with(|l| 1.0 / (l + eps)))
}
