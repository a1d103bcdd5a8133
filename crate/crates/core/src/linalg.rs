//! Small dense symmetric linear algebra.
//!
//! Sizes in this crate stay below a few dozen rows, so everything is dense and
//! symmetric matrices are stored in full.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Symmetry tolerance accepted by [`eig_sym`], relative to the largest entry.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Ascending.
    pub values: DVector<f64>,
    /// Column `i` pairs with `values[i]`.
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let q = &self.vectors;
        q * DMatrix::from_diagonal(&self.values) * q.transpose()
    }
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cyclic Jacobi eigen-decomposition.
///
/// Rotations are applied in a fixed sweep order, so the result is bitwise
/// reproducible for identical input.
pub fn eig_sym(m: &DMatrix<f64>) -> Result<SymEigen> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "eig_sym needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = max_abs(m);
    let asym = asymmetry(m);
    if asym > SYMMETRY_TOL * scale.max(1.0) {
        return Err(Error::Asymmetric(asym));
    }
    let n = m.nrows();
    let mut a = symmetrize(m);
    let mut v = DMatrix::<f64>::identity(n, n);
    if n == 0 {
        return Ok(SymEigen {
            values: DVector::zeros(0),
            vectors: v,
        });
    }

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        let diag: f64 = (0..n).map(|i| a[(i, i)] * a[(i, i)]).sum();
        if off == 0.0 || off.sqrt() <= f64::EPSILON * (diag + 2.0 * off).sqrt() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                if apq == 0.0 {
                    continue;
                }
                if apq.abs() < 1e-3 * f64::EPSILON * (app.abs().min(aqq.abs())) {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    Ok(SymEigen { values, vectors })
}

pub fn lambda_max(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eig_sym(m)?.max())
}

pub fn lambda_min(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eig_sym(m)?.min())
}

pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
}

/// Orthonormal basis (as columns) of the complement of `v`.
///
/// Built from a Householder reflector mapping `v/|v|` onto the first axis.
pub fn complement_basis(v: &DVector<f64>) -> DMatrix<f64> {
    let n = v.len();
    let norm = v.norm();
    assert!(norm > 0.0, "complement of the zero vector");
    let unit = v / norm;
    let mut u = unit.clone();
    // reflect onto -sign(u0) e1 to avoid cancellation
    let sign = if unit[0] >= 0.0 { 1.0 } else { -1.0 };
    u[0] += sign;
    let unorm2 = u.norm_squared();
    let h = DMatrix::<f64>::identity(n, n) - (&u * u.transpose()) * (2.0 / unorm2);
    h.columns(1, n - 1).into_owned()
}
