//! Dense complex linear algebra used by every evaluation: checked inversion
//! and bi-orthonormal eigen-decomposition.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub const C0: Complex64 = Complex64::new(0.0, 0.0);
pub const C1: Complex64 = Complex64::new(1.0, 0.0);
pub const J: Complex64 = Complex64::new(0.0, 1.0);

/// Default condition-number cap for inversions and eigenvector matrices.
pub const DEFAULT_COND_CAP: f64 = 1e12;

pub fn norm1(a: &CMat) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Inverse through LU with partial pivoting. Fails with `SingularAtS` (tagged
/// with `s`) when the 1-norm condition number exceeds `cap`.
pub fn inverse_checked(a: &CMat, s: Complex64, cap: f64) -> Result<CMat> {
    assert!(a.is_square(), "inverse of non-square matrix");
    if a.nrows() == 0 {
        return Ok(a.clone());
    }
    let lu = a.clone().lu();
    let inv = lu.try_inverse().ok_or(Error::SingularAtS { s, cond: f64::INFINITY })?;
    let cond = norm1(a) * norm1(&inv);
    if !cond.is_finite() || cond > cap {
        return Err(Error::SingularAtS { s, cond });
    }
    Ok(inv)
}

/// Solve `a x = b` with the same conditioning contract as [`inverse_checked`].
pub fn solve_checked(a: &CMat, b: &CMat, s: Complex64, cap: f64) -> Result<CMat> {
    let inv = inverse_checked(a, s, cap)?;
    Ok(inv * b)
}

/// Eigen-decomposition `A = R diag(Λ) T` with `T R = I`.
#[derive(Debug, Clone)]
pub struct EigLr {
    pub values: Vec<Complex64>,
    /// Right eigenvectors as columns, each of unit 2-norm.
    pub right: CMat,
    /// Left eigenvectors as rows, scaled so that `t_k r_k = 1`.
    pub left: CMat,
}

impl EigLr {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn right_vec(&self, k: usize) -> CVec {
        self.right.column(k).into_owned()
    }

    pub fn left_vec(&self, k: usize) -> CVec {
        self.left.row(k).transpose()
    }

    /// Participation matrix `r_k t_k` (outer product).
    pub fn participation(&self, k: usize) -> CMat {
        self.right.column(k) * self.left.row(k)
    }
}

pub fn eig_lr(a: &CMat) -> Result<EigLr> {
    eig_lr_with_cap(a, DEFAULT_COND_CAP)
}

pub fn eig_lr_with_cap(a: &CMat, cap: f64) -> Result<EigLr> {
    assert!(a.is_square(), "eig_lr requires a square matrix");
    let n = a.nrows();
    if n == 0 {
        return Ok(EigLr {
            values: vec![],
            right: CMat::zeros(0, 0),
            left: CMat::zeros(0, 0),
        });
    }
    let schur = Schur::try_new(a.clone(), 1e-15, 10_000).ok_or(Error::DefectiveMatrix { cond: f64::INFINITY })?;
    let (q, t) = schur.unpack();
    let values: Vec<Complex64> = (0..n).map(|i| t[(i, i)]).collect();

    let tnorm = max_abs(&t).max(f64::MIN_POSITIVE);
    let small = tnorm * f64::EPSILON;
    let mut v = CMat::zeros(n, n);
    for k in 0..n {
        let lambda = values[k];
        v[(k, k)] = C1;
        for j in (0..k).rev() {
            let mut acc = C0;
            for l in (j + 1)..=k {
                acc += t[(j, l)] * v[(l, k)];
            }
            let mut denom = t[(j, j)] - lambda;
            if denom.norm() < small {
                denom = Complex64::new(small, 0.0);
            }
            v[(j, k)] = -acc / denom;
        }
    }
    let mut right = q * v;
    for k in 0..n {
        let nrm = right.column(k).norm();
        if nrm > 0.0 {
            right.column_mut(k).unscale_mut(nrm);
        }
    }
    let inv = right
        .clone()
        .lu()
        .try_inverse()
        .ok_or(Error::DefectiveMatrix { cond: f64::INFINITY })?;
    let cond = norm1(&right) * norm1(&inv);
    if !cond.is_finite() || cond > cap {
        return Err(Error::DefectiveMatrix { cond });
    }
    Ok(EigLr {
        values,
        right,
        left: inv,
    })
}

/// Eigenvalues only (Schur diagonal).
pub fn eigenvalues(a: &CMat) -> Result<Vec<Complex64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(vec![]);
    }
    let schur = Schur::try_new(a.clone(), 1e-15, 10_000).ok_or(Error::DefectiveMatrix { cond: f64::INFINITY })?;
    let t = schur.unpack().1;
    Ok((0..n).map(|i| t[(i, i)]).collect())
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn diag(values: &[Complex64]) -> CMat {
    CMat::from_diagonal(&CVec::from_column_slice(values))
}

pub fn real_diag(values: &[f64]) -> CMat {
    diag(&values.iter().map(|&x| Complex64::new(x, 0.0)).collect::<Vec<_>>())
}

/// Build a complex matrix from real row-major entries.
pub fn from_real_rows(rows: usize, cols: usize, data: &[f64]) -> CMat {
    assert_eq!(data.len(), rows * cols);
    CMat::from_row_iterator(rows, cols, data.iter().map(|&x| Complex64::new(x, 0.0)))
}
