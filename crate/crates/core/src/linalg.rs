//! Small dense complex linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub const ONE: C64 = C64::new(1.0, 0.0);
pub const ZERO: C64 = C64::new(0.0, 0.0);

/// Eigenvalues above this (negative) threshold are clamped to zero when
/// taking square roots of matrices that are PSD in exact arithmetic.
pub const PSD_REPAIR_THRESHOLD: f64 = -1e-10;

pub fn trace(m: &CMatrix) -> C64 {
    m.diagonal().iter().sum()
}

/// `tr(A B)` without forming the product.
pub fn trace_of_product(a: &CMatrix, b: &CMatrix) -> C64 {
    let n = a.nrows();
    let mut acc = ZERO;
    for i in 0..n {
        for j in 0..n {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

pub fn max_asymmetry(m: &CMatrix) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

/// Fails unless `m` is Hermitian to `tol` relative to its largest entry.
pub fn ensure_hermitian(m: &CMatrix, tol: f64, context: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("{context}: matrix is not square")));
    }
    let scale = m.iter().fold(0.0_f64, |acc, z| acc.max(z.norm())).max(f64::MIN_POSITIVE);
    let asym = max_asymmetry(m);
    if asym > tol * scale {
        return Err(Error::NotHermitian { context: context.to_string(), asymmetry: asym });
    }
    Ok(())
}

/// Inverse of a Hermitian positive-definite matrix via Cholesky.
pub fn hpd_inverse(m: &CMatrix, context: &str) -> Result<CMatrix> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite(context.to_string()))?;
    // Complex Cholesky happily takes square roots of negative pivots, so the
    // factor's diagonal has to be checked explicitly.
    let diag_ok = chol.l_dirty().diagonal().iter().all(|d| d.re > 0.0 && d.im.abs() <= 1e-12 * d.re);
    if !diag_ok {
        return Err(Error::NotPositiveDefinite(context.to_string()));
    }
    Ok(chol.inverse())
}

/// Real eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Principal square root of a Hermitian PSD matrix. Eigenvalues in
/// `[threshold * scale, 0)` are clamped to zero; anything more negative is
/// reported as an error.
pub fn psd_sqrt(m: &CMatrix, context: &str) -> Result<CMatrix> {
    let n = m.nrows();
    if n == 0 {
        return Ok(m.clone());
    }
    let herm = (m + m.adjoint()) * C64::new(0.5, 0.0);
    let scale = herm.iter().fold(0.0_f64, |acc, z| acc.max(z.norm())).max(1.0);
    let eig = herm.symmetric_eigen();
    let mut out = CMatrix::zeros(n, n);
    for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < PSD_REPAIR_THRESHOLD * scale {
            return Err(Error::NotPsd { context: context.to_string(), eigenvalue: lam });
        }
        let s = lam.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(idx);
        out += (&v * v.adjoint()) * C64::new(s, 0.0);
    }
    Ok(out)
}

/// Real symmetric PSD square root (same clamping rule as [`psd_sqrt`]).
pub fn psd_sqrt_real(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(m.clone());
    }
    let sym = (m + m.transpose()) * 0.5;
    let scale = sym.iter().fold(0.0_f64, |acc, z| acc.max(z.abs())).max(f64::MIN_POSITIVE);
    let eig = sym.symmetric_eigen();
    let mut out = DMatrix::zeros(n, n);
    for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < PSD_REPAIR_THRESHOLD * scale.max(1.0) {
            return Err(Error::NotPsd { context: context.to_string(), eigenvalue: lam });
        }
        let s = lam.max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(idx);
        out += (&v * v.transpose()) * s;
    }
    Ok(out)
}

/// Frobenius-norm relative difference `||a - b|| / ||b||`.
pub fn frobenius_relative(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).norm() / b.norm()
}
