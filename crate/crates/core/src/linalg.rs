//! Dense complex helpers shared by every module.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub const I: C64 = C64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Eigenvalues in ascending order with matching eigenvector columns.
pub fn hermitian_eigen(m: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    let n = m.nrows();
    if n == 0 {
        return Ok((Vec::new(), CMatrix::zeros(0, 0)));
    }
    if n == 1 {
        return Ok((vec![m[(0, 0)].re], CMatrix::identity(1, 1)));
    }
    let sym = (m + m.adjoint()) * c(0.5);
    let eig = SymmetricEigen::try_new(sym, 1e-15, 10_000)
        .ok_or_else(|| Error::EigenFailure(format!("no convergence for dimension {n}")))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigenFailure("non-finite eigenvalue".into()));
    }
    let mut vectors = CMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(k));
    }
    Ok((values, vectors))
}

pub fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

pub fn anticommutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b + b * a
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

/// Largest singular value.
pub fn operator_norm(m: &CMatrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

pub fn hermitian_norm(m: &CMatrix) -> Result<f64> {
    let (vals, _) = hermitian_eigen(m)?;
    Ok(vals.iter().fold(0.0, |acc, v| acc.max(v.abs())))
}

/// `V diag(f(λ)) V†` for a Hermitian matrix given its eigendata.
pub fn spectral_map(values: &[f64], vectors: &CMatrix, f: impl Fn(f64) -> C64) -> CMatrix {
    let mut scaled = vectors.clone();
    for (k, &v) in values.iter().enumerate() {
        let fk = f(v);
        for x in scaled.column_mut(k).iter_mut() {
            *x *= fk;
        }
    }
    scaled * vectors.adjoint()
}

/// `exp(-i h A)` for Hermitian `A`.
pub fn unitary_exp(a: &CMatrix, h: f64) -> Result<CMatrix> {
    let (vals, vecs) = hermitian_eigen(a)?;
    Ok(spectral_map(&vals, &vecs, |l| C64::from_polar(1.0, -h * l)))
}

/// Nearest unitary in Frobenius norm.
pub fn polar_unitary(u: &CMatrix) -> CMatrix {
    let svd = u.clone().svd(true, true);
    let (w, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    w * vt
}

/// ‖U†U − 1‖ in operator norm.
pub fn unitarity_defect(u: &CMatrix) -> f64 {
    let n = u.nrows();
    let d = u.adjoint() * u - CMatrix::identity(n, n);
    operator_norm(&d)
}

/// `diag(l) · M · diag(r)`.
pub fn scale_rows_cols(m: &CMatrix, left: &[C64], right: &[C64]) -> CMatrix {
    CMatrix::from_fn(m.nrows(), m.ncols(), |i, j| left[i] * m[(i, j)] * right[j])
}

/// Σ_ab X_ab Y_ba, i.e. Tr(XY) without forming the product.
pub fn trace_of_product(x: &CMatrix, y: &CMatrix) -> C64 {
    let n = x.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for b in 0..x.ncols() {
        for a in 0..n {
            acc += x[(a, b)] * y[(b, a)];
        }
    }
    acc
}

/// Σ_ab u_a M_ab conj(u_b).
pub fn phase_sandwich(m: &CMatrix, u: &[C64]) -> C64 {
    let n = m.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for b in 0..m.ncols() {
        let mut col = C64::new(0.0, 0.0);
        for a in 0..n {
            col += u[a] * m[(a, b)];
        }
        acc += col * u[b].conj();
    }
    acc
}

pub fn is_hermitian(m: &CMatrix, tol: f64) -> bool {
    max_abs(&(m - m.adjoint())) <= tol
}
