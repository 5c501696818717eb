//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative singular-value threshold used for every rank decision.
pub const RANK_RTOL: f64 = 1e-10;

pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    a.is_square() && max_asymmetry(a) <= tol * (1.0 + a.amax())
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(a).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).first().copied().unwrap_or(f64::NAN)
}

pub fn max_sym_eigenvalue(a: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(a).last().copied().unwrap_or(f64::NAN)
}

pub fn is_spd(a: &DMatrix<f64>) -> bool {
    is_symmetric(a, 1e-12) && a.nrows() > 0 && min_sym_eigenvalue(a) > 0.0
}

pub fn is_psd(a: &DMatrix<f64>) -> bool {
    let scale = a.amax().max(1.0);
    is_symmetric(a, 1e-12) && min_sym_eigenvalue(a) >= -1e-12 * scale
}

/// Symmetric square root through the eigendecomposition; negative
/// eigenvalues (round-off) are clamped to zero.
pub fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(a).symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

pub fn sym_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Stability("matrix is not positive definite".into()))
}

/// Numerical rank with singular values below `RANK_RTOL * sigma_max` treated as zero.
pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().singular_values();
    let smax = sv.max();
    if smax <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_RTOL * smax).count()
}

/// Largest real part among the eigenvalues.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 1 {
        return a[(0, 0)];
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `Tr[A^T A]`, the squared Frobenius norm.
pub fn frobenius_sq(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

pub fn trace(a: &DMatrix<f64>) -> f64 {
    a.diagonal().sum()
}

pub fn dvec(values: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(values)
}

pub fn scalar_matrix(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Solve `AᵀX + XA + Q = 0` through the Kronecker form
/// `(I⊗Aᵀ + Aᵀ⊗I) vec X = −vec Q`, with one step of iterative refinement.
pub fn lyapunov_kron(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = a.nrows();
    if !a.is_square() || q.shape() != (m, m) {
        return Err(Error::Dimension(format!("Lyapunov needs square A and matching Q, got {:?} and {:?}", a.shape(), q.shape())));
    }
    let at = a.transpose();
    let id = DMatrix::<f64>::identity(m, m);
    let op = id.kronecker(&at) + at.kronecker(&id);
    let lu = op.clone().lu();
    let rhs = DVector::from_column_slice((-q).as_slice());
    let mut x = lu.solve(&rhs).ok_or_else(|| Error::Stability("Lyapunov operator is singular".into()))?;
    let resid = &rhs - &op * &x;
    if let Some(dx) = lu.solve(&resid) {
        x += dx;
    }
    Ok(symmetrize(&DMatrix::from_column_slice(m, m, x.as_slice())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = sym_sqrt(&a);
        assert!((&s * &s - &a).amax() < 1e-12);
    }

    #[test]
    fn rank_of_rank_one() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(rank(&a), 1);
        assert_eq!(rank(&DMatrix::zeros(3, 3)), 0);
    }

    #[test]
    fn abscissa_of_rotation() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 5.0, -5.0, -1.0]);
        assert!((spectral_abscissa(&a) + 1.0).abs() < 1e-12);
    }
}
