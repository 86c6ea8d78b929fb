//! Small dense symmetric-matrix helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
const SYMMETRY_TOL: f64 = 1e-10;

pub fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotPositive {
            kind: "symmetric",
            detail: format!("max |A - A^T| = {asym:e}"),
        });
    }
    Ok(())
}

/// Eigendecomposition of the symmetrized input.
pub fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

/// Rejects matrices with an eigenvalue below `-tol * scale`.
pub fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    check_symmetric(m)?;
    let eig = sym_eigen(m);
    let scale = m.amax().max(1.0);
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(Error::NotPositive {
            kind: "positive semidefinite",
            detail: format!("smallest eigenvalue {min:e}"),
        });
    }
    Ok(())
}

pub fn check_pd(m: &DMatrix<f64>) -> Result<()> {
    check_symmetric(m)?;
    let eig = sym_eigen(m);
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        return Err(Error::NotPositive {
            kind: "positive definite",
            detail: format!("smallest eigenvalue {min:e}"),
        });
    }
    Ok(())
}

/// `f(A)` for symmetric `A`, applying `f` to eigenvalues clamped at zero.
pub fn sym_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = sym_eigen(m);
    let vals = eig.eigenvalues.map(|v| f(v.max(0.0)));
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&vals) * q.transpose()
}

/// Principal square root of a PSD matrix (negative eigenvalues clamped to 0).
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(m, f64::sqrt)
}

/// Inverse of a symmetric positive-definite matrix.
pub fn inv_pd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| Error::NotPositive {
        kind: "positive definite",
        detail: "Cholesky factorization failed".into(),
    })
}

pub fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    a * b.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = sqrt_psd(&m);
        assert!((&r * &r - &m).amax() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(check_symmetric(&m).is_err());
    }

    #[test]
    fn singular_is_psd_not_pd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(check_psd(&m).is_ok());
        assert!(check_pd(&m).is_err());
    }
}
