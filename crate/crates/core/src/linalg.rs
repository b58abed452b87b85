//! Dense solves used by the fitters.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves A x = b for symmetric positive (semi)definite A, falling back to LU.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    a.clone()
        .lu()
        .solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::RankDeficient(format!("{}x{} system is singular", a.nrows(), a.ncols())))
}

pub fn inverse_spd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        let inv = ch.inverse();
        if inv.iter().all(|v| v.is_finite()) {
            return Ok(inv);
        }
    }
    inverse(a)
}

pub fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::RankDeficient(format!("{}x{} matrix is singular", a.nrows(), a.ncols())))
}

/// (M + Mᵀ)/2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_solve_and_inverse() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = solve_spd(&a, &b).unwrap();
        assert!((&a * x - b).amax() < 1e-14);
        let inv = inverse_spd(&a).unwrap();
        assert!((&a * inv - DMatrix::identity(2, 2)).amax() < 1e-14);
    }

    #[test]
    fn indefinite_falls_back() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let x = solve_spd(&a, &DVector::from_vec(vec![2.0, 3.0])).unwrap();
        assert_eq!(x.as_slice(), &[3.0, 2.0]);
    }

    #[test]
    fn singular_is_an_error() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(inverse(&a).is_err());
        assert!(solve_spd(&a, &DVector::from_vec(vec![1.0, 0.0])).is_err());
    }
}
