// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small dense helpers shared by the editors.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Cholesky factor of a symmetric positive-definite `d × d` system matrix,
/// used to solve `X · A = B` for `X` without forming `A⁻¹`.
#[derive(Clone)]
pub(crate) struct SpdSystem {
    factor: Cholesky<f64, Dyn>,
}

impl SpdSystem {
    pub(crate) fn new(a: DMatrix<f64>, what: &str) -> Result<Self> {
        let factor = Cholesky::new(a).ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))?;
        Ok(Self { factor })
    }

    /// Solves `X · A = B`. `A` is symmetric so this is `(A⁻¹ Bᵀ)ᵀ`.
    pub(crate) fn solve_right(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(&b.transpose()).transpose()
    }
}

/// Largest eigenvalue of `Δ Δᵀ`, computed from the `L × L` Gram matrix `Δᵀ Δ`
/// (both share their nonzero spectrum).
pub(crate) fn top_eigenvalue_outer(deltas: &DMatrix<f64>) -> f64 {
    let gram = deltas.transpose() * deltas;
    SymmetricEigen::new(gram)
        .eigenvalues
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

pub(crate) fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub(crate) fn check_positive(value: f64, what: &str) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{what} must be positive and finite, got {value}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solve_right_matches_explicit_inverse() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let x = SpdSystem::new(a.clone(), "a").unwrap().solve_right(&b);
        let expected = &b * a.try_inverse().unwrap();
        assert!((x - expected).norm() < 1e-14);
    }

    #[test]
    fn rejects_indefinite() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(SpdSystem::new(a, "a").is_err());
    }

    #[test]
    fn top_eigenvalue_of_rank_one() {
        let d = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 2.0]);
        assert!((top_eigenvalue_outer(&d) - 9.0).abs() < 1e-12);
    }
}
