// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edit-plus-preserve projection editing.
//!
//! Minimizes `Σ_E ‖W cᵢ − vᵢ*‖² + Σ_P ‖W cⱼ − W_old cⱼ‖² + ε ‖W − W_old‖²_F`:
//!
//! `W = (Σ_E vᵢ* cᵢᵀ + Σ_P W_old cⱼ cⱼᵀ + ε W_old)(Σ_E cᵢ cᵢᵀ + Σ_P cⱼ cⱼᵀ + ε I)⁻¹`
//!
//! The ridge pulls toward `W_old`, so directions that neither set constrains
//! keep their original response.

use nalgebra::{DMatrix, DVector};

use super::linalg::{check_finite, SpdSystem};
use super::time::validate_pairs;
use super::{EditPair, EditResult};
use crate::error::{Error, Result};

/// Scale of the automatic ridge relative to `trace(N) / d`.
pub const AUTO_RIDGE_SCALE: f64 = 1e-6;

/// How to pick `ε`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Ridge {
    /// `1e-6 · trace(N) / d` where `N` is the unregularized normal matrix.
    #[default]
    Auto,
    Fixed(f64),
}

pub fn uce_objective(
    w: &DMatrix<f64>,
    w_old: &DMatrix<f64>,
    edits: &[EditPair],
    preserve: &[DVector<f64>],
    epsilon: f64,
) -> f64 {
    let fit: f64 = edits.iter().map(|p| (w * &p.input - &p.target).norm_squared()).sum();
    let keep: f64 = preserve.iter().map(|c| ((w - w_old) * c).norm_squared()).sum();
    fit + keep + epsilon * (w - w_old).norm_squared()
}

pub fn uce_gradient(
    w: &DMatrix<f64>,
    w_old: &DMatrix<f64>,
    edits: &[EditPair],
    preserve: &[DVector<f64>],
    epsilon: f64,
) -> DMatrix<f64> {
    let diff = w - w_old;
    let mut g = &diff * epsilon;
    for p in edits {
        g += (w * &p.input - &p.target) * p.input.transpose();
    }
    for c in preserve {
        g += (&diff * c) * c.transpose();
    }
    g * 2.0
}

pub fn uce_edit(
    w_old: &DMatrix<f64>,
    edits: &[EditPair],
    preserve: &[DVector<f64>],
    ridge: Ridge,
) -> Result<EditResult> {
    if edits.is_empty() && preserve.is_empty() {
        return Err(Error::Empty("both the edit and preservation sets are empty".into()));
    }
    check_finite(w_old, "W_old")?;
    validate_pairs(w_old, edits, "edit")?;
    let d = w_old.ncols();
    for (j, c) in preserve.iter().enumerate() {
        if c.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "preserved concept {j} has {} entries, expected d = {d}",
                c.len()
            )));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("preserved concept {j}")));
        }
    }

    let mut normal = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DMatrix::<f64>::zeros(w_old.nrows(), d);
    for p in edits {
        normal += &p.input * p.input.transpose();
        rhs += &p.target * p.input.transpose();
    }
    for c in preserve {
        let cc = c * c.transpose();
        rhs += w_old * &cc;
        normal += cc;
    }
    let epsilon = match ridge {
        Ridge::Auto => AUTO_RIDGE_SCALE * normal.trace() / d as f64,
        Ridge::Fixed(e) if e.is_finite() && e >= 0.0 => e,
        Ridge::Fixed(e) => return Err(Error::InvalidArgument(format!("ridge must be non-negative, got {e}"))),
    };
    normal += DMatrix::<f64>::identity(d, d) * epsilon;
    rhs += w_old * epsilon;
    let system = SpdSystem::new(normal, "Σ c cᵀ + ε I").map_err(|_| {
        Error::Singular(format!(
            "normal matrix is singular with ε = {epsilon:e}; the concepts do not span R^{d}"
        ))
    })?;
    let w = system.solve_right(&rhs);
    Ok(EditResult {
        objective_value: uce_objective(&w, w_old, edits, preserve, epsilon),
        gradient_norm: uce_gradient(&w, w_old, edits, preserve, epsilon).norm(),
        delta_response_norm: 0.0,
        steps_taken: 0,
        ridge_epsilon: epsilon,
        w_star: w,
    })
}
