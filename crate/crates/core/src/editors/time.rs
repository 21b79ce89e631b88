// SPDX-License-Identifier: MIT OR Apache-2.0

//! Source-to-target projection editing with a proximity regularizer.
//!
//! Minimizes `Σ ‖W cᵢ − vᵢ*‖² + λ ‖W − W_old‖²_F`, solved as
//! `W = (λ W_old + Σ vᵢ* cᵢᵀ)(λ I + Σ cᵢ cᵢᵀ)⁻¹`. An optional extra ridge `ε`
//! also pulls toward `W_old`, so it acts as `λ + ε`.

use nalgebra::DMatrix;

use super::linalg::{check_finite, check_positive, SpdSystem};
use super::{EditPair, EditResult};
use crate::error::{Error, Result};

pub(crate) fn validate_pairs(w_old: &DMatrix<f64>, pairs: &[EditPair], what: &str) -> Result<()> {
    let (m, d) = w_old.shape();
    for (i, p) in pairs.iter().enumerate() {
        if p.input.len() != d || p.target.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "{what} pair {i}: input has {} entries (d = {d}), target has {} (m = {m})",
                p.input.len(),
                p.target.len()
            )));
        }
        if p.input.iter().chain(p.target.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} pair {i}")));
        }
    }
    Ok(())
}

/// `Σ ‖W cᵢ − vᵢ*‖² + (λ + ε) ‖W − W_old‖²_F`.
pub fn time_objective(w: &DMatrix<f64>, w_old: &DMatrix<f64>, pairs: &[EditPair], lambda: f64) -> f64 {
    let fit: f64 = pairs.iter().map(|p| (w * &p.input - &p.target).norm_squared()).sum();
    fit + lambda * (w - w_old).norm_squared()
}

pub fn time_gradient(w: &DMatrix<f64>, w_old: &DMatrix<f64>, pairs: &[EditPair], lambda: f64) -> DMatrix<f64> {
    let mut g = (w - w_old) * lambda;
    for p in pairs {
        g += (w * &p.input - &p.target) * p.input.transpose();
    }
    g * 2.0
}

/// Closed-form edit. `ridge` defaults to none.
pub fn time_edit(w_old: &DMatrix<f64>, pairs: &[EditPair], lambda: f64, ridge: Option<f64>) -> Result<EditResult> {
    check_positive(lambda, "lambda")?;
    if pairs.is_empty() {
        return Err(Error::Empty("no edit pairs".into()));
    }
    check_finite(w_old, "W_old")?;
    validate_pairs(w_old, pairs, "edit")?;
    let eps = match ridge {
        Some(e) if !(e.is_finite() && e >= 0.0) => {
            return Err(Error::InvalidArgument(format!("ridge must be non-negative, got {e}")))
        }
        Some(e) => e,
        None => 0.0,
    };
    let reg = lambda + eps;
    let d = w_old.ncols();
    let mut normal = DMatrix::<f64>::identity(d, d) * reg;
    let mut rhs = w_old * reg;
    for p in pairs {
        normal += &p.input * p.input.transpose();
        rhs += &p.target * p.input.transpose();
    }
    let w = SpdSystem::new(normal, "λ I + Σ c cᵀ")?.solve_right(&rhs);
    Ok(EditResult {
        objective_value: time_objective(&w, w_old, pairs, reg),
        gradient_norm: time_gradient(&w, w_old, pairs, reg).norm(),
        delta_response_norm: 0.0,
        steps_taken: 0,
        ridge_epsilon: eps,
        w_star: w,
    })
}
