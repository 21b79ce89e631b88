// SPDX-License-Identifier: MIT OR Apache-2.0

//! EOS-delta editing of a projection matrix.
//!
//! Minimizes `‖W Δ‖²_F + λ ‖W − W_old‖²_F` over `W`, where the columns of
//! `Δ` are EOS deltas. The problem separates per row and has the unique
//! minimizer `W* = λ W_old (Δ Δᵀ + λ I)⁻¹`. Any `c` with `Δᵀ c = 0` is an
//! eigenvector of `Δ Δᵀ + λ I` with eigenvalue `λ`, so `W* c = W_old c`.

use nalgebra::DMatrix;

use super::linalg::{check_finite, check_positive, top_eigenvalue_outer, SpdSystem};
use super::{EditConfig, EditResult};
use crate::error::{Error, Result};

/// Consecutive objective increases treated as divergence.
const DIVERGENCE_STREAK: usize = 5;

/// `‖W Δ‖²_F + λ ‖W − W_old‖²_F`.
pub fn mist_objective(w: &DMatrix<f64>, w_old: &DMatrix<f64>, deltas: &DMatrix<f64>, lambda: f64) -> f64 {
    (w * deltas).norm_squared() + lambda * (w - w_old).norm_squared()
}

/// `2 (W Δ Δᵀ + λ (W − W_old))`.
pub fn mist_gradient_at(w: &DMatrix<f64>, w_old: &DMatrix<f64>, deltas: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    2.0 * half_gradient(w, w_old, deltas, lambda)
}

fn half_gradient(w: &DMatrix<f64>, w_old: &DMatrix<f64>, deltas: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    (w * deltas) * deltas.transpose() + (w - w_old) * lambda
}

fn validate(w_old: &DMatrix<f64>, deltas: &DMatrix<f64>, lambda: f64) -> Result<()> {
    check_positive(lambda, "lambda")?;
    if w_old.nrows() == 0 || w_old.ncols() == 0 {
        return Err(Error::DimensionMismatch("W_old is empty".into()));
    }
    if deltas.nrows() != w_old.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "W_old is {}×{} but deltas have d = {}",
            w_old.nrows(),
            w_old.ncols(),
            deltas.nrows()
        )));
    }
    if deltas.ncols() == 0 {
        return Err(Error::Empty("delta matrix has no columns".into()));
    }
    check_finite(w_old, "W_old")?;
    check_finite(deltas, "deltas")
}

fn result(w: DMatrix<f64>, w_old: &DMatrix<f64>, deltas: &DMatrix<f64>, lambda: f64, steps: usize) -> EditResult {
    let objective_value = mist_objective(&w, w_old, deltas, lambda);
    let gradient_norm = mist_gradient_at(&w, w_old, deltas, lambda).norm();
    let delta_response_norm = (&w * deltas).norm();
    EditResult {
        w_star: w,
        objective_value,
        steps_taken: steps,
        delta_response_norm,
        gradient_norm,
        ridge_epsilon: 0.0,
    }
}

/// Factored system `Δ Δᵀ + λ I`, reusable across every matrix edited with
/// the same deltas.
#[derive(Clone)]
pub struct MistSystem {
    deltas: DMatrix<f64>,
    lambda: f64,
    system: Option<SpdSystem>,
}

impl MistSystem {
    pub fn new(deltas: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        check_positive(lambda, "lambda")?;
        if deltas.ncols() == 0 || deltas.nrows() == 0 {
            return Err(Error::Empty("delta matrix is empty".into()));
        }
        check_finite(deltas, "deltas")?;
        let system = if deltas.iter().all(|v| *v == 0.0) {
            None
        } else {
            let d = deltas.nrows();
            let a = deltas * deltas.transpose() + DMatrix::<f64>::identity(d, d) * lambda;
            Some(SpdSystem::new(a, "Δ Δᵀ + λ I")?)
        };
        Ok(Self {
            deltas: deltas.clone(),
            lambda,
            system,
        })
    }

    pub fn solve(&self, w_old: &DMatrix<f64>) -> Result<EditResult> {
        validate(w_old, &self.deltas, self.lambda)?;
        let w = match &self.system {
            // Zero deltas: W_old already attains objective 0.
            None => w_old.clone(),
            Some(system) => system.solve_right(&(w_old * self.lambda)),
        };
        Ok(result(w, w_old, &self.deltas, self.lambda, 0))
    }
}

/// Closed-form minimizer via a Cholesky solve of `Δ Δᵀ + λ I`.
pub fn mist_closed_form(w_old: &DMatrix<f64>, deltas: &DMatrix<f64>, lambda: f64) -> Result<EditResult> {
    validate(w_old, deltas, lambda)?;
    MistSystem::new(deltas, lambda)?.solve(w_old)
}

/// Learning rate at which the stiffest mode reaches its fixed point in one
/// step: `1 / λ_max(Δ Δᵀ + λ I)`. Below this every mode decays
/// monotonically.
pub fn stable_learning_rate(deltas: &DMatrix<f64>, lambda: f64) -> f64 {
    1.0 / (top_eigenvalue_outer(deltas) + lambda)
}

/// Steps above `2 / λ_max(Δ Δᵀ + λ I)` diverge.
pub fn max_learning_rate(deltas: &DMatrix<f64>, lambda: f64) -> f64 {
    2.0 * stable_learning_rate(deltas, lambda)
}

/// Fixed-step full-batch gradient descent on the edit objective, started at
/// `W_old`.
///
/// A step moves `W` by `learning_rate · (W Δ Δᵀ + λ (W − W_old))`, i.e. the
/// gradient of half the objective, so the step is stable exactly when
/// `learning_rate < 2 / λ_max(Δ Δᵀ + λ I)`.
#[derive(Debug, Clone)]
pub struct MistDescent {
    w: DMatrix<f64>,
    w_old: DMatrix<f64>,
    deltas: DMatrix<f64>,
    lambda: f64,
    learning_rate: f64,
    objective: f64,
    rising: usize,
    steps: usize,
}

impl MistDescent {
    pub fn new(w_old: &DMatrix<f64>, deltas: &DMatrix<f64>, lambda: f64, learning_rate: f64) -> Result<Self> {
        validate(w_old, deltas, lambda)?;
        check_positive(learning_rate, "learning_rate")?;
        Ok(Self {
            w: w_old.clone(),
            w_old: w_old.clone(),
            deltas: deltas.clone(),
            lambda,
            learning_rate,
            objective: 0.0,
            rising: 0,
            steps: 0,
        }
        .with_objective())
    }

    fn with_objective(mut self) -> Self {
        self.objective = mist_objective(&self.w, &self.w_old, &self.deltas, self.lambda);
        self
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn into_weights(self) -> DMatrix<f64> {
        self.w
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `‖W Δ‖_F`.
    pub fn response_norm(&self) -> f64 {
        (&self.w * &self.deltas).norm()
    }

    pub fn gradient_norm(&self) -> f64 {
        mist_gradient_at(&self.w, &self.w_old, &self.deltas, self.lambda).norm()
    }

    /// Divergence threshold for this problem; see [`max_learning_rate`].
    pub fn max_learning_rate(&self) -> f64 {
        max_learning_rate(&self.deltas, self.lambda)
    }

    /// Takes one step. Errors once the objective has risen
    /// [`DIVERGENCE_STREAK`] times in a row or left the finite range.
    pub fn step(&mut self) -> Result<()> {
        let g = half_gradient(&self.w, &self.w_old, &self.deltas, self.lambda);
        self.w -= g * self.learning_rate;
        self.steps += 1;
        let objective = mist_objective(&self.w, &self.w_old, &self.deltas, self.lambda);
        if objective > self.objective || !objective.is_finite() {
            self.rising += 1;
        } else {
            self.rising = 0;
        }
        self.objective = objective;
        if self.rising >= DIVERGENCE_STREAK || !objective.is_finite() {
            return Err(Error::Divergence {
                steps: self.steps,
                consecutive: self.rising,
                suggested: max_learning_rate(&self.deltas, self.lambda),
            });
        }
        Ok(())
    }

    /// Steps until `‖∇‖_F ≤ tolerance` or `max_steps` steps have been taken
    /// in this call. Returns the number of steps taken.
    pub fn run(&mut self, max_steps: usize, tolerance: f64) -> Result<usize> {
        for taken in 0..max_steps {
            if self.gradient_norm() <= tolerance {
                return Ok(taken);
            }
            self.step()?;
        }
        Ok(max_steps)
    }

    pub fn result(&self) -> EditResult {
        result(self.w.clone(), &self.w_old, &self.deltas, self.lambda, self.steps)
    }
}

/// Gradient-descent solve of the edit objective using
/// `config.learning_rate`, `config.max_steps` and `config.grad_tolerance`.
pub fn mist_gradient(w_old: &DMatrix<f64>, deltas: &DMatrix<f64>, config: &EditConfig) -> Result<EditResult> {
    config.validate()?;
    let mut descent = MistDescent::new(w_old, deltas, config.lambda, config.learning_rate)?;
    descent.run(config.max_steps, config.grad_tolerance)?;
    Ok(descent.result())
}
