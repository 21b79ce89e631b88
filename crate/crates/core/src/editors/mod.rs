// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight editors for cross-attention key/value projections.
//!
//! - [`mist`]: EOS-delta editing, closed form and gradient descent.
//! - [`time`]: source-to-target editing with a proximity regularizer.
//! - [`uce`]: edit-plus-preserve editing.
//! - [`attention`]: a toy cross-attention forward used to observe edits.
//!
//! Solvers work in `f64`; checkpoint layers are `f32` and are widened on the
//! way in and rounded on the way out.

pub mod attention;
pub(crate) mod linalg;
pub mod mist;
pub mod time;
pub mod uce;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::DeltaSet;
use crate::error::{Error, Result};
use crate::tensor_store::ProjectionLayer;

pub use attention::{toy_cross_attention, AttentionOutput};
pub use mist::{
    max_learning_rate, mist_closed_form, mist_gradient, mist_gradient_at, mist_objective, stable_learning_rate,
    MistDescent, MistSystem,
};
pub use time::{time_edit, time_gradient, time_objective};
pub use uce::{uce_edit, uce_gradient, uce_objective, Ridge};

/// Learning rate used for gradient editing unless overridden.
pub const DEFAULT_LEARNING_RATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    ClosedForm,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub solver: Solver,
    pub grad_tolerance: f64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            learning_rate: DEFAULT_LEARNING_RATE,
            max_steps: 10_000,
            solver: Solver::ClosedForm,
            grad_tolerance: 1e-6,
        }
    }
}

impl EditConfig {
    /// Defaults with `λ = 1 / L`.
    pub fn for_deltas(deltas: &DeltaSet) -> Self {
        Self {
            lambda: deltas.default_lambda(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        linalg::check_positive(self.lambda, "lambda")?;
        linalg::check_positive(self.learning_rate, "learning_rate")?;
        linalg::check_positive(self.grad_tolerance, "grad_tolerance")?;
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub w_star: DMatrix<f64>,
    pub objective_value: f64,
    pub steps_taken: usize,
    /// `‖W* Δ‖_F` for delta edits, 0 otherwise.
    pub delta_response_norm: f64,
    /// Frobenius norm of the objective gradient at `w_star`.
    pub gradient_norm: f64,
    /// Ridge added to the normal matrix (0 when none).
    pub ridge_epsilon: f64,
}

/// An input embedding and the output the edited projection should map it to.
#[derive(Debug, Clone, PartialEq)]
pub struct EditPair {
    pub input: DVector<f64>,
    pub target: DVector<f64>,
}

impl EditPair {
    pub fn new(input: DVector<f64>, target: DVector<f64>) -> Self {
        Self { input, target }
    }
}

pub(crate) fn widen(m: &DMatrix<f32>) -> DMatrix<f64> {
    m.map(f64::from)
}

pub(crate) fn narrow(m: &DMatrix<f64>) -> DMatrix<f32> {
    m.map(|v| v as f32)
}

/// Replaces both projections of every layer by their edit solution.
///
/// Layers are solved independently (in parallel); output order matches
/// input order. The closed-form path factors `Δ Δᵀ + λ I` once for all
/// layers.
pub fn apply_edit_to_layers(
    layers: &[ProjectionLayer],
    deltas: &DeltaSet,
    config: &EditConfig,
) -> Result<Vec<ProjectionLayer>> {
    config.validate()?;
    if let Some(bad) = layers.iter().find(|l| l.d() != deltas.d()) {
        return Err(Error::DimensionMismatch(format!(
            "layer `{}` has d = {} but deltas have d = {}",
            bad.layer_id,
            bad.d(),
            deltas.d()
        )));
    }
    if deltas.is_zero() {
        return Ok(layers.to_vec());
    }
    let delta_matrix = deltas.to_f64();
    let system = match config.solver {
        Solver::ClosedForm => Some(MistSystem::new(&delta_matrix, config.lambda)?),
        Solver::Gradient => None,
    };
    let solve = |w: &DMatrix<f32>| -> Result<DMatrix<f32>> {
        let w_old = widen(w);
        let r = match &system {
            Some(s) => s.solve(&w_old)?,
            None => mist_gradient(&w_old, &delta_matrix, config)?,
        };
        Ok(narrow(&r.w_star))
    };
    layers
        .par_iter()
        .map(|layer| {
            let key = solve(&layer.key).map_err(|e| e.in_layer(&layer.layer_id))?;
            let value = solve(&layer.value).map_err(|e| e.in_layer(&layer.layer_id))?;
            Ok(ProjectionLayer {
                key,
                value,
                ..layer.clone()
            })
        })
        .collect()
}
