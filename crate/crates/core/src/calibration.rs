// SPDX-License-Identifier: MIT OR Apache-2.0

//! Iterative debiasing: gradient steps on every cross-attention projection,
//! then an oracle measurement, until the worst category's `ψ` is within
//! tolerance.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::editors::{apply_edit_to_layers, narrow, widen, EditConfig, MistDescent};
use crate::embedding::DeltaSet;
use crate::error::{Error, Result};
use crate::metrics::{biasedness_per_category, AttributeSpec};
use crate::oracle::{Oracle, OracleQuery, DEFAULT_N_SAMPLES};
use crate::tensor_store::{
    extract_cross_attention, patch_layers, write_container, NamedTensorMap, ProjectionLayer, DEFAULT_KEY_PATTERN,
    DEFAULT_VALUE_PATTERN,
};

/// Name filters pairing key and value projections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPatterns {
    pub key: String,
    pub value: String,
}

impl Default for LayerPatterns {
    fn default() -> Self {
        Self {
            key: DEFAULT_KEY_PATTERN.into(),
            value: DEFAULT_VALUE_PATTERN.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub n_samples: u32,
    pub psi_tolerance: f64,
    pub max_iterations: usize,
    /// Gradient steps per iteration; 0 measures without editing.
    pub steps_per_iteration: usize,
    pub edit: EditConfig,
    /// Run seed; query seeds are derived from it per iteration.
    pub seed: u64,
    pub patterns: LayerPatterns,
    /// Where per-iteration checkpoints go for oracles that load them.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            n_samples: DEFAULT_N_SAMPLES,
            psi_tolerance: 0.1,
            max_iterations: 50,
            steps_per_iteration: 10,
            edit: EditConfig::default(),
            seed: 0,
            patterns: LayerPatterns::default(),
            checkpoint_dir: None,
        }
    }
}

impl CalibrationConfig {
    /// Defaults with `λ = 1 / L`.
    pub fn for_deltas(deltas: &DeltaSet) -> Self {
        Self {
            edit: EditConfig::for_deltas(deltas),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.edit.validate()?;
        if !(self.psi_tolerance > 0.0 && self.psi_tolerance <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "psi_tolerance must be in (0, 1], got {}",
                self.psi_tolerance
            )));
        }
        if self.n_samples == 0 || self.max_iterations == 0 {
            return Err(Error::InvalidArgument(
                "n_samples and max_iterations must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Sampling seed for one iteration.
    pub fn iteration_seed(&self, iteration: usize) -> u64 {
        // splitmix64 finalizer over (seed, iteration)
        let mut z = self
            .seed
            .wrapping_add((iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub worst_psi: f64,
    pub psi: Vec<f64>,
    pub counts: Vec<u64>,
    pub ratios: Vec<f64>,
    /// Mean `‖W Δ‖_F` over all edited matrices.
    pub response_norm: f64,
    /// Sum of edit objectives over all edited matrices.
    pub objective: f64,
    pub seed: u64,
    pub checkpoint_ref: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub final_layers_ref: String,
    /// `‖W_old Δ‖_F` averaged over edited matrices.
    pub reference_response: f64,
}

fn extract_checked(
    checkpoint: &NamedTensorMap,
    deltas: &DeltaSet,
    patterns: &LayerPatterns,
) -> Result<Vec<ProjectionLayer>> {
    let layers = extract_cross_attention(checkpoint, &patterns.key, &patterns.value)?;
    if layers.is_empty() {
        return Err(Error::InvalidMap(format!(
            "no tensors match `{}` / `{}`",
            patterns.key, patterns.value
        )));
    }
    if let Some(bad) = layers.iter().find(|l| l.d() != deltas.d()) {
        return Err(Error::DimensionMismatch(format!(
            "layer `{}` has d = {} but deltas have d = {}",
            bad.layer_id,
            bad.d(),
            deltas.d()
        )));
    }
    Ok(layers)
}

/// One-shot closed-form (or gradient, per `config.solver`) edit of every
/// cross-attention projection.
pub fn debias_once(
    checkpoint: &NamedTensorMap,
    deltas: &DeltaSet,
    config: &EditConfig,
    patterns: &LayerPatterns,
) -> Result<NamedTensorMap> {
    let layers = extract_checked(checkpoint, deltas, patterns)?;
    let edited = apply_edit_to_layers(&layers, deltas, config)?;
    patch_layers(checkpoint, &edited)
}

/// One descent per edited matrix: `[k₀, v₀, k₁, v₁, …]`.
struct LayerDescents {
    layers: Vec<ProjectionLayer>,
    descents: Vec<MistDescent>,
}

impl LayerDescents {
    fn new(layers: Vec<ProjectionLayer>, deltas: &DeltaSet, edit: &EditConfig) -> Result<Self> {
        let delta_matrix = deltas.to_f64();
        let mut descents = Vec::with_capacity(2 * layers.len());
        for layer in &layers {
            for w in [&layer.key, &layer.value] {
                descents.push(
                    MistDescent::new(&widen(w), &delta_matrix, edit.lambda, edit.learning_rate)
                        .map_err(|e| e.in_layer(&layer.layer_id))?,
                );
            }
        }
        Ok(Self { layers, descents })
    }

    fn mean_response(&self) -> f64 {
        self.descents.iter().map(MistDescent::response_norm).sum::<f64>() / self.descents.len() as f64
    }

    fn objective(&self) -> f64 {
        self.descents.iter().map(MistDescent::objective).sum()
    }

    fn advance(&mut self, steps: usize) -> Result<()> {
        let layers = &self.layers;
        self.descents.par_iter_mut().enumerate().try_for_each(|(i, descent)| {
            let layer_id = &layers[i / 2].layer_id;
            let before = descent.objective();
            for _ in 0..steps {
                descent.step().map_err(|e| e.in_layer(layer_id))?;
            }
            // Safe steps never raise the objective (beyond rounding).
            if descent.objective() > before + 1e-12 * before.abs().max(1.0) {
                return Err(Error::Divergence {
                    steps: descent.steps(),
                    consecutive: 1,
                    suggested: descent.max_learning_rate(),
                }
                .in_layer(layer_id));
            }
            Ok(())
        })
    }

    fn current_layers(&self) -> Vec<ProjectionLayer> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, layer)| ProjectionLayer {
                key: narrow(self.descents[2 * i].weights()),
                value: narrow(self.descents[2 * i + 1].weights()),
                ..layer.clone()
            })
            .collect()
    }
}

/// Runs the edit-and-measure loop.
///
/// Each iteration takes `steps_per_iteration` gradient steps on every key and
/// value projection, queries the oracle with the mean `‖W Δ‖_F`, and records
/// the worst-category `ψ`. Stops once `worst ψ ≤ psi_tolerance` or after
/// `max_iterations`. Oracle or solver failures surface as
/// [`Error::Calibration`] carrying the partial trace.
pub fn calibrate(
    checkpoint: &NamedTensorMap,
    deltas: &DeltaSet,
    spec: &AttributeSpec,
    oracle: &mut dyn Oracle,
    config: &CalibrationConfig,
) -> Result<(NamedTensorMap, CalibrationReport)> {
    config.validate()?;
    if oracle.needs_checkpoint_file() && config.checkpoint_dir.is_none() {
        return Err(Error::InvalidArgument(
            "this oracle loads checkpoints from disk; set a checkpoint directory".into(),
        ));
    }
    let layers = extract_checked(checkpoint, deltas, &config.patterns)?;
    let mut state = LayerDescents::new(layers, deltas, &config.edit)?;
    let mut report = CalibrationReport {
        reference_response: state.mean_response(),
        ..CalibrationReport::default()
    };
    oracle.set_reference(report.reference_response);

    let abort = |source: Error, report: &CalibrationReport| Error::Calibration {
        source: Box::new(source),
        partial: Box::new(report.clone()),
    };

    let mut patched = checkpoint.clone();
    for iteration in 1..=config.max_iterations {
        if let Err(e) = state.advance(config.steps_per_iteration) {
            return Err(abort(e, &report));
        }
        patched = patch_layers(checkpoint, &state.current_layers())?;
        let checkpoint_ref = match &config.checkpoint_dir {
            Some(dir) if oracle.needs_checkpoint_file() => {
                let path = dir.join(format!("iteration_{iteration:03}.safetensors"));
                if let Err(e) = write_container(&patched, &path) {
                    return Err(abort(e, &report));
                }
                path.display().to_string()
            }
            _ => format!("memory:iteration-{iteration}"),
        };
        let seed = config.iteration_seed(iteration);
        let query = OracleQuery {
            prompt: deltas.source_prompt().to_string(),
            spec: spec.clone(),
            n_samples: config.n_samples,
            checkpoint_ref: checkpoint_ref.clone(),
            seed,
        };
        let response_norm = state.mean_response();
        let ratios = match oracle.query_ratio(&query, response_norm) {
            Ok(r) => r,
            Err(e) => return Err(abort(e, &report)),
        };
        let psi = biasedness_per_category(&ratios);
        let worst_psi = psi.iter().copied().fold(0.0, f64::max);
        log::info!("iteration {iteration}: worst psi {worst_psi:.4}, response {response_norm:.6}");
        report.iterations.push(IterationRecord {
            iteration,
            worst_psi,
            psi,
            counts: ratios.counts().to_vec(),
            ratios: ratios.ratios().to_vec(),
            response_norm,
            objective: state.objective(),
            seed,
            checkpoint_ref: checkpoint_ref.clone(),
        });
        report.final_layers_ref = checkpoint_ref;
        if worst_psi <= config.psi_tolerance {
            report.converged = true;
            break;
        }
    }
    Ok((patched, report))
}

impl CalibrationReport {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
