// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-form and gradient editing of cross-attention key/value projections
//! in text-to-image diffusion checkpoints, with bias metrics and an
//! oracle-driven calibration loop.
//!
//! The usual pipeline:
//!
//! 1. [`embedding::load_embedding_fixture`] and [`embedding::build_delta_set`]
//!    turn source and guidance prompt embeddings into EOS deltas.
//! 2. [`tensor_store::read_container`] loads a checkpoint and
//!    [`tensor_store::extract_cross_attention`] pairs its projections.
//! 3. [`calibration::debias_once`] or [`calibration::calibrate`] edits every
//!    projection and [`tensor_store::write_container`] saves the result.

pub mod calibration;
pub mod cli;
pub mod editors;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod prompt_sets;
pub mod tensor_store;

pub use error::{Error, Result};
