// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.
//!
//! Variants fall into two families: validation failures (bad inputs, shape
//! mismatches, solver rejections) and environment failures (file I/O, oracle
//! transport). The CLI maps the first family to exit code 1 and the second
//! to exit code 2.

use std::path::PathBuf;

use thiserror::Error;

use crate::calibration::CalibrationReport;

/// Errors produced by attnedit.
#[derive(Debug, Error)]
pub enum Error {
    /// Container header could not be parsed.
    #[error("malformed container header at byte offset {offset}: {reason}")]
    MalformedHeader { offset: u64, reason: String },

    /// A tensor's payload does not match its declared shape and dtype.
    #[error("tensor `{name}` at data offset {offset}: expected {expected} bytes, found {found}")]
    ByteLengthMismatch {
        name: String,
        offset: u64,
        expected: usize,
        found: usize,
    },

    /// Dtype other than F32/F16.
    #[error("tensor `{name}` at data offset {offset}: unsupported dtype `{dtype}`")]
    UnsupportedDtype { name: String, offset: u64, dtype: String },

    /// A key projection without a value projection, or the reverse.
    #[error("unpaired cross-attention layer `{prefix}`: found `{present}` but no `{missing}`")]
    UnpairedLayer {
        prefix: String,
        present: String,
        missing: String,
    },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid tensor map: {0}")]
    InvalidMap(String),

    #[error("invalid embedding fixture: {0}")]
    InvalidFixture(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    /// Gradient descent blew up.
    #[error(
        "gradient descent diverged after {steps} steps (objective rose for {consecutive} consecutive steps); \
         try a learning rate below {suggested:.3e}"
    )]
    Divergence {
        steps: usize,
        consecutive: usize,
        suggested: f64,
    },

    /// Normal matrix is not positive definite.
    #[error("singular system: {0}")]
    Singular(String),

    /// A solver error attributed to one layer.
    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("prompt template error: {0}")]
    Template(String),

    #[error("oracle request failed after {attempts} attempt(s): {reason}")]
    Oracle { attempts: u32, reason: String },

    #[error("oracle protocol error: {0}")]
    OracleProtocol(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image decode: {0}")]
    Image(String),

    /// Calibration aborted; `partial` holds the iterations completed so far.
    #[error("calibration aborted after {} iteration(s): {source}", partial.iterations.len())]
    Calibration {
        #[source]
        source: Box<Error>,
        partial: Box<CalibrationReport>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps `self` with the layer it came from.
    pub fn in_layer(self, layer: &str) -> Self {
        Error::Layer {
            layer: layer.to_string(),
            source: Box::new(self),
        }
    }

    /// True for I/O and oracle transport failures.
    pub fn is_environmental(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Oracle { .. } | Error::OracleProtocol(_) => true,
            Error::Layer { source, .. } | Error::Calibration { source, .. } => source.is_environmental(),
            _ => false,
        }
    }

    /// Process exit code for the CLI: 1 on validation errors, 2 on I/O or
    /// oracle failure.
    pub fn exit_code(&self) -> i32 {
        if self.is_environmental() {
            2
        } else {
            1
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
