// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attribute-ratio oracles.
//!
//! An oracle answers "for this checkpoint and prompt, how do N samples split
//! across the attribute's categories?". Two implementations exist, chosen by
//! URI scheme:
//!
//! - `synthetic:[k=<sensitivity>][,seed=<u64>]`: [`SyntheticOracle`], a
//!   deterministic stand-in driven by the current delta response norm.
//! - `http://…` / `https://…`: [`HttpOracle`], a client for the bridge
//!   service's `POST /classify` endpoint.

mod http;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{AttributeSpec, RatioReport};

pub use http::{ClassifyRequest, ClassifyResponse, HttpOracle, DEFAULT_TIMEOUT, MAX_RETRIES};
pub use synthetic::{SyntheticOracle, SyntheticOracleModel};

/// Samples per query unless overridden.
pub const DEFAULT_N_SAMPLES: u32 = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleQuery {
    pub prompt: String,
    pub spec: AttributeSpec,
    pub n_samples: u32,
    /// Checkpoint the oracle should sample from (a path the bridge can load).
    pub checkpoint_ref: String,
    /// Sampling seed for this query.
    pub seed: u64,
}

impl OracleQuery {
    pub fn new(prompt: impl Into<String>, spec: AttributeSpec, checkpoint_ref: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            spec,
            n_samples: DEFAULT_N_SAMPLES,
            checkpoint_ref: checkpoint_ref.into(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

pub trait Oracle {
    /// Called once at calibration start with `‖W_old Δ‖_F` (mean over
    /// edited matrices). Oracles that do not model the response ignore it.
    fn set_reference(&mut self, _reference_response: f64) {}

    /// Returns category counts for `query`. `response_norm` is the current
    /// mean `‖W Δ‖_F`.
    fn query_ratio(&mut self, query: &OracleQuery, response_norm: f64) -> Result<RatioReport>;

    /// Whether the oracle reads `checkpoint_ref` from disk.
    fn needs_checkpoint_file(&self) -> bool {
        false
    }
}

impl<O: Oracle + ?Sized> Oracle for Box<O> {
    fn set_reference(&mut self, reference_response: f64) {
        (**self).set_reference(reference_response)
    }

    fn query_ratio(&mut self, query: &OracleQuery, response_norm: f64) -> Result<RatioReport> {
        (**self).query_ratio(query, response_norm)
    }

    fn needs_checkpoint_file(&self) -> bool {
        (**self).needs_checkpoint_file()
    }
}

/// Builds an oracle from its URI.
pub fn oracle_from_uri(uri: &str) -> Result<Box<dyn Oracle>> {
    if let Some(params) = uri.strip_prefix("synthetic:") {
        return Ok(Box::new(SyntheticOracle::from_params(params)?));
    }
    if uri.starts_with("http://") || uri.starts_with("https://") {
        return Ok(Box::new(HttpOracle::new(uri)?));
    }
    Err(Error::InvalidArgument(format!(
        "unknown oracle URI `{uri}` (expected `synthetic:` or `http(s)://`)"
    )))
}
