// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Oracle, OracleQuery};
use crate::error::{Error, Result};
use crate::metrics::RatioReport;

/// Parameters of the synthetic oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticOracleModel {
    /// `k > 0`.
    pub sensitivity: f64,
    /// `r₀`, the response norm at calibration start.
    pub reference_response: f64,
    pub noise_seed: u64,
}

impl SyntheticOracleModel {
    /// Category-0 probability `1/L + (1 − 1/L) · tanh(k · r / r₀)`.
    ///
    /// `r₀ = 0` is read as "nothing left to suppress" and gives `1/L`.
    pub fn category0_probability(&self, categories: usize, response_norm: f64) -> f64 {
        let base = 1.0 / categories as f64;
        let scaled = if self.reference_response > 0.0 {
            self.sensitivity * response_norm.max(0.0) / self.reference_response
        } else {
            0.0
        };
        base + (1.0 - base) * scaled.tanh()
    }
}

/// Deterministic test double for a CLIP-style classifier.
///
/// Each query draws `n` categorical samples: category 0 with the model
/// probability, the rest of the mass split evenly. The uniforms come from a
/// ChaCha stream seeded only by `noise_seed`, so repeated queries reuse the
/// same draws and category-0 counts are monotone in the response norm.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    model: SyntheticOracleModel,
}

impl SyntheticOracle {
    pub fn new(sensitivity: f64, noise_seed: u64) -> Result<Self> {
        if !(sensitivity.is_finite() && sensitivity > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "synthetic oracle sensitivity must be positive, got {sensitivity}"
            )));
        }
        Ok(Self {
            model: SyntheticOracleModel {
                sensitivity,
                reference_response: 0.0,
                noise_seed,
            },
        })
    }

    pub fn with_reference(mut self, reference_response: f64) -> Self {
        self.model.reference_response = reference_response;
        self
    }

    pub fn model(&self) -> &SyntheticOracleModel {
        &self.model
    }

    /// Parses `k=<f64>,seed=<u64>` (either may be omitted; `&` also
    /// separates). Defaults: `k = 3`, `seed = 0`.
    pub fn from_params(params: &str) -> Result<Self> {
        let mut k = 3.0;
        let mut seed = 0;
        for kv in params.split([',', '&']).filter(|s| !s.is_empty()) {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("bad synthetic oracle parameter `{kv}`")))?;
            let bad = || Error::InvalidArgument(format!("bad value in `{kv}`"));
            match key.trim() {
                "k" => k = value.trim().parse().map_err(|_| bad())?,
                "seed" => seed = value.trim().parse().map_err(|_| bad())?,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown synthetic oracle parameter `{other}`"
                    )))
                }
            }
        }
        Self::new(k, seed)
    }
}

impl Oracle for SyntheticOracle {
    fn set_reference(&mut self, reference_response: f64) {
        self.model.reference_response = reference_response;
    }

    fn query_ratio(&mut self, query: &OracleQuery, response_norm: f64) -> Result<RatioReport> {
        query.validate()?;
        let l = query.spec.len();
        let p0 = self.model.category0_probability(l, response_norm);
        let rest = (1.0 - p0) / (l - 1) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.noise_seed);
        let mut counts = vec![0u64; l];
        for _ in 0..query.n_samples {
            let u: f64 = rng.random();
            let category = if u < p0 {
                0
            } else if rest > 0.0 {
                (1 + ((u - p0) / rest) as usize).min(l - 1)
            } else {
                l - 1
            };
            counts[category] += 1;
        }
        RatioReport::from_counts(query.spec.clone(), counts)
    }
}
