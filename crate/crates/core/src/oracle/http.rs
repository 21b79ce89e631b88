// SPDX-License-Identifier: MIT OR Apache-2.0

//! Client for the bridge service's classification endpoint.
//!
//! `POST {base}/classify` with
//! `{"prompt", "categories", "classification_prompts", "n_samples", "checkpoint_ref", "seed"}`
//! answered by `{"counts": [int], "n_total": int}`.

use std::thread;
use std::time::Duration;

use log::warn;
use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};

use super::{Oracle, OracleQuery};
use crate::error::{Error, Result};
use crate::metrics::RatioReport;

/// Per-call timeout; sampling N images is slow.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);
/// Retries after the first failed attempt.
pub const MAX_RETRIES: u32 = 3;
const DEFAULT_BACKOFF: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest {
    pub prompt: String,
    pub categories: Vec<String>,
    pub classification_prompts: Vec<String>,
    pub n_samples: u32,
    pub checkpoint_ref: String,
    pub seed: u64,
}

impl From<&OracleQuery> for ClassifyRequest {
    fn from(q: &OracleQuery) -> Self {
        Self {
            prompt: q.prompt.clone(),
            categories: q.spec.categories().to_vec(),
            classification_prompts: q.spec.classification_prompts().to_vec(),
            n_samples: q.n_samples,
            checkpoint_ref: q.checkpoint_ref.clone(),
            seed: q.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub counts: Vec<u64>,
    pub n_total: u64,
}

#[derive(Debug, Clone)]
pub struct HttpOracle {
    endpoint: String,
    client: Client,
    max_retries: u32,
    backoff: Duration,
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl HttpOracle {
    pub fn new(base_url: &str) -> Result<Self> {
        Self::with_timeout(base_url, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Result<Self> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            endpoint: format!("{}/classify", base_url.trim_end_matches('/')),
            client,
            max_retries: MAX_RETRIES,
            backoff: DEFAULT_BACKOFF,
        })
    }

    /// First retry waits `backoff`, doubling after each failure.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, request: &ClassifyRequest) -> std::result::Result<ClassifyResponse, Attempt> {
        let response = self
            .client
            .post(&self.endpoint)
            .json(request)
            .send()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = response.status();
        if status.is_server_error() {
            return Err(Attempt::Retry(format!("server returned {status}")));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(Attempt::Fatal(Error::OracleProtocol(format!(
                "server returned {status}: {body}"
            ))));
        }
        let body = response.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        serde_json::from_str(&body)
            .map_err(|e| Attempt::Fatal(Error::OracleProtocol(format!("bad /classify response: {e}"))))
    }
}

impl Oracle for HttpOracle {
    fn query_ratio(&mut self, query: &OracleQuery, _response_norm: f64) -> Result<RatioReport> {
        query.validate()?;
        let request = ClassifyRequest::from(query);
        let mut delay = self.backoff;
        let mut attempts = 0;
        let reply = loop {
            attempts += 1;
            match self.attempt(&request) {
                Ok(reply) => break reply,
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(reason)) if attempts > self.max_retries => {
                    return Err(Error::Oracle { attempts, reason });
                }
                Err(Attempt::Retry(reason)) => {
                    warn!("oracle attempt {attempts} failed ({reason}); retrying in {delay:?}");
                    thread::sleep(delay);
                    delay *= 2;
                }
            }
        };
        if reply.counts.len() != query.spec.len() {
            return Err(Error::OracleProtocol(format!(
                "{} counts for {} categories",
                reply.counts.len(),
                query.spec.len()
            )));
        }
        let sum: u64 = reply.counts.iter().sum();
        if sum != reply.n_total {
            return Err(Error::OracleProtocol(format!(
                "counts sum to {sum} but n_total is {}",
                reply.n_total
            )));
        }
        if reply.n_total != u64::from(query.n_samples) {
            warn!(
                "oracle classified {} of {} requested samples",
                reply.n_total, query.n_samples
            );
        }
        RatioReport::from_counts(query.spec.clone(), reply.counts).map_err(|e| Error::OracleProtocol(e.to_string()))
    }

    fn needs_checkpoint_file(&self) -> bool {
        true
    }
}
