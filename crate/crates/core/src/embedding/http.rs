//! Client for a remote sentence encoder speaking the `/embed` + `/health`
//! JSON protocol.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::EmbeddingVector;
use crate::error::{Error, Result};

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    texts: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    #[allow(dead_code)]
    model: String,
    dim: usize,
    embeddings: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model: String,
}

#[derive(Debug, Clone)]
pub struct HttpEncoder {
    client: reqwest::blocking::Client,
    endpoint: String,
    model_id: String,
}

impl HttpEncoder {
    pub fn new(endpoint: &str, model_id: &str, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            client,
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model_id: model_id.to_string(),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn health(&self) -> Result<Health> {
        let resp = self
            .client
            .get(format!("{}/health", self.endpoint))
            .send()
            .map_err(|e| Error::ProviderUnavailable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::ProviderUnavailable(format!("health check returned {status}")));
        }
        resp.json::<Health>()
            .map_err(|e| Error::MalformedResponse(e.to_string()))
    }

    /// One `POST /embed` round trip.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let resp = self
            .client
            .post(format!("{}/embed", self.endpoint))
            .json(&EmbedRequest {
                model: &self.model_id,
                texts,
            })
            .send()
            .map_err(|e| Error::ProviderUnavailable(e.to_string()))?;
        let status = resp.status();
        let body = resp
            .bytes()
            .map_err(|e| Error::ProviderUnavailable(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Error::ProviderUnavailable(format!(
                "{status}: {}",
                String::from_utf8_lossy(&body)
            )));
        }
        if !status.is_success() {
            return Err(Error::InvalidInput(format!(
                "encoder rejected request ({status}): {}",
                String::from_utf8_lossy(&body)
            )));
        }
        let parsed: EmbedResponse =
            serde_json::from_slice(&body).map_err(|e| Error::MalformedResponse(e.to_string()))?;
        validate(parsed, texts.len())
    }
}

fn validate(resp: EmbedResponse, expected_rows: usize) -> Result<Vec<EmbeddingVector>> {
    if resp.embeddings.len() != expected_rows {
        return Err(Error::MalformedResponse(format!(
            "expected {expected_rows} rows, got {}",
            resp.embeddings.len()
        )));
    }
    if resp.dim == 0 {
        return Err(Error::MalformedResponse("dim must be positive".into()));
    }
    resp.embeddings
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != resp.dim {
                return Err(Error::MalformedResponse(format!(
                    "row {i} has {} values, declared dim {}",
                    row.len(),
                    resp.dim
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::MalformedResponse(format!("row {i} has non-finite values")));
            }
            Ok(EmbeddingVector::new(row))
        })
        .collect()
}
