//! HTTP client for an external image-text scoring service.
//!
//! `POST /v1/score {"image_b64", "text"} -> {"score"}`,
//! `POST /v1/embed_text {"text"} -> {"embedding"}`,
//! `GET /v1/health -> {"model"}`. 503 and transport failures are retried.

use std::time::Duration;

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::Scorer;
use crate::embed::{EmbeddingSource, TextEmbedder, TextEmbedding};
use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Attempts after the first.
    pub retries: u32,
    /// Doubles after every retry.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    image_b64: String,
    text: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct HealthResponse {
    model: String,
}

#[derive(Debug, Clone)]
struct Client {
    base: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

enum Attempt<T> {
    Done(T),
    Retry(String),
    Fail(String),
}

impl Client {
    fn new(endpoint: &str, retry: RetryPolicy) -> Result<Self> {
        let base = endpoint.trim_end_matches('/').to_string();
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(Error::invalid(format!("endpoint {endpoint:?} is not an http(s) URL")));
        }
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Ok(Self { base, agent, retry })
    }

    fn call<T: DeserializeOwned>(&self, path: &str, body: Option<&impl Serialize>) -> Result<T> {
        let url = format!("{}{path}", self.base);
        let mut delay = self.retry.base_delay;
        let mut last = String::new();
        for attempt in 0..=self.retry.retries {
            if attempt > 0 {
                log::debug!("retrying {url} in {delay:?}: {last}");
                std::thread::sleep(delay);
                delay *= 2;
            }
            let sent = match body {
                Some(b) => self.agent.post(&url).send_json(b),
                None => self.agent.get(&url).call(),
            };
            let outcome = match sent {
                Err(e) => Attempt::Retry(e.to_string()),
                Ok(mut resp) => match resp.status().as_u16() {
                    200 => match resp.body_mut().read_json::<T>() {
                        Ok(v) => Attempt::Done(v),
                        Err(e) => Attempt::Fail(format!("malformed response from {url}: {e}")),
                    },
                    503 => Attempt::Retry(format!("{url}: 503 busy")),
                    code => {
                        let text = resp.body_mut().read_to_string().unwrap_or_default();
                        Attempt::Fail(format!("{url}: HTTP {code} {}", text.trim()))
                    }
                },
            };
            match outcome {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(msg) => return Err(Error::Service(msg)),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(Error::Service(format!("{last} (after {} retries)", self.retry.retries)))
    }
}

/// Scores via `POST /v1/score`.
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    client: Client,
}

impl RemoteScorer {
    pub fn new(endpoint: &str) -> Result<Self> {
        Self::with_retry(endpoint, RetryPolicy::default())
    }

    pub fn with_retry(endpoint: &str, retry: RetryPolicy) -> Result<Self> {
        Ok(Self {
            client: Client::new(endpoint, retry)?,
        })
    }

    /// Identifier of the model the service has loaded.
    pub fn health(&self) -> Result<String> {
        Ok(self.client.call::<HealthResponse>("/v1/health", None::<&()>)?.model)
    }
}

impl Scorer for RemoteScorer {
    fn score(&self, image: &Raster, text: &str) -> Result<f64> {
        let req = ScoreRequest {
            image_b64: base64::engine::general_purpose::STANDARD.encode(image.encode_png()?),
            text,
        };
        let score = self.client.call::<ScoreResponse>("/v1/score", Some(&req))?.score;
        if !score.is_finite() || !(-1.0..=1.0).contains(&score) {
            return Err(Error::Service(format!("service returned score {score} outside [-1, 1]")));
        }
        Ok(score)
    }
}

/// The service returns unit vectors up to this tolerance.
const EMBEDDING_NORM_TOLERANCE: f64 = 1e-5;

/// Text embeddings via `POST /v1/embed_text`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    client: Client,
    dim: usize,
}

impl RemoteEmbedder {
    /// Probes the service once to learn the embedding width.
    pub fn connect(endpoint: &str, retry: RetryPolicy) -> Result<Self> {
        let client = Client::new(endpoint, retry)?;
        let probe: EmbedResponse = client.call("/v1/embed_text", Some(&EmbedRequest { text: "probe" }))?;
        Ok(Self {
            client,
            dim: probe.embedding.len(),
        })
    }
}

impl TextEmbedder for RemoteEmbedder {
    fn embed(&self, text: &str) -> Result<TextEmbedding> {
        let r: EmbedResponse = self.client.call("/v1/embed_text", Some(&EmbedRequest { text }))?;
        if r.embedding.len() != self.dim {
            return Err(Error::Service(format!(
                "embedding width changed from {} to {}",
                self.dim,
                r.embedding.len()
            )));
        }
        let norm = r.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= EMBEDDING_NORM_TOLERANCE) {
            return Err(Error::Service(format!("embedding norm {norm} is not 1")));
        }
        TextEmbedding::new(r.embedding, EmbeddingSource::External).map_err(|e| Error::Service(e.to_string()))
    }

    fn dim(&self) -> usize {
        self.dim
    }
}
