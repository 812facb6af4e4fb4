//! Client for a remote embedding service.
//!
//! `POST {endpoint}/embed` with `{"texts": [...]}` returns
//! `{"embeddings": [[...], ...]}`. The API key travels as a bearer token.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Embedding;

pub const EMBED_API_KEY_VAR: &str = "EMBED_API_KEY";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("environment variable {0} is not set")]
    MissingCredentials(&'static str),
    #[error("embedding service rejected credentials (HTTP {0})")]
    Auth(u16),
    #[error("embedding has dimension {got}, corpus expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("service returned {got} embeddings for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding service answered HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed service response: {0}")]
    Decode(String),
}

#[derive(Clone)]
pub struct Credentials {
    api_key: String,
}

impl std::fmt::Debug for Credentials {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Credentials(**)")
    }
}

impl Credentials {
    pub fn new(api_key: impl Into<String>) -> Self {
        Self { api_key: api_key.into() }
    }

    pub fn from_env() -> Result<Self, EmbedError> {
        match std::env::var(EMBED_API_KEY_VAR) {
            Ok(k) if !k.is_empty() => Ok(Self::new(k)),
            _ => Err(EmbedError::MissingCredentials(EMBED_API_KEY_VAR)),
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct EmbedClient {
    endpoint: String,
    credentials: Credentials,
    dim: usize,
    batch_size: usize,
    max_retries: u32,
    backoff: Duration,
    agent: ureq::Agent,
}

enum Attempt {
    Done(Vec<Vec<f32>>),
    Retry(EmbedError),
}

impl EmbedClient {
    pub fn new(endpoint: impl Into<String>, credentials: Credentials, dim: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            credentials,
            dim,
            batch_size: 64,
            max_retries: 3,
            backoff: Duration::from_millis(500),
            agent,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    /// Retries transient failures up to `max_retries` times, doubling `backoff` each time.
    pub fn with_retry(mut self, max_retries: u32, backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = backoff;
        self
    }

    /// One embedding per text, or an error; partial results are never returned.
    pub fn fetch(&self, texts: &[String]) -> Result<Vec<Embedding>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.batch_size) {
            let vectors = self.fetch_batch(batch)?;
            if vectors.len() != batch.len() {
                return Err(EmbedError::CountMismatch { expected: batch.len(), got: vectors.len() });
            }
            for v in vectors {
                if v.len() != self.dim {
                    return Err(EmbedError::DimensionMismatch { expected: self.dim, got: v.len() });
                }
                out.push(Embedding::new(v).map_err(|e| EmbedError::Decode(e.to_string()))?);
            }
        }
        Ok(out)
    }

    fn fetch_batch(&self, batch: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let mut delay = self.backoff;
        let mut attempt = 0;
        loop {
            match self.try_once(batch)? {
                Attempt::Done(v) => return Ok(v),
                Attempt::Retry(err) if attempt >= self.max_retries => return Err(err),
                Attempt::Retry(err) => {
                    log::warn!("embedding request failed ({err}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
            }
        }
    }

    fn try_once(&self, batch: &[String]) -> Result<Attempt, EmbedError> {
        let url = format!("{}/embed", self.endpoint);
        let sent = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.credentials.api_key))
            .send_json(EmbedRequest { texts: batch });
        let mut resp = match sent {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(EmbedError::Transport(e.to_string()))),
        };
        let status = resp.status().as_u16();
        match status {
            200..=299 => {
                let body: EmbedResponse = resp.body_mut().read_json().map_err(|e| EmbedError::Decode(e.to_string()))?;
                Ok(Attempt::Done(body.embeddings))
            }
            401 | 403 => Err(EmbedError::Auth(status)),
            _ => {
                let body = resp.body_mut().read_to_string().unwrap_or_default();
                let err = EmbedError::Http { status, body };
                if status == 429 || status >= 500 {
                    Ok(Attempt::Retry(err))
                } else {
                    Err(err)
                }
            }
        }
    }
}

pub fn fetch_embeddings(
    texts: &[String],
    endpoint: &str,
    credentials: &Credentials,
    dim: usize,
) -> Result<Vec<Embedding>, EmbedError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    EmbedClient::new(endpoint, credentials.clone(), dim).fetch(texts)
}
