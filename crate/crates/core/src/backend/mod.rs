//! Completion backends: an OpenAI-compatible HTTP client, a scripted mock for
//! the synthetic task, a fixture replayer, and a content-addressed cache.

mod cache;
mod http;
mod mock;
mod replay;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CachedBackend, ResponseCache};
pub use http::{HttpBackend, HttpConfig, TokenBucket};
pub use mock::{mock_behavior, MockBackend, MockScenario};
pub use replay::{ReplayBackend, ReplayRecord};

pub const MAX_CANDIDATES: usize = 5;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("HTTP {status}: {body}")]
    Http {
        status: u16,
        body: String,
        retriable: bool,
    },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("still rate limited after {attempts} attempts")]
    RateLimited { attempts: usize },
    #[error("malformed response: {0}")]
    Response(String),
    #[error("cache file {path}: {message}")]
    Cache { path: String, message: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("missing credentials: set {0}")]
    MissingCredentials(&'static str),
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        match self {
            BackendError::Http { retriable, .. } => *retriable,
            BackendError::Transport(_) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt_text: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub candidate_count: usize,
    pub want_token_logprobs: bool,
    pub stop_sequences: Vec<String>,
}

impl CompletionRequest {
    /// Greedy single-candidate request with logprobs and a newline stop.
    pub fn greedy(prompt_text: impl Into<String>, max_tokens: usize) -> Self {
        Self {
            prompt_text: prompt_text.into(),
            max_tokens,
            temperature: 0.0,
            candidate_count: 1,
            want_token_logprobs: true,
            stop_sequences: vec!["\n".into()],
        }
    }

    pub fn with_candidates(mut self, n: usize) -> Self {
        self.candidate_count = n;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(1..=MAX_CANDIDATES).contains(&self.candidate_count) {
            return Err(BackendError::InvalidRequest(format!(
                "candidate_count {} outside 1..={MAX_CANDIDATES}",
                self.candidate_count
            )));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} must be finite and non-negative",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
    /// Alternatives reported at this position, most likely first.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub top: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionCandidate {
    pub text: String,
    pub token_logprobs: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    /// Best first; never empty.
    pub candidates: Vec<CompletionCandidate>,
    pub model_id: String,
    #[serde(default)]
    pub cached: bool,
}

pub trait CompletionBackend: Send + Sync {
    /// Stable identifier that participates in cache keys.
    fn backend_id(&self) -> String;

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError>;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Box<B> {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }
}

/// Hex SHA-256 of the canonical JSON of `(backend id, request)`.
pub fn request_key(backend_id: &str, request: &CompletionRequest) -> String {
    #[derive(Serialize)]
    struct Keyed<'a> {
        backend: &'a str,
        request: &'a CompletionRequest,
    }
    let canonical = serde_json::to_vec(&Keyed {
        backend: backend_id,
        request,
    })
    .expect("requests serialize");
    hex::encode(Sha256::digest(&canonical))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_backend_and_request() {
        let r = CompletionRequest::greedy("abc", 10);
        let k = request_key("mock", &r);
        assert_eq!(k.len(), 64);
        assert_eq!(k, request_key("mock", &r));
        assert_ne!(k, request_key("other", &r));
        assert_ne!(k, request_key("mock", &r.clone().with_candidates(5)));
    }

    #[test]
    fn candidate_bounds() {
        assert!(CompletionRequest::greedy("x", 1).with_candidates(0).validate().is_err());
        assert!(CompletionRequest::greedy("x", 1).with_candidates(6).validate().is_err());
        assert!(CompletionRequest::greedy("x", 1).with_candidates(5).validate().is_ok());
    }
}
