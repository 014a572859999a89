//! Text-generation backends.
//!
//! Every model call in the crate goes through [`Backend::generate`]. Three
//! implementations ship: [`LiveBackend`] (OpenAI-compatible HTTP),
//! [`ScriptedBackend`] (tag-keyed fixtures) and [`ReplayBackend`] (serves a
//! recorded cache). [`CachedBackend`] wraps any of them with a persistent
//! JSONL response cache.

mod cache;
mod live;
mod scripted;
mod search;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{CacheRecord, CachedBackend, ReplayBackend};
pub use live::{LiveBackend, LiveConfig, RetryPolicy, API_KEY_ENV};
pub use scripted::{script_backend, ScriptedBackend, ScriptedFixture, ScriptedReply};
pub use search::{web_search, FixtureSearch, LiveSearch, NoSearch, SearchBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub want_logprobs: bool,
    /// Identifies the call: question id, sample index and stage.
    pub request_tag: String,
}

impl GenerationRequest {
    pub fn new(model: impl Into<String>, messages: Vec<Message>, tag: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            messages,
            temperature: 1.0,
            max_tokens: 1024,
            want_logprobs: false,
            request_tag: tag.into(),
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn with_logprobs(mut self, on: bool) -> Self {
        self.want_logprobs = on;
        self
    }

    /// Content hash used as the response-cache key.
    ///
    /// The request tag is part of the key so that N sampling requests with
    /// identical prompts are cached as N distinct draws.
    pub fn cache_key(&self) -> String {
        #[derive(Serialize)]
        struct KeyParts<'a> {
            model: &'a str,
            messages: &'a [Message],
            temperature: f64,
            want_logprobs: bool,
            request_tag: &'a str,
        }
        let parts = KeyParts {
            model: &self.model,
            messages: &self.messages,
            temperature: self.temperature,
            want_logprobs: self.want_logprobs,
            request_tag: &self.request_tag,
        };
        let bytes = serde_json::to_vec(&parts).expect("key parts serialize");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    /// Per-token likelihoods in (0, 1], present only when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_likelihoods: Option<Vec<f64>>,
    pub finish_reason: String,
    #[serde(default)]
    pub usage: Usage,
}

impl GenerationResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            token_likelihoods: None,
            finish_reason: "stop".into(),
            usage: Usage::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("provider unavailable after {attempts} attempt(s): {message}")]
    ProviderUnavailable { attempts: u32, message: String },
    #[error("authentication failed: {0}")]
    AuthError(String),
    #[error("provider rejected request ({status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("token log-probabilities are not supported for model {model}")]
    LogprobsUnsupported { model: String },
    #[error("scripted fixture exhausted for tag {tag:?}")]
    FixtureExhausted { tag: String },
    #[error("no recorded response for tag {tag:?}")]
    ReplayMiss { tag: String },
    #[error("search unavailable: {0}")]
    SearchUnavailable(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("cache i/o: {0}")]
    Cache(#[from] std::io::Error),
}

/// A text-generation provider.
pub trait Backend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GatewayError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        (**self).generate(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        (**self).generate(request)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        (**self).generate(request)
    }
}

/// Validate a request and dispatch it to `backend`.
pub fn generate(
    backend: &dyn Backend,
    request: &GenerationRequest,
) -> Result<GenerationResponse, GatewayError> {
    if request.messages.is_empty() {
        return Err(GatewayError::InvalidRequest(
            "messages must be non-empty".into(),
        ));
    }
    if request.temperature.is_nan() || request.temperature < 0.0 {
        return Err(GatewayError::InvalidRequest(format!(
            "temperature must be >= 0, got {}",
            request.temperature
        )));
    }
    backend.generate(request)
}
