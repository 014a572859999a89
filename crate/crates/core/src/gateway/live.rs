use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{Backend, GatewayError, GenerationRequest, GenerationResponse, Usage};

/// Environment variable holding the provider API key.
pub const API_KEY_ENV: &str = "UQDIAG_API_KEY";

/// Retry schedule for transient failures (transport errors, 429, 5xx).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): base, 2·base, 4·base, ...
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry)
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// e.g. `https://api.openai.com/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub api_key: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl LiveConfig {
    /// Read the API key from [`API_KEY_ENV`].
    pub fn from_env(base_url: impl Into<String>) -> Result<Self, GatewayError> {
        let api_key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| GatewayError::AuthError(format!("{API_KEY_ENV} is not set")))?;
        Ok(Self {
            base_url: base_url.into(),
            api_key,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        })
    }
}

/// OpenAI-compatible chat-completions client.
#[derive(Debug, Clone)]
pub struct LiveBackend {
    config: LiveConfig,
    client: Client,
}

enum Attempt {
    Done(GenerationResponse),
    Retry(String),
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, GatewayError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn body(request: &GenerationRequest) -> Value {
        let mut body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if request.want_logprobs {
            body["logprobs"] = Value::Bool(true);
        }
        body
    }

    fn attempt(&self, request: &GenerationRequest) -> Result<Attempt, GatewayError> {
        let resp = match self
            .client
            .post(self.endpoint())
            .bearer_auth(&self.config.api_key)
            .json(&Self::body(request))
            .send()
        {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(GatewayError::AuthError(text));
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Ok(Attempt::Retry(format!("{status}: {text}")));
        }
        if !status.is_success() {
            if request.want_logprobs && text.to_ascii_lowercase().contains("logprobs") {
                return Err(GatewayError::LogprobsUnsupported {
                    model: request.model.clone(),
                });
            }
            return Err(GatewayError::Rejected {
                status: status.as_u16(),
                body: text,
            });
        }
        parse_completion(&text, request).map(Attempt::Done)
    }
}

impl Backend for LiveBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        let policy = self.config.retry;
        let mut last = String::new();
        for attempt in 0..=policy.max_retries {
            if attempt > 0 {
                let delay = policy.delay(attempt - 1);
                warn!(tag = %request.request_tag, ?delay, "retrying after: {last}");
                std::thread::sleep(delay);
            }
            debug!(tag = %request.request_tag, attempt, "chat completion");
            match self.attempt(request)? {
                Attempt::Done(r) => return Ok(r),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(GatewayError::ProviderUnavailable {
            attempts: policy.max_retries + 1,
            message: last,
        })
    }
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<CompletionChoice>,
    #[serde(default)]
    usage: Option<CompletionUsage>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct CompletionMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    logprob: f64,
}

#[derive(Deserialize)]
struct CompletionUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Decode a chat-completions body. Log-probabilities are exponentiated into
/// likelihoods here.
fn parse_completion(
    body: &str,
    request: &GenerationRequest,
) -> Result<GenerationResponse, GatewayError> {
    let parsed: Completion =
        serde_json::from_str(body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
    let choice = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::MalformedResponse("no choices".into()))?;
    let token_likelihoods = if request.want_logprobs {
        let tokens = choice.logprobs.and_then(|l| l.content).ok_or_else(|| {
            GatewayError::LogprobsUnsupported {
                model: request.model.clone(),
            }
        })?;
        Some(
            tokens
                .iter()
                .map(|t| t.logprob.exp().clamp(f64::MIN_POSITIVE, 1.0))
                .collect(),
        )
    } else {
        None
    };
    Ok(GenerationResponse {
        text: choice.message.content.unwrap_or_default(),
        token_likelihoods,
        finish_reason: choice.finish_reason.unwrap_or_else(|| "unknown".into()),
        usage: parsed
            .usage
            .map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            })
            .unwrap_or_default(),
    })
}
