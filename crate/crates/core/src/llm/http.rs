//! Live chat-completion client speaking the common `/chat/completions` JSON
//! schema.

use std::time::Duration;

use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{ChatBackend, ChatRequest, ChatResponse, LlmError, Usage};

pub const BASE_URL_ENV: &str = "NREP_API_BASE";
pub const API_KEY_ENV: &str = "NREP_API_KEY";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

pub struct HttpChatBackend {
    base_url: String,
    api_key: String,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            retry: RetryPolicy::default(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(300)).build(),
        }
    }

    /// Reads the base URL and key from `NREP_API_BASE` / `NREP_API_KEY`.
    pub fn from_env() -> Result<Self, LlmError> {
        let key = std::env::var(API_KEY_ENV)
            .map_err(|_| LlmError::Transport {
                attempts: 0,
                message: format!("{API_KEY_ENV} is not set"),
            })?;
        let base = std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
        Ok(Self::new(base, key))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub(crate) fn post_json(&self, path: &str, body: &Value) -> Result<Value, LlmError> {
        let url = format!("{}/{}", self.base_url, path.trim_start_matches('/'));
        post_with_retry(&self.agent, &url, &self.api_key, body, self.retry)
    }
}

pub(crate) fn post_with_retry(
    agent: &ureq::Agent,
    url: &str,
    api_key: &str,
    body: &Value,
    retry: RetryPolicy,
) -> Result<Value, LlmError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        let result = agent
            .post(url)
            .set("Authorization", &format!("Bearer {api_key}"))
            .set("Content-Type", "application/json")
            .send_json(body.clone());
        let retryable = match result {
            Ok(resp) => {
                return resp
                    .into_json::<Value>()
                    .map_err(|e| LlmError::BadResponse(e.to_string()));
            }
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                if status == 429 || status >= 500 {
                    LlmError::Http { status, body }
                } else {
                    return Err(LlmError::Http { status, body });
                }
            }
            Err(ureq::Error::Transport(t)) => LlmError::Transport {
                attempts: attempt,
                message: t.to_string(),
            },
        };
        if attempt >= retry.max_attempts {
            return Err(match retryable {
                LlmError::Transport { message, .. } => LlmError::Transport {
                    attempts: attempt,
                    message,
                },
                other => other,
            });
        }
        let delay = retry.delay(attempt);
        warn!(%url, attempt, ?delay, "retrying after: {retryable}");
        std::thread::sleep(delay);
    }
}

pub(crate) fn parse_chat_reply(reply: &Value) -> Result<ChatResponse, LlmError> {
    let text = reply
        .pointer("/choices/0/message/content")
        .map(|v| v.as_str().unwrap_or_default().to_string())
        .ok_or_else(|| LlmError::BadResponse(format!("missing choices[0].message.content in {reply}")))?;
    let tokens = |key: &str| reply.pointer(&format!("/usage/{key}")).and_then(Value::as_u64).unwrap_or(0);
    Ok(ChatResponse {
        text,
        usage: Usage {
            input_tokens: tokens("prompt_tokens"),
            output_tokens: tokens("completion_tokens"),
        },
    })
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        debug!(model = %request.model, messages = request.messages.len(), "chat completion");
        parse_chat_reply(&self.post_json("chat/completions", &body)?)
    }
}
