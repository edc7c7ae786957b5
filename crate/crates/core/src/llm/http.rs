use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{debug, warn};

use super::{estimate_tokens, ChatRequest, ChatResponse, LlmBackend, LlmError, TokenUsage};

const DEFAULT_MAX_RETRIES: u32 = 3;
const BASE_BACKOFF_MS: u64 = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Total attempts for transport-level failures.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_max_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

fn default_timeout_secs() -> u64 {
    120
}

/// Chat-completions client: `{model, messages, temperature, stop, max_tokens}`
/// in, `choices[0].message.content` plus `usage` out.
pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    client: reqwest::Client,
    backoff_base: Duration,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, LlmError> {
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok());
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::InvalidRequest(format!("http client: {e}")))?;
        Ok(Self {
            config,
            api_key,
            client,
            backoff_base: Duration::from_millis(BASE_BACKOFF_MS),
        })
    }

    /// Overrides the first backoff delay; later delays double.
    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    fn body(&self, request: &ChatRequest) -> serde_json::Value {
        let messages: Vec<_> = request
            .turns
            .iter()
            .map(|t| json!({"role": t.role.as_str(), "content": t.content}))
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        });
        if !request.stop_sequences.is_empty() {
            body["stop"] = json!(request.stop_sequences);
        }
        body
    }

    async fn send_once(&self, body: &serde_json::Value) -> Result<reqwest::Response, reqwest::Error> {
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        req.send().await
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

#[async_trait]
impl LlmBackend for HttpBackend {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let body = self.body(request);
        let attempts = self.config.max_retries.max(1);
        let mut last_err = String::new();
        let mut response = None;
        for attempt in 1..=attempts {
            match self.send_once(&body).await {
                Ok(resp) => {
                    response = Some(resp);
                    break;
                }
                Err(e) => {
                    warn!(attempt, error = %e, "chat completion transport failure");
                    last_err = e.to_string();
                    if attempt < attempts {
                        let delay = self.backoff_base * 2u32.pow(attempt - 1);
                        tokio::time::sleep(delay).await;
                    }
                }
            }
        }
        let Some(resp) = response else {
            return Err(LlmError::TransportError {
                attempts,
                message: last_err,
            });
        };

        let status = resp.status();
        let text = resp
            .text()
            .await
            .map_err(|e| LlmError::BadResponse(e.to_string()))?;
        if !status.is_success() {
            return Err(LlmError::BadResponse(format!("HTTP {status}: {text}")));
        }
        let wire: WireResponse =
            serde_json::from_str(&text).map_err(|e| LlmError::BadResponse(e.to_string()))?;
        let completion = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::BadResponse("no choices in response".into()))?;

        let reported = wire
            .usage
            .and_then(|u| Some(TokenUsage::new(u.prompt_tokens?, u.completion_tokens?)));
        let (usage, estimated) = match reported {
            Some(u) => (u, false),
            None => (
                TokenUsage::new(
                    estimate_tokens(&request.render()),
                    estimate_tokens(&completion),
                ),
                true,
            ),
        };
        debug!(prompt = usage.prompt_tokens, completion = usage.completion_tokens, "completion");
        Ok(ChatResponse {
            text: completion,
            usage,
            estimated,
        })
    }
}
