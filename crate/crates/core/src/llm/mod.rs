//! Chat-completion backends and token accounting.
//!
//! Every plan, thought and code step is one call to [`LlmBackend::complete`].
//! Two providers ship: [`HttpBackend`] speaks the chat-completions wire shape,
//! [`ScriptedBackend`] replays a fixed script and is the test oracle for the
//! whole runtime.

mod http;
mod scripted;

use std::fmt;
use std::ops::{Add, AddAssign};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpBackendConfig};
pub use scripted::{ScriptStep, ScriptedBackend};

/// Sampling temperature used when the configuration does not set one.
pub const DEFAULT_TEMPERATURE: f64 = 0.0;

/// Default completion budget per call.
pub const DEFAULT_MAX_OUTPUT: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
    Tool,
}

impl ChatRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::Assistant => "assistant",
            ChatRole::Tool => "tool",
        }
    }
}

impl fmt::Display for ChatRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: ChatRole,
    pub content: String,
}

impl ChatTurn {
    pub fn new(role: ChatRole, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(ChatRole::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(ChatRole::User, content)
    }
}

/// Prompt and completion token counts. Additive, never decremented.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl TokenUsage {
    pub const ZERO: TokenUsage = TokenUsage {
        prompt_tokens: 0,
        completion_tokens: 0,
    };

    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    pub fn is_zero(&self) -> bool {
        self.total() == 0
    }
}

impl Add for TokenUsage {
    type Output = TokenUsage;

    fn add(self, rhs: TokenUsage) -> TokenUsage {
        TokenUsage {
            prompt_tokens: self.prompt_tokens + rhs.prompt_tokens,
            completion_tokens: self.completion_tokens + rhs.completion_tokens,
        }
    }
}

impl AddAssign for TokenUsage {
    fn add_assign(&mut self, rhs: TokenUsage) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = TokenUsage>>(iter: I) -> Self {
        iter.fold(TokenUsage::ZERO, Add::add)
    }
}

/// Adds one response's usage to a running total.
pub fn accumulate(total: TokenUsage, response: &ChatResponse) -> TokenUsage {
    total + response.usage
}

/// Token estimate for providers that report no usage: ceil(bytes / 4).
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub turns: Vec<ChatTurn>,
    pub temperature: f64,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    pub max_output: u32,
}

impl ChatRequest {
    pub fn new(turns: Vec<ChatTurn>) -> Self {
        Self {
            turns,
            temperature: DEFAULT_TEMPERATURE,
            stop_sequences: Vec::new(),
            max_output: DEFAULT_MAX_OUTPUT,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_stop_sequences(mut self, stops: Vec<String>) -> Self {
        self.stop_sequences = stops;
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.turns.is_empty() {
            return Err(LlmError::InvalidRequest("request has no turns".into()));
        }
        if self.turns[0].role != ChatRole::System {
            return Err(LlmError::InvalidRequest(
                "first turn must be the system prompt".into(),
            ));
        }
        if !(self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Flat text form of the request. Scripted matchers and token estimates
    /// both operate on this rendering.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for turn in &self.turns {
            out.push_str("### ");
            out.push_str(turn.role.as_str());
            out.push('\n');
            out.push_str(&turn.content);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: TokenUsage,
    /// True when `usage` was estimated rather than reported by the provider.
    #[serde(default)]
    pub estimated: bool,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("scripted backend exhausted after {consumed} steps")]
    BackendExhausted { consumed: usize },
    #[error("scripted step {index} expected request containing {expected:?}")]
    MatcherMismatch { index: usize, expected: String },
    #[error("transport error after {attempts} attempts: {message}")]
    TransportError { attempts: u32, message: String },
    #[error("provider returned an unusable response: {0}")]
    BadResponse(String),
}

#[async_trait]
pub trait LlmBackend: Send + Sync {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

#[async_trait]
impl<T: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<T> {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulate_is_fieldwise() {
        let r = ChatResponse {
            text: "x".into(),
            usage: TokenUsage::new(10, 5),
            estimated: false,
        };
        assert_eq!(accumulate(TokenUsage::ZERO, &r), TokenUsage::new(10, 5));
        let total: TokenUsage = (1..=4).map(|i| TokenUsage::new(i, 2 * i)).sum();
        assert_eq!(total, TokenUsage::new(10, 20));
    }

    #[test]
    fn request_defaults_to_zero_temperature() {
        let req = ChatRequest::new(vec![ChatTurn::system("s")]);
        assert_eq!(req.temperature, 0.0);
        req.validate().unwrap();
    }

    #[test]
    fn request_validation() {
        assert!(ChatRequest::new(vec![]).validate().is_err());
        assert!(ChatRequest::new(vec![ChatTurn::user("hi")]).validate().is_err());
        let neg = ChatRequest::new(vec![ChatTurn::system("s")]).with_temperature(-0.1);
        assert!(neg.validate().is_err());
    }

    #[test]
    fn estimate_rounds_up() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcde"), 2);
    }
}
