use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{estimate_tokens, ChatRequest, ChatResponse, LlmBackend, LlmError, TokenUsage};

/// One scripted completion. `match` is a substring that must occur in the
/// rendered request; an empty matcher accepts anything. Missing token counts
/// are estimated from the actual request and response text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    #[serde(rename = "match", default)]
    pub matcher: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

impl ScriptStep {
    pub fn new(matcher: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            matcher: matcher.into(),
            response: response.into(),
            prompt_tokens: None,
            completion_tokens: None,
        }
    }

    pub fn with_usage(mut self, prompt: u64, completion: u64) -> Self {
        self.prompt_tokens = Some(prompt);
        self.completion_tokens = Some(completion);
        self
    }
}

#[derive(Debug, Default)]
struct ScriptState {
    pending: VecDeque<ScriptStep>,
    consumed: usize,
    requests: Vec<ChatRequest>,
}

/// Replays a fixed list of completions in order.
///
/// Running past the end of the script is an error, never a silent empty
/// completion.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    state: Mutex<ScriptState>,
}

impl ScriptedBackend {
    pub fn new(steps: impl IntoIterator<Item = ScriptStep>) -> Self {
        Self {
            state: Mutex::new(ScriptState {
                pending: steps.into_iter().collect(),
                ..Default::default()
            }),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let steps: Vec<ScriptStep> = serde_json::from_str(text)?;
        Ok(Self::new(steps))
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn remaining(&self) -> usize {
        self.state.lock().unwrap().pending.len()
    }

    pub fn consumed(&self) -> usize {
        self.state.lock().unwrap().consumed
    }

    /// Every request received so far, including ones that failed to match.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.state.lock().unwrap().requests.clone()
    }
}

#[async_trait]
impl LlmBackend for ScriptedBackend {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let rendered = request.render();
        let mut state = self.state.lock().unwrap();
        state.requests.push(request.clone());
        let index = state.consumed;
        let Some(step) = state.pending.front() else {
            return Err(LlmError::BackendExhausted { consumed: index });
        };
        if !rendered.contains(&step.matcher) {
            return Err(LlmError::MatcherMismatch {
                index,
                expected: step.matcher.clone(),
            });
        }
        let step = state.pending.pop_front().expect("front checked above");
        state.consumed += 1;

        let estimated = step.prompt_tokens.is_none() || step.completion_tokens.is_none();
        let usage = TokenUsage::new(
            step.prompt_tokens.unwrap_or_else(|| estimate_tokens(&rendered)),
            step.completion_tokens
                .unwrap_or_else(|| estimate_tokens(&step.response)),
        );
        Ok(ChatResponse {
            text: step.response,
            usage,
            estimated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ChatTurn;

    fn request(user: &str) -> ChatRequest {
        ChatRequest::new(vec![ChatTurn::system("sys"), ChatTurn::user(user)])
    }

    #[tokio::test]
    async fn matching_step_is_returned_with_usage() {
        let backend = ScriptedBackend::new([ScriptStep::new("hello", "world").with_usage(10, 5)]);
        let resp = backend.complete(&request("hello there")).await.unwrap();
        assert_eq!(resp.text, "world");
        assert_eq!(resp.usage, TokenUsage::new(10, 5));
        assert!(!resp.estimated);
        assert_eq!(backend.remaining(), 0);
    }

    #[tokio::test]
    async fn mismatch_names_expected_substring() {
        let backend = ScriptedBackend::new([ScriptStep::new("needle", "x")]);
        let err = backend.complete(&request("haystack")).await.unwrap_err();
        match err {
            LlmError::MatcherMismatch { index, expected } => {
                assert_eq!(index, 0);
                assert_eq!(expected, "needle");
            }
            other => panic!("unexpected {other:?}"),
        }
        // the step is not consumed on mismatch
        assert_eq!(backend.remaining(), 1);
    }

    #[tokio::test]
    async fn exhaustion_is_an_error() {
        let backend = ScriptedBackend::new([ScriptStep::new("", "only")]);
        backend.complete(&request("a")).await.unwrap();
        assert!(matches!(
            backend.complete(&request("b")).await,
            Err(LlmError::BackendExhausted { consumed: 1 })
        ));
    }

    #[tokio::test]
    async fn missing_usage_is_estimated_from_request() {
        let backend = ScriptedBackend::new([ScriptStep::new("", "abcdefgh")]);
        let req = request("q");
        let resp = backend.complete(&req).await.unwrap();
        assert!(resp.estimated);
        assert_eq!(resp.usage.completion_tokens, 2);
        assert_eq!(resp.usage.prompt_tokens, estimate_tokens(&req.render()));
    }

    #[test]
    fn script_json_shape() {
        let b = ScriptedBackend::from_json(
            r#"[{"match": "a", "response": "b", "prompt_tokens": 1, "completion_tokens": 2}]"#,
        )
        .unwrap();
        assert_eq!(b.remaining(), 1);
    }
}
