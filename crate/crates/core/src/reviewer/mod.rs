//! Path reviewer: turns executor failures into guidance, rewrites queries and
//! answers, and vets code before it runs.

pub mod numbers;
pub mod rewrite;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{Message, Role, Trajectory};
use crate::llm::{ChatRequest, ChatTurn, LlmBackend, TokenUsage};

pub use rewrite::{rewrite_answer, rewrite_query, AnswerRule, RewriteRules};

/// Error class of the hint appended after a backtrack.
pub const CLASS_BACKTRACK: &str = "backtrack";
/// Error class of the hint appended when the plan must be revised.
pub const CLASS_REVISE_PLAN: &str = "revise-plan";
pub const CLASS_REJECTED_CODE: &str = "rejected-code";
pub const CLASS_MALFORMED_OUTPUT: &str = "malformed-output";
pub const CLASS_UNKNOWN: &str = "unknown";

pub const DEFAULT_ERROR_WINDOW: usize = 2;

const SHIPPED_RULES: &str = include_str!("../../../../config/error_rules.json");

#[derive(Debug, Error)]
pub enum ReviewerError {
    #[error("error-rule table has no \"default\" entry")]
    MissingDefaultRule,
    #[error("rule {0:?} has an empty cause or solution")]
    EmptyRule(String),
    #[error("trigger {0:?}: {1}")]
    InvalidTrigger(String, String),
    #[error("reading {path}: {message}")]
    Load { path: String, message: String },
}

/// A failure reported by the executor, before it becomes an error message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub error_class: String,
    pub message: String,
}

impl Failure {
    pub fn new(error_class: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            error_class: error_class.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRule {
    pub cause: String,
    pub solution: String,
}

/// Error class → cause/solution guidance, with a mandatory fallback.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleTable {
    rules: BTreeMap<String, ErrorRule>,
}

impl RuleTable {
    pub fn new(rules: BTreeMap<String, ErrorRule>) -> Result<Self, ReviewerError> {
        if !rules.contains_key("default") {
            return Err(ReviewerError::MissingDefaultRule);
        }
        for (class, rule) in &rules {
            if rule.cause.trim().is_empty() || rule.solution.trim().is_empty() {
                return Err(ReviewerError::EmptyRule(class.clone()));
            }
        }
        Ok(Self { rules })
    }

    pub fn from_json(text: &str) -> Result<Self, ReviewerError> {
        let rules = serde_json::from_str(text).map_err(|e| ReviewerError::Load {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        Self::new(rules)
    }

    pub fn load(path: &Path) -> Result<Self, ReviewerError> {
        let text = std::fs::read_to_string(path).map_err(|e| ReviewerError::Load {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|e| match e {
            ReviewerError::Load { message, .. } => ReviewerError::Load {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn shipped() -> Self {
        Self::from_json(SHIPPED_RULES).expect("shipped error rules are valid")
    }

    pub fn rule_for(&self, class: &str) -> &ErrorRule {
        self.rules
            .get(class)
            .unwrap_or_else(|| &self.rules["default"])
    }
}

/// Structured content of an error-role message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorRecord {
    pub step_index: u32,
    pub error_class: String,
    pub message: String,
    pub cause_hint: String,
    pub solution_hint: String,
}

impl ErrorRecord {
    pub fn render(&self) -> String {
        format!(
            "Error ({}): {}\nPossible cause: {}\nSuggested solution: {}",
            self.error_class, self.message, self.cause_hint, self.solution_hint
        )
    }

    /// Inverse of [`render`](Self::render). Messages written by other tools
    /// parse with an `unknown` class and the whole text as message.
    pub fn parse(step_index: u32, content: &str) -> ErrorRecord {
        let fallback = || ErrorRecord {
            step_index,
            error_class: CLASS_UNKNOWN.into(),
            message: content.to_string(),
            cause_hint: String::new(),
            solution_hint: String::new(),
        };
        let Some(rest) = content.strip_prefix("Error (") else {
            return fallback();
        };
        let Some((class, rest)) = rest.split_once("): ") else {
            return fallback();
        };
        let (message, hints) = match rest.rfind("\nPossible cause: ") {
            Some(i) => (&rest[..i], &rest[i + "\nPossible cause: ".len()..]),
            None => (rest, ""),
        };
        let (cause, solution) = hints
            .split_once("\nSuggested solution: ")
            .unwrap_or((hints, ""));
        ErrorRecord {
            step_index,
            error_class: class.to_string(),
            message: message.to_string(),
            cause_hint: cause.to_string(),
            solution_hint: solution.to_string(),
        }
    }

    pub fn into_message(self) -> Message {
        let content = self.render();
        Message::new(Role::Error, content, self.step_index)
    }
}

/// Maps any executor failure to an error-role message. Never fails.
pub fn handle_exception(failure: &Failure, step: u32, rules: &RuleTable) -> Message {
    let class = failure.error_class.trim();
    let class = if class.is_empty() { CLASS_UNKNOWN } else { class };
    let rule = rules.rule_for(class);
    let message = if failure.message.trim().is_empty() {
        "(no message)".to_string()
    } else {
        failure.message.clone()
    };
    ErrorRecord {
        step_index: step,
        error_class: class.to_string(),
        message,
        cause_hint: rule.cause.clone(),
        solution_hint: rule.solution.clone(),
    }
    .into_message()
}

/// Error message for a hint issued by the reviewer itself.
pub fn hint_message(class: &str, hint: &str, step: u32, rules: &RuleTable) -> Message {
    handle_exception(&Failure::new(class, hint), step, rules)
}

fn normalizers() -> &'static [(Regex, &'static str); 3] {
    static RE: OnceLock<[(Regex, &'static str); 3]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            (Regex::new(r"0x[0-9a-fA-F]+").unwrap(), "0x"),
            (Regex::new(r"(?i)\bline \d+").unwrap(), "line"),
            (Regex::new(r"\s+").unwrap(), " "),
        ]
    })
}

/// Strips memory addresses, line numbers and whitespace differences.
pub fn normalize_error_message(message: &str) -> String {
    let mut s = message.to_string();
    for (re, rep) in normalizers() {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.trim().to_string()
}

fn is_barrier(class: &str) -> bool {
    class == CLASS_BACKTRACK || class == CLASS_REVISE_PLAN
}

/// Backtrack target when the trailing errors repeat.
///
/// Looks at the last error of each step after the most recent reviewer hint.
/// The trailing run of errors on consecutive steps with identical class and
/// normalised message is extended as far back as it goes; when it is at least
/// `window` long the target is the step before its first error. A successful
/// observation after the last error means there is no trailing run.
pub fn detect_repeated_error(trajectory: &Trajectory, window: usize) -> Option<u32> {
    let window = window.max(2);
    let msgs = trajectory.messages();
    let after_barrier = msgs
        .iter()
        .rposition(|m| m.role == Role::Error && is_barrier(&ErrorRecord::parse(m.step_index, &m.content).error_class))
        .map_or(0, |i| i + 1);

    let mut per_step: Vec<(u32, String, String)> = Vec::new();
    for m in &msgs[after_barrier..] {
        if m.role != Role::Error {
            continue;
        }
        let rec = ErrorRecord::parse(m.step_index, &m.content);
        let key = (m.step_index, rec.error_class, normalize_error_message(&rec.message));
        match per_step.last_mut() {
            Some(last) if last.0 == m.step_index => *last = key,
            _ => per_step.push(key),
        }
    }

    let (_, class, msg) = per_step.last()?.clone();
    let last_error = msgs.iter().rposition(|m| m.role == Role::Error)?;
    if msgs[last_error..].iter().any(|m| m.role == Role::Observation) {
        return None;
    }
    let mut start = per_step.len() - 1;
    while start > 0 {
        let prev = &per_step[start - 1];
        if prev.0 + 1 == per_step[start].0 && prev.1 == class && prev.2 == msg {
            start -= 1;
        } else {
            break;
        }
    }
    let run = per_step.len() - start;
    if run < window {
        return None;
    }
    per_step[start].0.checked_sub(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerKind {
    Keyword,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trigger {
    pub id: String,
    pub kind: TriggerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub hint: String,
}

impl Trigger {
    pub fn keyword(id: impl Into<String>, pattern: impl Into<String>, hint: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind: TriggerKind::Keyword,
            pattern: Some(pattern.into()),
            prompt: None,
            hint: hint.into(),
        }
    }

    pub fn model(id: impl Into<String>, prompt: impl Into<String>, hint: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind: TriggerKind::Model,
            pattern: None,
            prompt: Some(prompt.into()),
            hint: hint.into(),
        }
    }

    fn validate(&self) -> Result<(), ReviewerError> {
        let field = match self.kind {
            TriggerKind::Keyword => &self.pattern,
            TriggerKind::Model => &self.prompt,
        };
        if field.as_deref().is_none_or(|s| s.is_empty()) {
            let what = match self.kind {
                TriggerKind::Keyword => "keyword trigger needs a non-empty pattern",
                TriggerKind::Model => "model trigger needs a non-empty prompt",
            };
            return Err(ReviewerError::InvalidTrigger(self.id.clone(), what.into()));
        }
        if self.hint.trim().is_empty() {
            return Err(ReviewerError::InvalidTrigger(self.id.clone(), "empty hint".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TriggerSet {
    triggers: Vec<Trigger>,
}

impl TriggerSet {
    pub fn new(triggers: Vec<Trigger>) -> Result<Self, ReviewerError> {
        for t in &triggers {
            t.validate()?;
        }
        Ok(Self { triggers })
    }

    pub fn load(path: &Path) -> Result<Self, ReviewerError> {
        let load_err = |message: String| ReviewerError::Load {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let triggers = serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
        Self::new(triggers)
    }

    pub fn triggers(&self) -> &[Trigger] {
        &self.triggers
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReviewDecision {
    Accept,
    Reject { hint: String },
    Backtrack { to_step: u32, hint: String },
    RevisePlan { hint: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewOutcome {
    pub decision: ReviewDecision,
    /// Usage of model-trigger judgements.
    pub usage: TokenUsage,
    /// Model triggers skipped because the backend failed.
    pub audit: Vec<String>,
}

const JUDGE_SYSTEM: &str = "You check a code snippet against a condition before it runs. \
Reply with YES if the code meets the condition and NO otherwise. Reply with one word.";

const BACKTRACK_HINT: &str = "The same error occurred in consecutive steps, so those steps were \
discarded. Do not repeat the failing code; take a different approach.";

const REVISE_PLAN_HINT: &str = "Returning to the earlier step did not help: the same error came \
back. The current plan looks wrong; write a revised plan.";

/// Reviews a parsed code action before execution.
///
/// Keyword triggers come first, then model triggers (skipped on backend
/// failure), then the repeated-error check. A backtrack to a step already
/// backtracked to is escalated to a plan revision.
pub async fn reflect_code(
    code: &str,
    trajectory: &Trajectory,
    triggers: &TriggerSet,
    backend: &dyn LlmBackend,
    window: usize,
) -> ReviewOutcome {
    let mut usage = TokenUsage::ZERO;
    let mut audit = Vec::new();
    let done = |decision, usage, audit| ReviewOutcome { decision, usage, audit };

    for t in triggers.triggers.iter().filter(|t| t.kind == TriggerKind::Keyword) {
        if t.pattern.as_deref().is_some_and(|p| code.contains(p)) {
            return done(ReviewDecision::Reject { hint: t.hint.clone() }, usage, audit);
        }
    }
    for t in triggers.triggers.iter().filter(|t| t.kind == TriggerKind::Model) {
        let prompt = t.prompt.as_deref().unwrap_or_default();
        let request = ChatRequest::new(vec![
            ChatTurn::system(JUDGE_SYSTEM),
            ChatTurn::user(format!("Condition: {prompt}\n<code>\n{code}\n</code>")),
        ]);
        match backend.complete(&request).await {
            Ok(resp) => {
                usage += resp.usage;
                if resp.text.trim_start().to_ascii_uppercase().starts_with("YES") {
                    return done(ReviewDecision::Reject { hint: t.hint.clone() }, usage, audit);
                }
            }
            Err(e) => audit.push(format!("trigger {} skipped: {e}", t.id)),
        }
    }
    if let Some(target) = detect_repeated_error(trajectory, window) {
        let decision = if trajectory.backtracks().iter().any(|b| b.to_step == target) {
            ReviewDecision::RevisePlan {
                hint: REVISE_PLAN_HINT.into(),
            }
        } else {
            ReviewDecision::Backtrack {
                to_step: target,
                hint: BACKTRACK_HINT.into(),
            }
        };
        return done(decision, usage, audit);
    }
    done(ReviewDecision::Accept, usage, audit)
}
