//! Step-policy selection and system-prompt assembly.
//!
//! Each reasoning phase runs under its own system prompt: the agent policy
//! (what the dialogue roles mean) plus a step template for Plan, Thought or
//! Code, with the current action space injected through `<<name>>`
//! placeholders.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::{RoundState, Trajectory, TrajectoryStatus};

/// Text substituted for an empty tool list, few-shot list or import list.
pub const EMPTY_SECTION: &str = "(none)";

pub const PH_AGENT_POLICY: &str = "agent_policy";
pub const PH_TOOL_DESCRIPTIONS: &str = "tool_descriptions";
pub const PH_FEW_SHOTS: &str = "few_shots";
pub const PH_AUTHORIZED_IMPORTS: &str = "authorized_imports";

/// The only placeholder names a template may use.
pub const PLACEHOLDERS: [&str; 4] = [
    PH_AGENT_POLICY,
    PH_TOOL_DESCRIPTIONS,
    PH_FEW_SHOTS,
    PH_AUTHORIZED_IMPORTS,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepPolicy {
    Plan,
    Thought,
    Code,
}

impl StepPolicy {
    pub const ALL: [StepPolicy; 3] = [StepPolicy::Plan, StepPolicy::Thought, StepPolicy::Code];

    pub fn as_str(self) -> &'static str {
        match self {
            StepPolicy::Plan => "plan",
            StepPolicy::Thought => "thought",
            StepPolicy::Code => "code",
        }
    }

    /// File name of the step template inside a prompt directory.
    pub fn template_file(self) -> &'static str {
        match self {
            StepPolicy::Plan => "plan.tmpl",
            StepPolicy::Thought => "thought.tmpl",
            StepPolicy::Code => "code.tmpl",
        }
    }
}

impl fmt::Display for StepPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const AGENT_POLICY_FILE: &str = "agent_policy.tmpl";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy requested for a trajectory in state {0}")]
    InvalidState(String),
    #[error("placeholder <<{0}>> has no value")]
    UnresolvedPlaceholder(String),
    #[error("no template registered for the {0} policy")]
    UnknownPolicy(StepPolicy),
    #[error("template for {template} registered under {key}")]
    PolicyMismatch { key: StepPolicy, template: StepPolicy },
    #[error("placeholder <<{0}>> appears more than once")]
    DuplicatePlaceholder(String),
    #[error("agent policy text is empty")]
    EmptyAgentPolicy,
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

/// A `<<...>>` occurrence in a template body.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Slot {
    start: usize,
    end: usize,
    name: String,
}

/// Every `<<` in the body starts a slot. The name runs to the next `>>`;
/// a `<<` with no closing `>>` is a slot whose name is the rest of the line.
fn find_slots(body: &str) -> Vec<Slot> {
    let mut slots = Vec::new();
    let mut pos = 0;
    while let Some(off) = body[pos..].find("<<") {
        let start = pos + off;
        let inner = start + 2;
        let line_end = body[inner..].find('\n').map_or(body.len(), |i| inner + i);
        match body[inner..line_end].find(">>") {
            Some(close) => {
                let end = inner + close + 2;
                slots.push(Slot {
                    start,
                    end,
                    name: body[inner..inner + close].to_string(),
                });
                pos = end;
            }
            None => {
                slots.push(Slot {
                    start,
                    end: line_end,
                    name: body[inner..line_end].to_string(),
                });
                pos = line_end;
            }
        }
    }
    slots
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    policy: StepPolicy,
    body: String,
    slots: Vec<Slot>,
}

impl PromptTemplate {
    /// Each known placeholder may appear at most once. Unknown names are kept
    /// and reported at assembly time.
    pub fn new(policy: StepPolicy, body: impl Into<String>) -> Result<Self, PolicyError> {
        let body = body.into();
        let slots = find_slots(&body);
        for (i, slot) in slots.iter().enumerate() {
            if slots[..i].iter().any(|s| s.name == slot.name) {
                return Err(PolicyError::DuplicatePlaceholder(slot.name.clone()));
            }
        }
        Ok(Self {
            policy,
            body,
            slots,
        })
    }

    pub fn policy(&self) -> StepPolicy {
        self.policy
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    pub fn unknown_placeholders(&self) -> Vec<&str> {
        self.placeholders()
            .filter(|n| !PLACEHOLDERS.contains(n))
            .collect()
    }

    /// Total bytes taken by placeholder tokens in the body.
    pub fn placeholder_len(&self) -> usize {
        self.slots.iter().map(|s| s.end - s.start).sum()
    }

    /// Single-pass substitution: injected text is copied verbatim and never
    /// re-scanned for placeholders.
    fn render(&self, values: &HashMap<&str, String>) -> Result<String, PolicyError> {
        let mut out = String::with_capacity(self.body.len());
        let mut pos = 0;
        for slot in &self.slots {
            let value = values
                .get(slot.name.as_str())
                .ok_or_else(|| PolicyError::UnresolvedPlaceholder(slot.name.clone()))?;
            out.push_str(&self.body[pos..slot.start]);
            out.push_str(value);
            pos = slot.end;
        }
        out.push_str(&self.body[pos..]);
        Ok(out)
    }
}

/// Global prompt section explaining the dialogue roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentPolicy(String);

impl AgentPolicy {
    pub fn new(body: impl Into<String>) -> Result<Self, PolicyError> {
        let body = body.into();
        if body.trim().is_empty() {
            return Err(PolicyError::EmptyAgentPolicy);
        }
        Ok(Self(body))
    }

    pub fn shipped() -> Self {
        Self(SHIPPED_AGENT_POLICY.trim_end().to_string())
    }

    pub fn body(&self) -> &str {
        &self.0
    }
}

const SHIPPED_PLAN: &str = include_str!("../../../config/prompts/plan.tmpl");
const SHIPPED_THOUGHT: &str = include_str!("../../../config/prompts/thought.tmpl");
const SHIPPED_CODE: &str = include_str!("../../../config/prompts/code.tmpl");
const SHIPPED_AGENT_POLICY: &str = include_str!("../../../config/prompts/agent_policy.tmpl");

/// Step templates keyed by policy. Written once at startup, then read.
#[derive(Debug, Clone, Default)]
pub struct TemplateRegistry {
    templates: HashMap<StepPolicy, PromptTemplate>,
}

impl TemplateRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The three built-in step templates.
    pub fn shipped() -> Self {
        let mut reg = Self::new();
        for (policy, body) in [
            (StepPolicy::Plan, SHIPPED_PLAN),
            (StepPolicy::Thought, SHIPPED_THOUGHT),
            (StepPolicy::Code, SHIPPED_CODE),
        ] {
            let template = PromptTemplate::new(policy, body).expect("shipped template is valid");
            reg.register_template(policy, template)
                .expect("policy matches");
        }
        reg
    }

    /// Loads `plan.tmpl`, `thought.tmpl`, `code.tmpl` and `agent_policy.tmpl`.
    pub fn load_dir(dir: &Path) -> Result<(Self, AgentPolicy), PolicyError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|e| PolicyError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        };
        let mut reg = Self::new();
        for policy in StepPolicy::ALL {
            let template = PromptTemplate::new(policy, read(policy.template_file())?)?;
            reg.register_template(policy, template)?;
        }
        let agent = AgentPolicy::new(read(AGENT_POLICY_FILE)?.trim_end())?;
        Ok((reg, agent))
    }

    pub fn register_template(
        &mut self,
        policy: StepPolicy,
        template: PromptTemplate,
    ) -> Result<(), PolicyError> {
        if template.policy != policy {
            return Err(PolicyError::PolicyMismatch {
                key: policy,
                template: template.policy,
            });
        }
        self.templates.insert(policy, template);
        Ok(())
    }

    pub fn get(&self, policy: StepPolicy) -> Option<&PromptTemplate> {
        self.templates.get(&policy)
    }

    /// Builds the system prompt for one step. Empty sections are replaced by
    /// [`EMPTY_SECTION`]; the imports are joined with ", ".
    pub fn assemble_system_prompt(
        &self,
        policy: StepPolicy,
        agent_policy: &AgentPolicy,
        tool_descriptions: &str,
        few_shots: &str,
        authorized_imports: &[String],
    ) -> Result<String, PolicyError> {
        let template = self
            .templates
            .get(&policy)
            .ok_or(PolicyError::UnknownPolicy(policy))?;
        let or_empty = |s: &str| {
            if s.trim().is_empty() {
                EMPTY_SECTION.to_string()
            } else {
                s.to_string()
            }
        };
        let values = HashMap::from([
            (PH_AGENT_POLICY, agent_policy.body().to_string()),
            (PH_TOOL_DESCRIPTIONS, or_empty(tool_descriptions)),
            (PH_FEW_SHOTS, or_empty(few_shots)),
            (PH_AUTHORIZED_IMPORTS, or_empty(&authorized_imports.join(", "))),
        ]);
        template.render(&values)
    }
}

/// Chooses the policy for the next completion.
///
/// Plan when no plan exists yet or the reviewer asked for a revision;
/// otherwise Thought for a fresh round and Code once the round has a thought.
pub fn next_policy(trajectory: &Trajectory) -> Result<StepPolicy, PolicyError> {
    if trajectory.status() != TrajectoryStatus::Running {
        return Err(PolicyError::InvalidState(format!("{:?}", trajectory.status())));
    }
    if trajectory.global_plan().is_none() || trajectory.revise_plan_requested() {
        return Ok(StepPolicy::Plan);
    }
    match trajectory.round_state() {
        RoundState::Open | RoundState::Complete => Ok(StepPolicy::Thought),
        RoundState::Thought => Ok(StepPolicy::Code),
        RoundState::CodePending => Err(PolicyError::InvalidState(
            "code awaiting review or execution".into(),
        )),
    }
}
