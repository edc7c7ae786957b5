//! Trajectory data model, model-output tag parsing, history rendering and the
//! JSON-lines trajectory log.
//!
//! A trajectory is a list of role-tagged messages grouped by step. Step 0
//! holds the query and the initial plan; each later step is one reasoning
//! round of `thought -> code -> observation|error`.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::llm::{ChatRole, ChatTurn, TokenUsage};
use crate::policy::StepPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    Query,
    Plan,
    Thought,
    Code,
    Observation,
    Error,
    Answer,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::Query => "query",
            Role::Plan => "plan",
            Role::Thought => "thought",
            Role::Code => "code",
            Role::Observation => "observation",
            Role::Error => "error",
            Role::Answer => "answer",
        }
    }

    /// Position in the per-step action order, for roles that take part in it.
    fn action_rank(self) -> Option<u8> {
        match self {
            Role::Thought => Some(0),
            Role::Code => Some(1),
            Role::Observation => Some(2),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One line of a trajectory log: `{"role", "content", "step", "tokens"?}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    #[serde(rename = "step")]
    pub step_index: u32,
    /// Usage of the completion(s) that produced this message. Logs written by
    /// hand may carry a bare integer, read as completion tokens.
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "deserialize_tokens"
    )]
    pub tokens: Option<TokenUsage>,
}

fn deserialize_tokens<'de, D: Deserializer<'de>>(d: D) -> Result<Option<TokenUsage>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Count(u64),
        Split(TokenUsage),
    }
    Ok(match Option::<Repr>::deserialize(d)? {
        None => None,
        Some(Repr::Count(n)) => Some(TokenUsage::new(0, n)),
        Some(Repr::Split(u)) => Some(u),
    })
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>, step_index: u32) -> Self {
        Self {
            role,
            content: content.into(),
            step_index,
            tokens: None,
        }
    }

    pub fn with_tokens(mut self, usage: TokenUsage) -> Self {
        self.tokens = Some(usage);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStatus {
    Running,
    Answered,
    Failed,
    StepLimit,
}

/// A backtrack applied to the trajectory. Survives truncation so repeated
/// backtracks to the same step can be recognised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BacktrackEvent {
    pub from_step: u32,
    pub to_step: u32,
}

/// Progress of the reasoning round at the trajectory's latest step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoundState {
    /// No thought yet in this step.
    Open,
    /// Thought present, no code yet.
    Thought,
    /// Code present and not yet executed or reviewed.
    CodePending,
    /// Code followed by an observation or error.
    Complete,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConversationError {
    #[error("message at step {got} precedes the trajectory's step {last}")]
    OrderViolation { last: u32, got: u32 },
    #[error("{role} message at step {step} breaks the thought -> code -> observation order")]
    RoleOrder { role: Role, step: u32 },
    #[error("{role} message at step {step} has empty content")]
    EmptyContent { role: Role, step: u32 },
    #[error("truncation step {step} outside 0..={max}")]
    OutOfRange { step: i64, max: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    messages: Vec<Message>,
    global_plan: Option<String>,
    step_count: u32,
    status: TrajectoryStatus,
    usage: TokenUsage,
    #[serde(default)]
    revise_plan: bool,
    #[serde(default)]
    backtracks: Vec<BacktrackEvent>,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self::new()
    }
}

impl Trajectory {
    pub fn new() -> Self {
        Self {
            messages: Vec::new(),
            global_plan: None,
            step_count: 0,
            status: TrajectoryStatus::Running,
            usage: TokenUsage::ZERO,
            revise_plan: false,
            backtracks: Vec::new(),
        }
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn global_plan(&self) -> Option<&str> {
        self.global_plan.as_deref()
    }

    pub fn step_count(&self) -> u32 {
        self.step_count
    }

    pub fn status(&self) -> TrajectoryStatus {
        self.status
    }

    pub fn set_status(&mut self, status: TrajectoryStatus) {
        self.status = status;
    }

    pub fn usage(&self) -> TokenUsage {
        self.usage
    }

    /// Charges usage that no message carries. Prefer attaching usage to the
    /// message the completion produced.
    pub fn charge(&mut self, usage: TokenUsage) {
        self.usage += usage;
    }

    pub fn revise_plan_requested(&self) -> bool {
        self.revise_plan
    }

    pub fn request_plan_revision(&mut self) {
        self.revise_plan = true;
    }

    pub fn backtracks(&self) -> &[BacktrackEvent] {
        &self.backtracks
    }

    pub fn record_backtrack(&mut self, event: BacktrackEvent) {
        self.backtracks.push(event);
    }

    /// Appends a message, enforcing step monotonicity and the per-step
    /// action order. Plan messages also replace the global plan and clear a
    /// pending revision request.
    pub fn append_message(&mut self, message: Message) -> Result<(), ConversationError> {
        if let Some(last) = self.messages.last() {
            if message.step_index < last.step_index {
                return Err(ConversationError::OrderViolation {
                    last: last.step_index,
                    got: message.step_index,
                });
            }
        }
        if message.content.is_empty() && message.role != Role::Answer {
            return Err(ConversationError::EmptyContent {
                role: message.role,
                step: message.step_index,
            });
        }
        if let Some(rank) = message.role.action_rank() {
            let prev_rank = self
                .messages
                .iter()
                .rev()
                .take_while(|m| m.step_index == message.step_index)
                .filter_map(|m| m.role.action_rank())
                .next();
            let expected = prev_rank.map_or(0, |r| r + 1);
            if rank != expected {
                return Err(ConversationError::RoleOrder {
                    role: message.role,
                    step: message.step_index,
                });
            }
        }

        if let Some(tokens) = message.tokens {
            self.usage += tokens;
        }
        if message.role == Role::Plan {
            self.global_plan = Some(message.content.clone());
            self.revise_plan = false;
        }
        self.step_count = self.step_count.max(message.step_index);
        self.messages.push(message);
        Ok(())
    }

    /// Keeps exactly the messages with `step_index <= step`. Status resets to
    /// running; token usage is not reduced.
    pub fn truncate_to_step(&self, step: i64) -> Result<Trajectory, ConversationError> {
        if step < 0 || step > i64::from(self.step_count) {
            return Err(ConversationError::OutOfRange {
                step,
                max: self.step_count,
            });
        }
        let step = step as u32;
        let messages: Vec<Message> = self
            .messages
            .iter()
            .filter(|m| m.step_index <= step)
            .cloned()
            .collect();
        let global_plan = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::Plan)
            .map(|m| m.content.clone());
        let step_count = messages.iter().map(|m| m.step_index).max().unwrap_or(0);
        Ok(Trajectory {
            messages,
            global_plan,
            step_count,
            status: TrajectoryStatus::Running,
            usage: self.usage,
            revise_plan: self.revise_plan,
            backtracks: self.backtracks.clone(),
        })
    }

    /// Messages belonging to the latest step.
    pub fn current_step_messages(&self) -> &[Message] {
        let start = self
            .messages
            .iter()
            .rposition(|m| m.step_index != self.step_count)
            .map_or(0, |i| i + 1);
        &self.messages[start..]
    }

    pub fn round_state(&self) -> RoundState {
        if self.step_count == 0 {
            return RoundState::Open;
        }
        let current = self.current_step_messages();
        let Some(code_at) = current.iter().rposition(|m| m.role == Role::Code) else {
            return if current.iter().any(|m| m.role == Role::Thought) {
                RoundState::Thought
            } else {
                RoundState::Open
            };
        };
        let resolved = current[code_at + 1..]
            .iter()
            .any(|m| matches!(m.role, Role::Observation | Role::Error));
        if resolved {
            RoundState::Complete
        } else {
            RoundState::CodePending
        }
    }

    /// Step index for a message that opens a round (hint, revised plan or
    /// thought): the current step while it has no thought yet, otherwise the
    /// next one. Step 0 is reserved for the query and initial plan.
    pub fn opening_step(&self) -> u32 {
        let has_thought = self
            .current_step_messages()
            .iter()
            .any(|m| m.role == Role::Thought);
        if self.step_count == 0 || has_thought {
            self.step_count + 1
        } else {
            self.step_count
        }
    }

    /// The query message content (rewritten query when rewriting is on).
    pub fn query(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::Query)
            .map(|m| m.content.as_str())
    }

    pub fn latest(&self, role: Role) -> Option<&Message> {
        self.messages.iter().rev().find(|m| m.role == role)
    }

    pub fn answer(&self) -> Option<&str> {
        self.latest(Role::Answer).map(|m| m.content.as_str())
    }

    /// Renders the history as backend chat turns.
    pub fn render_history(&self, format: HistoryFormat) -> Vec<ChatTurn> {
        self.messages
            .iter()
            .map(|m| render_message(m, format))
            .collect()
    }
}

/// How observations are presented to the backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryFormat {
    /// Observations and errors as user turns.
    #[default]
    UserTurns,
    /// Observations as tool turns; errors stay user turns.
    ToolTurns,
}

fn render_message(message: &Message, format: HistoryFormat) -> ChatTurn {
    let content = message.content.as_str();
    match message.role {
        Role::System => ChatTurn::new(ChatRole::System, content),
        Role::Query => ChatTurn::new(ChatRole::User, content),
        Role::Plan => ChatTurn::new(ChatRole::Assistant, format!("<plan>\n{content}\n</plan>")),
        Role::Thought => ChatTurn::new(ChatRole::Assistant, format!("<thought>{content}</thought>")),
        Role::Code => ChatTurn::new(ChatRole::Assistant, format!("<code>\n{content}\n</code>")),
        Role::Observation => {
            let role = match format {
                HistoryFormat::UserTurns => ChatRole::User,
                HistoryFormat::ToolTurns => ChatRole::Tool,
            };
            ChatTurn::new(role, format!("<observation>{content}</observation>"))
        }
        Role::Error => ChatTurn::new(ChatRole::User, format!("<error>{content}</error>")),
        Role::Answer => ChatTurn::new(ChatRole::Assistant, content),
    }
}

// ---------------------------------------------------------------------------
// model output parsing

/// Tag-delimited fields extracted from one completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutput {
    pub thought: Option<String>,
    pub code: Option<String>,
    /// Plan text for Plan-policy completions: the `<plan>` block when present,
    /// otherwise the whole trimmed completion.
    pub plan: Option<String>,
    pub raw: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no <{tag}> block found in model output")]
    MalformedOutput { tag: &'static str, raw: String },
    #[error("nested or interleaved tags at byte {position}")]
    NestedTag { position: usize, raw: String },
}

impl ParseError {
    pub fn raw(&self) -> &str {
        match self {
            ParseError::MalformedOutput { raw, .. } | ParseError::NestedTag { raw, .. } => raw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Thought,
    Code,
    Plan,
}

impl Tag {
    const ALL: [Tag; 3] = [Tag::Thought, Tag::Code, Tag::Plan];

    fn name(self) -> &'static str {
        match self {
            Tag::Thought => "thought",
            Tag::Code => "code",
            Tag::Plan => "plan",
        }
    }
}

/// Finds the tag token starting at `pos`, if any: `(tag, is_close, len)`.
fn tag_at(raw: &str, pos: usize) -> Option<(Tag, bool, usize)> {
    let rest = &raw[pos..];
    let (close, body) = match rest.strip_prefix("</") {
        Some(b) => (true, b),
        None => (false, rest.strip_prefix('<')?),
    };
    Tag::ALL.into_iter().find_map(|tag| {
        let name = tag.name();
        if body.starts_with(name) && body[name.len()..].starts_with('>') {
            let len = name.len() + if close { 3 } else { 2 };
            Some((tag, close, len))
        } else {
            None
        }
    })
}

/// First complete block per tag. Any tag opened inside another block is a
/// nesting error; stray closing tags and unclosed trailing blocks are ignored.
fn scan_blocks(raw: &str) -> Result<[Option<(usize, usize)>; 3], ParseError> {
    let mut first: [Option<(usize, usize)>; 3] = [None; 3];
    let mut open: Option<(Tag, usize)> = None;
    let mut pos = 0;
    while let Some(off) = raw[pos..].find('<') {
        let at = pos + off;
        match tag_at(raw, at) {
            Some((tag, is_close, len)) => {
                match (open, is_close) {
                    (None, false) => open = Some((tag, at + len)),
                    (None, true) => {}
                    (Some((current, start)), true) if current == tag => {
                        let slot = &mut first[tag as usize];
                        if slot.is_none() {
                            *slot = Some((start, at));
                        }
                        open = None;
                    }
                    (Some(_), _) => {
                        return Err(ParseError::NestedTag {
                            position: at,
                            raw: raw.to_string(),
                        })
                    }
                }
                pos = at + len;
            }
            None => pos = at + 1,
        }
    }
    Ok(first)
}

/// Extracts the first well-formed `<thought>`/`<code>` blocks. The block the
/// policy expects must be present; the other one is kept when found.
pub fn parse_model_output(raw: &str, expected: StepPolicy) -> Result<StepOutput, ParseError> {
    let blocks = scan_blocks(raw)?;
    let take = |tag: Tag| blocks[tag as usize].map(|(s, e)| raw[s..e].trim().to_string());
    let thought = take(Tag::Thought);
    let code = take(Tag::Code);
    let mut plan = take(Tag::Plan);

    let missing = |tag: Tag| ParseError::MalformedOutput {
        tag: tag.name(),
        raw: raw.to_string(),
    };
    match expected {
        StepPolicy::Thought if thought.is_none() => return Err(missing(Tag::Thought)),
        StepPolicy::Code if code.is_none() => return Err(missing(Tag::Code)),
        StepPolicy::Plan => {
            if plan.is_none() {
                let trimmed = raw.trim();
                if trimmed.is_empty() {
                    return Err(missing(Tag::Plan));
                }
                plan = Some(trimmed.to_string());
            }
        }
        _ => {}
    }
    Ok(StepOutput {
        thought,
        code,
        plan,
        raw: raw.to_string(),
    })
}

/// Appends the closing tag a provider may have swallowed as a stop sequence.
pub fn close_stopped_tag(raw: &str, policy: StepPolicy) -> String {
    let tag = match policy {
        StepPolicy::Thought => "thought",
        StepPolicy::Code => "code",
        StepPolicy::Plan => return raw.to_string(),
    };
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    match raw.rfind(&open) {
        Some(at) if !raw[at..].contains(&close) => format!("{raw}{close}"),
        _ => raw.to_string(),
    }
}

// ---------------------------------------------------------------------------
// JSON-lines log

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_log<W: Write>(mut out: W, messages: &[Message]) -> std::io::Result<()> {
    for m in messages {
        serde_json::to_writer(&mut out, m)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a log. Blank lines are skipped; an input with no messages is an
/// error at line 1.
pub fn read_log<R: BufRead>(input: R) -> Result<Vec<Message>, LogError> {
    let mut messages = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let message: Message = serde_json::from_str(&line).map_err(|e| LogError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        messages.push(message);
    }
    if messages.is_empty() {
        return Err(LogError::Parse {
            line: 1,
            message: "log contains no messages".into(),
        });
    }
    Ok(messages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn msg(role: Role, content: &str, step: u32) -> Message {
        Message::new(role, content, step)
    }

    /// query + plan at step 0, then `rounds` complete thought/code/observation rounds.
    fn sample(rounds: u32) -> Trajectory {
        let mut t = Trajectory::new();
        t.append_message(msg(Role::Query, "q", 0)).unwrap();
        t.append_message(msg(Role::Plan, "p", 0).with_tokens(TokenUsage::new(3, 1)))
            .unwrap();
        for s in 1..=rounds {
            t.append_message(msg(Role::Thought, &format!("t{s}"), s)).unwrap();
            t.append_message(msg(Role::Code, &format!("print({s})"), s)).unwrap();
            t.append_message(msg(Role::Observation, &format!("{s}"), s)).unwrap();
        }
        t
    }

    #[test]
    fn parse_single_tags() {
        let out = parse_model_output("<thought>use tool A</thought>", StepPolicy::Thought).unwrap();
        assert_eq!(out.thought.as_deref(), Some("use tool A"));
        assert_eq!(out.code, None);
        let out = parse_model_output("<code>print(1)</code>", StepPolicy::Code).unwrap();
        assert_eq!(out.code.as_deref(), Some("print(1)"));
    }

    #[test]
    fn parse_missing_tag_is_malformed() {
        let err = parse_model_output("no tags here", StepPolicy::Code).unwrap_err();
        assert!(matches!(err, ParseError::MalformedOutput { tag: "code", .. }));
        assert_eq!(err.raw(), "no tags here");
    }

    #[test]
    fn parse_nested_and_interleaved() {
        assert!(matches!(
            parse_model_output("<thought>a<code>b</code></thought>", StepPolicy::Thought),
            Err(ParseError::NestedTag { position: 10, .. })
        ));
        assert!(matches!(
            parse_model_output("<thought>a<code>b</thought></code>", StepPolicy::Thought),
            Err(ParseError::NestedTag { .. })
        ));
    }

    #[test]
    fn parse_is_case_sensitive() {
        assert!(parse_model_output("<Thought>x</Thought>", StepPolicy::Thought).is_err());
    }

    #[test]
    fn parse_keeps_both_blocks_and_inner_bytes() {
        let raw = "  <thought> look up </thought>\n<code>\n  x = f('a')\n  print(x)\n</code> ";
        let out = parse_model_output(raw, StepPolicy::Code).unwrap();
        assert_eq!(out.thought.as_deref(), Some("look up"));
        assert_eq!(out.code.as_deref(), Some("x = f('a')\n  print(x)"));
        assert_eq!(out.raw, raw);
    }

    #[test]
    fn parse_plan_falls_back_to_raw() {
        let out = parse_model_output("\n1. use get_x\n2. answer\n", StepPolicy::Plan).unwrap();
        assert_eq!(out.plan.as_deref(), Some("1. use get_x\n2. answer"));
        let out = parse_model_output("<plan>a</plan> trailing", StepPolicy::Plan).unwrap();
        assert_eq!(out.plan.as_deref(), Some("a"));
        assert!(parse_model_output("   ", StepPolicy::Plan).is_err());
    }

    #[test]
    fn stray_close_and_unclosed_tail_are_ignored() {
        let out = parse_model_output("</thought><thought>x</thought><code>y", StepPolicy::Thought)
            .unwrap();
        assert_eq!(out.thought.as_deref(), Some("x"));
        assert_eq!(out.code, None);
    }

    #[test]
    fn close_stopped_tag_repairs_only_unclosed() {
        assert_eq!(close_stopped_tag("<code>x", StepPolicy::Code), "<code>x</code>");
        assert_eq!(close_stopped_tag("<code>x</code>", StepPolicy::Code), "<code>x</code>");
        assert_eq!(close_stopped_tag("nothing", StepPolicy::Thought), "nothing");
    }

    /// Independent first-block finder over tag positions, used as the oracle
    /// for duplicate blocks.
    fn oracle_first(raw: &str, tag: &str) -> Option<String> {
        let open = format!("<{tag}>");
        let close = format!("</{tag}>");
        let s = raw.find(&open)? + open.len();
        let e = s + raw[s..].find(&close)?;
        Some(raw[s..e].trim().to_string())
    }

    #[test]
    fn first_block_wins() {
        let raw = "<thought>x</thought><thought>y</thought>";
        let out = parse_model_output(raw, StepPolicy::Thought).unwrap();
        assert_eq!(out.thought, oracle_first(raw, "thought"));
        assert_eq!(out.thought.as_deref(), Some("x"));
    }

    #[test]
    fn append_and_order_violation() {
        let mut t = Trajectory::new();
        t.append_message(msg(Role::Query, "q", 0)).unwrap();
        assert_eq!(t.len(), 1);

        let mut t = sample(3);
        let before = t.step_count();
        t.append_message(msg(Role::Error, "hint", 3)).unwrap();
        assert_eq!(t.step_count(), before);
        assert_eq!(
            t.append_message(msg(Role::Code, "x", 2)),
            Err(ConversationError::OrderViolation { last: 3, got: 2 })
        );
    }

    #[test]
    fn role_order_enforced_within_step() {
        let mut t = sample(1);
        assert!(matches!(
            t.append_message(msg(Role::Code, "c", 2)),
            Err(ConversationError::RoleOrder { .. })
        ));
        t.append_message(msg(Role::Thought, "t", 2)).unwrap();
        assert!(t.append_message(msg(Role::Thought, "t", 2)).is_err());
        t.append_message(msg(Role::Error, "malformed", 2)).unwrap();
        t.append_message(msg(Role::Code, "c", 2)).unwrap();
        assert_eq!(t.round_state(), RoundState::CodePending);
        t.append_message(msg(Role::Observation, "o", 2)).unwrap();
        assert!(t.append_message(msg(Role::Observation, "o", 2)).is_err());
        assert_eq!(t.round_state(), RoundState::Complete);
    }

    #[test]
    fn usage_accumulates_from_tokens() {
        let t = sample(0);
        assert_eq!(t.usage(), TokenUsage::new(3, 1));
    }

    #[test]
    fn truncate_identity_and_range() {
        let mut t = sample(3);
        t.set_status(TrajectoryStatus::Answered);
        let same = t.truncate_to_step(3).unwrap();
        assert_eq!(same.status(), TrajectoryStatus::Running);
        let mut expect = t.clone();
        expect.set_status(TrajectoryStatus::Running);
        assert_eq!(same, expect);
        assert!(matches!(
            t.truncate_to_step(-1),
            Err(ConversationError::OutOfRange { step: -1, .. })
        ));
        assert!(t.truncate_to_step(4).is_err());
    }

    #[test]
    fn truncate_matches_filter_oracle() {
        let mut t = sample(5);
        t.append_message(msg(Role::Error, "late", 5).with_tokens(TokenUsage::new(7, 7)))
            .unwrap();
        let cut = t.truncate_to_step(2).unwrap();
        // oracle: replay the filtered message list into a fresh trajectory
        let mut replay = Trajectory::new();
        for m in t.messages().iter().filter(|m| m.step_index <= 2) {
            replay.append_message(m.clone()).unwrap();
        }
        assert_eq!(cut.messages(), replay.messages());
        assert!(cut.messages().iter().all(|m| m.step_index <= 2));
        assert_eq!(cut.step_count(), 2);
        // spent tokens are kept
        assert_eq!(cut.usage(), t.usage());
    }

    #[test]
    fn truncate_restores_earlier_plan() {
        let mut t = sample(2);
        t.append_message(msg(Role::Plan, "revised", 3)).unwrap();
        assert_eq!(t.global_plan(), Some("revised"));
        let cut = t.truncate_to_step(2).unwrap();
        assert_eq!(cut.global_plan(), Some("p"));
    }

    #[test]
    fn opening_step_rules() {
        let t = sample(0);
        assert_eq!(t.opening_step(), 1);
        let mut t = sample(2);
        assert_eq!(t.opening_step(), 3);
        t.append_message(msg(Role::Error, "backtrack hint", 3)).unwrap();
        assert_eq!(t.opening_step(), 3);
        assert_eq!(t.round_state(), RoundState::Open);
    }

    #[test]
    fn render_single_query() {
        let mut t = Trajectory::new();
        t.append_message(msg(Role::Query, "what?", 0)).unwrap();
        let turns = t.render_history(HistoryFormat::UserTurns);
        assert_eq!(turns, vec![ChatTurn::user("what?")]);
    }

    #[test]
    fn render_one_step_golden() {
        let mut t = Trajectory::new();
        t.append_message(msg(Role::Query, "Who is the legal rep of Acme?", 0)).unwrap();
        t.append_message(msg(Role::Thought, "Use get_company_info.", 1)).unwrap();
        t.append_message(msg(Role::Code, "r = get_company_info('Acme')\nprint(r)", 1)).unwrap();
        t.append_message(msg(Role::Observation, "{'legal_rep': 'Li Wei'}", 1)).unwrap();

        let golden_user = vec![
            ChatTurn::new(ChatRole::User, "Who is the legal rep of Acme?"),
            ChatTurn::new(ChatRole::Assistant, "<thought>Use get_company_info.</thought>"),
            ChatTurn::new(
                ChatRole::Assistant,
                "<code>\nr = get_company_info('Acme')\nprint(r)\n</code>",
            ),
            ChatTurn::new(ChatRole::User, "<observation>{'legal_rep': 'Li Wei'}</observation>"),
        ];
        assert_eq!(t.render_history(HistoryFormat::UserTurns), golden_user);

        let tool = t.render_history(HistoryFormat::ToolTurns);
        assert_eq!(tool.len(), 4);
        assert_eq!(tool[3].role, ChatRole::Tool);
    }

    #[test]
    fn render_error_keeps_hints() {
        let mut t = sample(1);
        t.append_message(msg(Role::Thought, "t", 2)).unwrap();
        t.append_message(msg(Role::Code, "c", 2)).unwrap();
        t.append_message(msg(
            Role::Error,
            "Error (name-error): x\nPossible cause: c\nSuggested solution: define x first",
            2,
        ))
        .unwrap();
        let turns = t.render_history(HistoryFormat::UserTurns);
        assert!(turns.last().unwrap().content.contains("define x first"));
    }

    #[test]
    fn log_round_trip_and_errors() {
        let t = sample(2);
        let mut buf = Vec::new();
        write_log(&mut buf, t.messages()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().starts_with(r#"{"role":"query","content":"q","step":0}"#));
        let back = read_log(buf.as_slice()).unwrap();
        assert_eq!(back, t.messages());

        match read_log("".as_bytes()) {
            Err(LogError::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match read_log("{\"role\":\"query\",\"content\":\"q\",\"step\":0}\nnot json\n".as_bytes()) {
            Err(LogError::Parse { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let bare = read_log(r#"{"role":"thought","content":"t","step":1,"tokens":12}"#.as_bytes())
            .unwrap();
        assert_eq!(bare[0].tokens, Some(TokenUsage::new(0, 12)));
    }

    fn tag_free() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9 _=()'.,\n]{1,40}".prop_filter("non-blank", |s| !s.trim().is_empty())
    }

    proptest! {
        #[test]
        fn parse_rewrap_round_trip(thought in proptest::option::of(tag_free()), code in tag_free()) {
            let raw = match &thought {
                Some(t) => format!("<thought>{t}</thought>\n<code>{code}</code>"),
                None => format!("<code>{code}</code>"),
            };
            let first = parse_model_output(&raw, StepPolicy::Code).unwrap();
            let mut rewrapped = String::new();
            if let Some(t) = &first.thought {
                rewrapped.push_str(&format!("<thought>{t}</thought>"));
            }
            rewrapped.push_str(&format!("<code>{}</code>", first.code.as_ref().unwrap()));
            let second = parse_model_output(&rewrapped, StepPolicy::Code).unwrap();
            prop_assert_eq!(first.thought, second.thought);
            prop_assert_eq!(first.code, second.code);
        }

        #[test]
        fn truncate_after_append_restores(rounds in 0u32..6, content in tag_free()) {
            let t = sample(rounds);
            let mut grown = t.clone();
            grown.append_message(Message::new(Role::Thought, content, t.step_count() + 1)).unwrap();
            let back = grown.truncate_to_step(i64::from(t.step_count())).unwrap();
            prop_assert_eq!(back.messages(), t.messages());
            prop_assert_eq!(back.global_plan(), t.global_plan());
            prop_assert_eq!(back.step_count(), t.step_count());
        }

        #[test]
        fn render_is_pure(rounds in 0u32..5) {
            let t = sample(rounds);
            prop_assert_eq!(
                t.render_history(HistoryFormat::UserTurns),
                t.clone().render_history(HistoryFormat::UserTurns)
            );
        }
    }
}
