//! Offline inspection of trajectory logs: rebuilding the trajectory the log
//! describes and re-running the repeated-error detector over it.

use crate::conversation::{BacktrackEvent, ConversationError, Message, Role, Trajectory, TrajectoryStatus};
use crate::llm::TokenUsage;
use crate::reviewer::{detect_repeated_error, ErrorRecord, CLASS_BACKTRACK, CLASS_REVISE_PLAN};

/// A reviewer decision recorded in, or implied by, a log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoggedDecision {
    Backtrack { to_step: u32 },
    RevisePlan,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Truncation {
    /// Index in the log of the hint that follows the truncation.
    pub line: usize,
    pub event: BacktrackEvent,
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub trajectory: Trajectory,
    pub truncations: Vec<Truncation>,
    /// Sum of every message's tokens, including removed ones.
    pub usage: TokenUsage,
}

/// What the detector would decide before a code action, next to what the
/// log shows happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckFinding {
    /// Index in the log of the code action under review.
    pub line: usize,
    pub step: u32,
    pub decision: LoggedDecision,
    pub logged: Option<LoggedDecision>,
}

impl CheckFinding {
    pub fn agrees(&self) -> bool {
        self.logged == Some(self.decision)
    }
}

fn class_of(m: &Message) -> Option<String> {
    (m.role == Role::Error).then(|| ErrorRecord::parse(m.step_index, &m.content).error_class)
}

/// Backtrack hints sit at the step after the target.
fn logged_decision(m: &Message) -> Option<LoggedDecision> {
    match class_of(m)?.as_str() {
        CLASS_BACKTRACK => Some(LoggedDecision::Backtrack {
            to_step: m.step_index.saturating_sub(1),
        }),
        CLASS_REVISE_PLAN => Some(LoggedDecision::RevisePlan),
        _ => None,
    }
}

struct Rebuilder {
    trajectory: Trajectory,
    truncations: Vec<Truncation>,
    usage: TokenUsage,
}

impl Rebuilder {
    fn new() -> Self {
        Self {
            trajectory: Trajectory::new(),
            truncations: Vec::new(),
            usage: TokenUsage::ZERO,
        }
    }

    fn push(&mut self, line: usize, m: &Message) -> Result<(), ConversationError> {
        if let Some(tokens) = m.tokens {
            self.usage += tokens;
        }
        match logged_decision(m) {
            Some(LoggedDecision::Backtrack { to_step }) => {
                let from_step = self.trajectory.step_count();
                self.trajectory = self.trajectory.truncate_to_step(i64::from(to_step))?;
                let event = BacktrackEvent { from_step, to_step };
                self.trajectory.record_backtrack(event.clone());
                self.truncations.push(Truncation { line, event });
            }
            Some(LoggedDecision::RevisePlan) => self.trajectory.request_plan_revision(),
            None => {}
        }
        self.trajectory.append_message(m.clone())?;
        if m.role == Role::Answer {
            self.trajectory.set_status(TrajectoryStatus::Answered);
        }
        Ok(())
    }
}

/// Rebuilds the final trajectory of a logged run, applying each logged
/// backtrack as a truncation.
pub fn rebuild(log: &[Message]) -> Result<Replay, ConversationError> {
    let mut r = Rebuilder::new();
    for (i, m) in log.iter().enumerate() {
        r.push(i, m)?;
    }
    Ok(Replay {
        trajectory: r.trajectory,
        truncations: r.truncations,
        usage: r.usage,
    })
}

/// Runs the repeated-error detector before every code action in the log,
/// as the reviewer would have, and pairs each would-be decision with the
/// decision the log records for that action.
pub fn check(log: &[Message], window: usize) -> Result<Vec<CheckFinding>, ConversationError> {
    let mut r = Rebuilder::new();
    let mut findings = Vec::new();
    for (i, m) in log.iter().enumerate() {
        if m.role == Role::Code {
            if let Some(target) = detect_repeated_error(&r.trajectory, window) {
                let decision = if r.trajectory.backtracks().iter().any(|b| b.to_step == target) {
                    LoggedDecision::RevisePlan
                } else {
                    LoggedDecision::Backtrack { to_step: target }
                };
                let logged = log[i + 1..]
                    .iter()
                    .take_while(|n| !matches!(n.role, Role::Thought | Role::Code | Role::Observation))
                    .find_map(logged_decision);
                findings.push(CheckFinding {
                    line: i,
                    step: m.step_index,
                    decision,
                    logged,
                });
            }
        }
        r.push(i, m)?;
    }
    Ok(findings)
}
