//! Human-readable rendering of trajectory logs.

use std::fmt::Write as _;

use poact_core::conversation::{Message, Role};
use poact_core::llm::TokenUsage;
use poact_core::replay::{CheckFinding, LoggedDecision, Replay};
use poact_core::reviewer::{ErrorRecord, CLASS_BACKTRACK, CLASS_REJECTED_CODE, CLASS_REVISE_PLAN};

fn indent(text: &str) -> String {
    text.lines().collect::<Vec<_>>().join("\n    ")
}

fn describe(d: LoggedDecision) -> String {
    match d {
        LoggedDecision::Backtrack { to_step } => format!("backtrack to step {to_step}"),
        LoggedDecision::RevisePlan => "revise plan".into(),
    }
}

/// One line per message with truncation points marked, then a summary of
/// policies, reviewer decisions and token totals.
pub fn render(log: &[Message], replay: &Replay) -> String {
    let mut out = String::new();
    let mut policies = Vec::new();
    let mut decisions = Vec::new();
    for (i, m) in log.iter().enumerate() {
        if let Some(t) = replay.truncations.iter().find(|t| t.line == i) {
            let _ = writeln!(
                out,
                "---- truncated: steps {}..={} discarded, resuming after step {} ----",
                t.event.to_step + 1,
                t.event.from_step,
                t.event.to_step
            );
        }
        let label = match m.role {
            Role::Error => {
                let rec = ErrorRecord::parse(m.step_index, &m.content);
                if [CLASS_BACKTRACK, CLASS_REVISE_PLAN, CLASS_REJECTED_CODE].contains(&rec.error_class.as_str()) {
                    decisions.push(format!("{} at step {}", rec.error_class, m.step_index));
                }
                format!("error ({})", rec.error_class)
            }
            role => role.as_str().to_string(),
        };
        if matches!(m.role, Role::Plan | Role::Thought | Role::Code) {
            policies.push(m.role.as_str());
        }
        let tokens = m
            .tokens
            .map(|t| format!("  [{}+{} tokens]", t.prompt_tokens, t.completion_tokens))
            .unwrap_or_default();
        let _ = writeln!(out, "[{}] {label}:{tokens}\n    {}", m.step_index, indent(&m.content));
    }

    let usage: TokenUsage = log.iter().filter_map(|m| m.tokens).sum();
    let _ = writeln!(out, "\npolicies: {}", policies.join(" "));
    let _ = writeln!(
        out,
        "decisions: {}",
        if decisions.is_empty() { "none".to_string() } else { decisions.join(", ") }
    );
    let _ = writeln!(
        out,
        "tokens: prompt {}, completion {}, total {}",
        usage.prompt_tokens,
        usage.completion_tokens,
        usage.total()
    );
    let _ = writeln!(
        out,
        "answer: {}",
        replay.trajectory.answer().unwrap_or("(none)")
    );
    out
}

pub fn render_check(findings: &[CheckFinding]) -> String {
    if findings.is_empty() {
        return "check: no repeated-error decisions\n".into();
    }
    let mut out = String::new();
    for f in findings {
        let logged = f.logged.map_or_else(|| "none".to_string(), describe);
        let verdict = if f.agrees() { "agrees" } else { "differs" };
        let _ = writeln!(
            out,
            "check: code at step {} (line {}): would {}; log: {logged} [{verdict}]",
            f.step,
            f.line + 1,
            describe(f.decision)
        );
    }
    out
}
