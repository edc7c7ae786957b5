//! Query expansion and final-answer formatting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::numbers::{map_numbers, requested_precision, value_multiset, DecimalValue};
use super::ReviewerError;
use crate::llm::{ChatRequest, ChatTurn, LlmBackend, TokenUsage};

/// Separator between the query and each appended knowledge snippet.
pub const EXPANSION_SEPARATOR: &str = "\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerRule {
    /// Round fractional numbers to the precision the query asks for.
    DecimalPlaces,
    /// Drop markdown emphasis, heading markers and digit-group separators.
    PlainText,
    /// Backend pass that keeps the query's key terms in the answer.
    KeywordRetention,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewriteRules {
    pub query_expansions: BTreeMap<String, Vec<String>>,
    pub answer_format_rules: Vec<AnswerRule>,
    /// Also ask the backend for background knowledge on the query.
    pub backend_query_expansion: bool,
}

impl Default for RewriteRules {
    fn default() -> Self {
        Self {
            query_expansions: BTreeMap::new(),
            answer_format_rules: vec![AnswerRule::DecimalPlaces, AnswerRule::PlainText],
            backend_query_expansion: false,
        }
    }
}

impl RewriteRules {
    pub fn load(path: &Path) -> Result<Self, ReviewerError> {
        let load_err = |message: String| ReviewerError::Load {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))
    }
}

const EXPAND_SYSTEM: &str = "Add short background knowledge that helps answer the user's \
question. Do not answer it and do not restate it.";

const RETAIN_SYSTEM: &str = "Rewrite the answer as one clear sentence that names the subject \
of the question. Copy every number exactly as written. Output only the rewritten answer.";

/// The query followed by its task type's knowledge snippets. The original
/// query is always a verbatim prefix of the result.
pub async fn rewrite_query(
    query: &str,
    task_type: Option<&str>,
    rules: &RewriteRules,
    backend: Option<&dyn LlmBackend>,
) -> (String, TokenUsage) {
    let mut out = query.to_string();
    if let Some(snippets) = task_type.and_then(|t| rules.query_expansions.get(t)) {
        for s in snippets.iter().filter(|s| !s.trim().is_empty()) {
            out.push_str(EXPANSION_SEPARATOR);
            out.push_str(s);
        }
    }
    let mut usage = TokenUsage::ZERO;
    if let (true, Some(backend)) = (rules.backend_query_expansion, backend) {
        let request = ChatRequest::new(vec![ChatTurn::system(EXPAND_SYSTEM), ChatTurn::user(query)]);
        match backend.complete(&request).await {
            Ok(resp) => {
                usage += resp.usage;
                let extra = resp.text.trim();
                if !extra.is_empty() {
                    out.push_str(EXPANSION_SEPARATOR);
                    out.push_str(extra);
                }
            }
            Err(e) => warn!(error = %e, "query expansion fell back to rules"),
        }
    }
    (out, usage)
}

fn apply_decimal_places(query: &str, answer: &str) -> String {
    let Some(places) = requested_precision(query) else {
        return answer.to_string();
    };
    map_numbers(answer, |tok| {
        if tok.frac_digits.is_some() {
            tok.value().round_to(places).to_string()
        } else {
            answer[tok.start..tok.end].to_string()
        }
    })
}

fn apply_plain_text(answer: &str) -> String {
    let unmarked: Vec<String> = answer
        .lines()
        .map(|line| {
            let trimmed = line.trim_start();
            let body = if trimmed.starts_with('#') {
                trimmed.trim_start_matches('#').trim_start()
            } else {
                line
            };
            body.replace("**", "").replace('`', "")
        })
        .collect();
    let joined = unmarked.join("\n");
    let plain = map_numbers(&joined, |tok| {
        let raw = &joined[tok.start..tok.end];
        if tok.grouped {
            raw.replace(',', "")
        } else {
            raw.to_string()
        }
    });
    let plain = plain.trim().to_string();
    if plain.is_empty() {
        answer.to_string()
    } else {
        plain
    }
}

fn canonical(values: Vec<DecimalValue>) -> Vec<DecimalValue> {
    let mut v: Vec<DecimalValue> = values.iter().map(DecimalValue::canonical).collect();
    v.sort();
    v
}

async fn apply_keyword_retention(
    query: &str,
    answer: &str,
    backend: &dyn LlmBackend,
    usage: &mut TokenUsage,
) -> String {
    let request = ChatRequest::new(vec![
        ChatTurn::system(RETAIN_SYSTEM),
        ChatTurn::user(format!("Question: {query}\nAnswer: {answer}")),
    ]);
    match backend.complete(&request).await {
        Ok(resp) => {
            *usage += resp.usage;
            let candidate = resp.text.trim();
            let same_numbers = canonical(value_multiset(candidate)) == canonical(value_multiset(answer));
            if !candidate.is_empty() && same_numbers {
                candidate.to_string()
            } else {
                answer.to_string()
            }
        }
        Err(e) => {
            warn!(error = %e, "answer rewrite fell back to rules");
            answer.to_string()
        }
    }
}

/// Applies the answer rules in order. Numeric values only change through
/// rounding to an explicitly requested precision.
pub async fn rewrite_answer(
    query: &str,
    answer: &str,
    rules: &RewriteRules,
    backend: Option<&dyn LlmBackend>,
) -> (String, TokenUsage) {
    let mut usage = TokenUsage::ZERO;
    if answer.trim().is_empty() {
        return (answer.to_string(), usage);
    }
    let mut out = answer.to_string();
    for rule in &rules.answer_format_rules {
        out = match rule {
            AnswerRule::DecimalPlaces => apply_decimal_places(query, &out),
            AnswerRule::PlainText => apply_plain_text(&out),
            AnswerRule::KeywordRetention => match backend {
                Some(b) => apply_keyword_retention(query, &out, b, &mut usage).await,
                None => out,
            },
        };
    }
    (out, usage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScriptStep, ScriptedBackend};

    fn legal_rules() -> RewriteRules {
        let mut r = RewriteRules::default();
        r.query_expansions
            .insert("legal-lookup".into(), vec!["Court codes identify the trial court.".into()]);
        r
    }

    #[tokio::test]
    async fn query_expansion() {
        let r = legal_rules();
        let (out, _) = rewrite_query("Which court?", Some("other"), &r, None).await;
        assert_eq!(out, "Which court?");
        let (out, _) = rewrite_query("Which court?", Some("legal-lookup"), &r, None).await;
        assert_eq!(out, "Which court?\nCourt codes identify the trial court.");
    }

    #[tokio::test]
    async fn backend_expansion_keeps_query_and_falls_back() {
        let r = RewriteRules {
            backend_query_expansion: true,
            ..legal_rules()
        };
        let b = ScriptedBackend::new([ScriptStep::new("", "Rewritten entirely").with_usage(3, 2)]);
        let (out, usage) = rewrite_query("Which court?", Some("legal-lookup"), &r, Some(&b)).await;
        assert!(out.starts_with("Which court?"));
        assert!(out.ends_with("Rewritten entirely"));
        assert_eq!(usage, TokenUsage::new(3, 2));

        let empty = ScriptedBackend::new([]);
        let (out, usage) = rewrite_query("Which court?", Some("legal-lookup"), &r, Some(&empty)).await;
        assert_eq!(out, "Which court?\nCourt codes identify the trial court.");
        assert!(usage.is_zero());
    }

    #[tokio::test]
    async fn answer_rules() {
        let r = RewriteRules::default();
        let (out, _) = rewrite_answer("Keep two decimal places.", "3.14159", &r, None).await;
        assert_eq!(out, "3.14");
        let (out, _) = rewrite_answer("who?", "Alice", &r, None).await;
        assert_eq!(out, "Alice");
        let (out, _) = rewrite_answer("总额是多少", "总额为 1,000,000 元", &r, None).await;
        assert_eq!(out, "总额为 1000000 元");
        let (out, _) = rewrite_answer("name?", "**Acme** Ltd", &r, None).await;
        assert_eq!(out, "Acme Ltd");
    }

    #[tokio::test]
    async fn keyword_retention_rejects_changed_numbers() {
        let r = RewriteRules {
            answer_format_rules: vec![AnswerRule::KeywordRetention],
            ..Default::default()
        };
        let good = ScriptedBackend::new([ScriptStep::new("", "The capital is 12.5 million.")]);
        let (out, _) = rewrite_answer("capital?", "12.50 million", &r, Some(&good)).await;
        assert_eq!(out, "The capital is 12.5 million.");

        let bad = ScriptedBackend::new([ScriptStep::new("", "The capital is 13 million.")]);
        let (out, _) = rewrite_answer("capital?", "12.50 million", &r, Some(&bad)).await;
        assert_eq!(out, "12.50 million");
    }
}
