//! Comparison strategies. They see the same tool registry, descriptions and
//! few-shot budget as the dual-control agent but have no policy switching,
//! no per-step tool selection and no reviewer.

use poact_core::conversation::{Message, Role};
use poact_core::executor::tools::{dispatch_tool, ToolCallRequest, ToolRegistry};
use poact_core::llm::{ChatRequest, ChatTurn, LlmBackend, TokenUsage};
use serde::Deserialize;
use serde_json::{Map, Value};

const REACT_SYSTEM: &str = "You solve the user's task by calling tools one at a time and reading each result before the next call.

# Tools
<<tool_descriptions>>

# Examples
<<few_shots>>

# Reply format
- Start every reply with one <thought></thought> block saying what to do next.
- Then give exactly one of:
  - <action>{\"tool\": \"tool_name\", \"args\": {\"parameter\": \"value\"}}</action> to call one tool. Its result comes back in <observation></observation>.
  - <final_answer>answer text</final_answer> once the task is answered.";

const PS_PLAN_SYSTEM: &str = "You solve the user's task by writing the complete list of tool calls up front. The calls run in order without further input from you.

# Tools
<<tool_descriptions>>

# Examples
<<few_shots>>

# Reply format
Reply with a JSON array inside <plan></plan>. Each element is {\"tool\": \"tool_name\", \"args\": {\"parameter\": \"value\"}}.
A value of the form #E<n>.<field> is replaced by that field of the result of call n (counting from 1); #E<n> alone is the whole result.";

const PS_ANSWER_SYSTEM: &str = "Answer the user's task from the evidence gathered by the tool calls. Reply with <answer></answer>.";

const PE_PLAN_SYSTEM: &str = "You write plans for tasks that are solved with tools.

# Tools
<<tool_descriptions>>

# Examples
<<few_shots>>

Reply with a numbered list of steps inside <plan></plan>. Each step names the tool it uses.";

const PE_ACT_SYSTEM: &str = "You carry out the first step of a plan with exactly one tool call.

# Tools
<<tool_descriptions>>

Reply with <action>{\"tool\": \"tool_name\", \"args\": {\"parameter\": \"value\"}}</action>.";

const PE_REPLAN_SYSTEM: &str = "You update a plan after a step has run. Given the task, the results so far and the old plan, reply with the steps still needed inside <plan></plan>, or with <final_answer>answer text</final_answer> if the task is answered.";

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRun {
    pub journal: Vec<Message>,
    pub answer: Option<String>,
    pub usage: TokenUsage,
    pub failure: Option<String>,
    pub step_limit_hit: bool,
}

/// Shared inputs for one baseline run.
pub struct BaselineContext<'a> {
    pub tools: &'a ToolRegistry,
    pub tool_descriptions: &'a str,
    pub few_shots: &'a str,
    pub backend: &'a dyn LlmBackend,
    pub step_limit: u32,
    pub temperature: f64,
}

#[derive(Debug, Deserialize)]
struct Action {
    tool: String,
    #[serde(default)]
    args: Map<String, Value>,
}

/// Text between the first `<tag>` and the following `</tag>`.
pub fn extract_tag(text: &str, tag: &str) -> Option<String> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = text[start..].find(&close)? + start;
    Some(text[start..end].trim().to_string())
}

fn system(template: &str, ctx: &BaselineContext<'_>) -> String {
    template
        .replace("<<tool_descriptions>>", ctx.tool_descriptions)
        .replace("<<few_shots>>", ctx.few_shots)
}

struct Recorder {
    journal: Vec<Message>,
    usage: TokenUsage,
}

impl Recorder {
    fn new(query: &str) -> Self {
        Self {
            journal: vec![Message::new(Role::Query, query, 0)],
            usage: TokenUsage::ZERO,
        }
    }

    fn push(&mut self, role: Role, content: impl Into<String>, step: u32, usage: Option<TokenUsage>) {
        let mut content = content.into();
        if content.is_empty() && role != Role::Answer {
            content = "(empty)".into();
        }
        let mut m = Message::new(role, content, step);
        if let Some(u) = usage {
            self.usage += u;
            m = m.with_tokens(u);
        }
        self.journal.push(m);
    }

    fn finish(self, answer: Option<String>, failure: Option<String>, step_limit_hit: bool) -> BaselineRun {
        BaselineRun {
            journal: self.journal,
            answer,
            usage: self.usage,
            failure,
            step_limit_hit,
        }
    }
}

async fn complete(
    ctx: &BaselineContext<'_>,
    turns: Vec<ChatTurn>,
) -> Result<(String, TokenUsage), String> {
    let request = ChatRequest::new(turns).with_temperature(ctx.temperature);
    let response = ctx.backend.complete(&request).await.map_err(|e| e.to_string())?;
    Ok((response.text, response.usage))
}

fn call_tool(ctx: &BaselineContext<'_>, action: &Action, call_id: u64) -> Result<Value, String> {
    let visible: Vec<String> = ctx.tools.names().map(str::to_string).collect();
    let request = ToolCallRequest {
        call_id,
        tool: action.tool.clone(),
        args: Vec::new(),
        kwargs: action.args.clone(),
    };
    dispatch_tool(&request, ctx.tools, &visible)
        .outcome
        .map_err(|e| format!("{}: {}", e.error_class, e.message))
}

fn observation_text(result: &Result<Value, String>) -> (Role, String) {
    match result {
        Ok(v) => (Role::Observation, v.to_string()),
        Err(e) => (Role::Error, e.clone()),
    }
}

/// Thought and action merged in one reply, one tool call per step.
pub async fn run_react(ctx: &BaselineContext<'_>, query: &str) -> BaselineRun {
    let mut rec = Recorder::new(query);
    let sys = system(REACT_SYSTEM, ctx);
    let mut turns = vec![ChatTurn::system(sys), ChatTurn::user(query)];
    for step in 1..=ctx.step_limit {
        let (text, usage) = match complete(ctx, turns.clone()).await {
            Ok(r) => r,
            Err(e) => return rec.finish(None, Some(e), false),
        };
        turns.push(ChatTurn::new(poact_core::llm::ChatRole::Assistant, text.clone()));
        let thought = extract_tag(&text, "thought").unwrap_or_default();
        rec.push(Role::Thought, thought, step, Some(usage));
        if let Some(answer) = extract_tag(&text, "final_answer") {
            rec.push(Role::Answer, answer.clone(), step, None);
            return rec.finish(Some(answer), None, false);
        }
        let parsed = extract_tag(&text, "action")
            .ok_or_else(|| "reply has neither <action> nor <final_answer>".to_string())
            .and_then(|a| serde_json::from_str::<Action>(&a).map_err(|e| format!("bad action JSON: {e}")).map(|p| (a, p)));
        match parsed {
            Ok((raw, action)) => {
                rec.push(Role::Code, raw, step, None);
                let result = call_tool(ctx, &action, u64::from(step));
                let (role, content) = observation_text(&result);
                rec.push(role, content.clone(), step, None);
                turns.push(ChatTurn::user(format!("<observation>{content}</observation>")));
            }
            Err(e) => {
                rec.push(Role::Error, e.clone(), step, None);
                turns.push(ChatTurn::user(format!("<error>{e}</error>")));
            }
        }
    }
    rec.finish(None, None, true)
}

/// Replaces `#E<n>` and `#E<n>.<field>` references with earlier results.
fn resolve_refs(value: &Value, evidence: &[Value]) -> Value {
    match value {
        Value::String(s) if s.starts_with("#E") => {
            let (head, field) = match s.split_once('.') {
                Some((h, f)) => (h, Some(f)),
                None => (s.as_str(), None),
            };
            let Some(e) = head[2..].parse::<usize>().ok().and_then(|n| evidence.get(n.wrapping_sub(1))) else {
                return value.clone();
            };
            match field {
                Some(f) => e.get(f).cloned().unwrap_or(Value::Null),
                None => e.clone(),
            }
        }
        Value::Array(items) => Value::Array(items.iter().map(|v| resolve_refs(v, evidence)).collect()),
        Value::Object(map) => Value::Object(map.iter().map(|(k, v)| (k.clone(), resolve_refs(v, evidence))).collect()),
        other => other.clone(),
    }
}

/// One upfront plan of concrete calls, run in order, then one answer turn.
pub async fn run_plan_and_solve(ctx: &BaselineContext<'_>, query: &str) -> BaselineRun {
    let mut rec = Recorder::new(query);
    let turns = vec![ChatTurn::system(system(PS_PLAN_SYSTEM, ctx)), ChatTurn::user(query)];
    let (text, usage) = match complete(ctx, turns).await {
        Ok(r) => r,
        Err(e) => return rec.finish(None, Some(e), false),
    };
    let plan_text = extract_tag(&text, "plan").unwrap_or_else(|| text.trim().to_string());
    rec.push(Role::Plan, plan_text.clone(), 0, Some(usage));
    let plan: Vec<Action> = match serde_json::from_str(&plan_text) {
        Ok(p) => p,
        Err(e) => {
            let msg = format!("plan is not a JSON array of tool calls: {e}");
            rec.push(Role::Error, msg.clone(), 0, None);
            return rec.finish(None, Some(msg), false);
        }
    };

    let mut evidence = Vec::new();
    let mut lines = Vec::new();
    for (i, action) in plan.iter().take(ctx.step_limit as usize).enumerate() {
        let step = i as u32 + 1;
        let args = match resolve_refs(&Value::Object(action.args.clone()), &evidence) {
            Value::Object(m) => m,
            _ => Map::new(),
        };
        let resolved = Action {
            tool: action.tool.clone(),
            args,
        };
        rec.push(
            Role::Code,
            serde_json::json!({"tool": resolved.tool, "args": resolved.args}).to_string(),
            step,
            None,
        );
        let result = call_tool(ctx, &resolved, u64::from(step));
        let (role, content) = observation_text(&result);
        rec.push(role, content.clone(), step, None);
        lines.push(format!("#E{step} = {content}"));
        evidence.push(result.unwrap_or(Value::Null));
    }

    let last = plan.len().min(ctx.step_limit as usize) as u32;
    let turns = vec![
        ChatTurn::system(PS_ANSWER_SYSTEM),
        ChatTurn::user(format!("Task: {query}\n\nEvidence:\n{}", lines.join("\n"))),
    ];
    match complete(ctx, turns).await {
        Ok((text, usage)) => {
            let answer = extract_tag(&text, "answer").unwrap_or_else(|| text.trim().to_string());
            rec.push(Role::Answer, answer.clone(), last, Some(usage));
            rec.finish(Some(answer), None, false)
        }
        Err(e) => rec.finish(None, Some(e), false),
    }
}

/// Plan, run one step, replan from the results, repeat.
pub async fn run_plan_and_execute(ctx: &BaselineContext<'_>, query: &str) -> BaselineRun {
    let mut rec = Recorder::new(query);
    let turns = vec![ChatTurn::system(system(PE_PLAN_SYSTEM, ctx)), ChatTurn::user(query)];
    let (text, usage) = match complete(ctx, turns).await {
        Ok(r) => r,
        Err(e) => return rec.finish(None, Some(e), false),
    };
    let mut plan = extract_tag(&text, "plan").unwrap_or_else(|| text.trim().to_string());
    rec.push(Role::Plan, plan.clone(), 0, Some(usage));

    let mut results: Vec<String> = Vec::new();
    for step in 1..=ctx.step_limit {
        let act_turns = vec![
            ChatTurn::system(system(PE_ACT_SYSTEM, ctx)),
            ChatTurn::user(format!(
                "Task: {query}\n\nResults so far:\n{}\n\nPlan:\n{plan}",
                if results.is_empty() { "(none)".to_string() } else { results.join("\n") }
            )),
        ];
        let (text, usage) = match complete(ctx, act_turns).await {
            Ok(r) => r,
            Err(e) => return rec.finish(None, Some(e), false),
        };
        let raw = extract_tag(&text, "action").unwrap_or_else(|| text.trim().to_string());
        rec.push(Role::Code, raw.clone(), step, Some(usage));
        let outcome = serde_json::from_str::<Action>(&raw)
            .map_err(|e| format!("bad action JSON: {e}"))
            .and_then(|a| call_tool(ctx, &a, u64::from(step)).map(|v| (a, v)));
        let (role, content) = match &outcome {
            Ok((_, v)) => (Role::Observation, v.to_string()),
            Err(e) => (Role::Error, e.clone()),
        };
        rec.push(role, content.clone(), step, None);
        results.push(format!("Step {step}: {content}"));

        let replan_turns = vec![
            ChatTurn::system(PE_REPLAN_SYSTEM),
            ChatTurn::user(format!(
                "Task: {query}\n\nResults so far:\n{}\n\nOld plan:\n{plan}",
                results.join("\n")
            )),
        ];
        let (text, usage) = match complete(ctx, replan_turns).await {
            Ok(r) => r,
            Err(e) => return rec.finish(None, Some(e), false),
        };
        if let Some(answer) = extract_tag(&text, "final_answer") {
            rec.push(Role::Answer, answer.clone(), step, Some(usage));
            return rec.finish(Some(answer), None, false);
        }
        plan = extract_tag(&text, "plan").unwrap_or_else(|| text.trim().to_string());
        rec.push(Role::Plan, plan.clone(), step, Some(usage));
    }
    rec.finish(None, None, true)
}

/// A single-argument action in the reply format above.
pub fn action_json(tool: &str, param: &str, value: Value) -> String {
    let mut args = Map::new();
    args.insert(param.to_string(), value);
    serde_json::json!({"tool": tool, "args": args}).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn tag_extraction() {
        assert_eq!(extract_tag("a <x> b </x> c", "x").as_deref(), Some("b"));
        assert_eq!(extract_tag("<x>unclosed", "x"), None);
    }

    #[test]
    fn references_resolve_against_evidence() {
        let evidence = vec![json!({"subsidiary": "S Ltd"}), json!({"case_number": "Case 1"})];
        let args = json!({"a": "#E1.subsidiary", "b": "#E2", "c": "#E9.x", "d": "plain"});
        assert_eq!(
            resolve_refs(&args, &evidence),
            json!({"a": "S Ltd", "b": {"case_number": "Case 1"}, "c": "#E9.x", "d": "plain"})
        );
    }
}
