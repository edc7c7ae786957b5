//! Scripted backends that play a perfect model for each strategy, built
//! from a task's reference trace.

use poact_core::llm::ScriptStep;
use serde_json::{json, Value};

use crate::baselines::action_json;
use crate::world::{SyntheticTask, TraceCall, World};
use crate::Strategy;

/// Request fragments that identify each dual-control step.
pub const PLAN_MATCH: &str = "Write the plan for the task";
pub const THOUGHT_MATCH: &str = "Write the thought";
pub const CODE_MATCH: &str = "<task>";

fn key_param(world: &World, tool: &str) -> String {
    world.table(tool).map_or_else(|| "name".into(), |t| t.key_param.clone())
}

fn trace_of(task: &SyntheticTask) -> Result<&[TraceCall], String> {
    if task.ground_truth_trace.is_empty() {
        Err(format!("task {} has no reference trace", task.id))
    } else {
        Ok(&task.ground_truth_trace)
    }
}

/// The answer a perfect model returns: the traced field of the last result.
pub fn reference_answer(world: &World, task: &SyntheticTask) -> Result<String, String> {
    let trace = trace_of(task)?;
    let results = world.replay(trace)?;
    let last = results.last().expect("trace is non-empty");
    let field = &trace.last().expect("trace is non-empty").field;
    let row = if task.is_knowledge() { &last[0] } else { last };
    row.get(field)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| format!("task {}: result has no field {field}", task.id))
}

/// What a step does, worded the way a model would phrase its local plan.
fn describe(call: &TraceCall) -> String {
    let a = &call.argument;
    match call.tool.as_str() {
        "get_company_info" => format!(
            "Look up the registration record of the company \"{a}\" with get_company_info; the company record gives the {}.",
            call.field.replace('_', " ")
        ),
        "get_subcompany_info" => format!(
            "Look up the subsidiary company \"{a}\" by its subcompany name with get_subcompany_info to get the {}.",
            call.field.replace('_', " ")
        ),
        "get_legal_document" => format!(
            "Read the legal document (judgment) of case number \"{a}\" with get_legal_document to find the court name of the court that handled the case."
        ),
        "get_court_info" => format!(
            "Look up the court \"{a}\" by its court name with get_court_info to get the court {}.",
            call.field.replace('_', " ")
        ),
        "get_court_code" => format!(
            "Look up the court code of the court region \"{a}\" by the region name with get_court_code."
        ),
        tool => format!(
            "Search the legal knowledge base with {tool} for the rules and time limits on \"{a}\"."
        ),
    }
}

fn plan_text(trace: &[TraceCall]) -> String {
    let mut lines: Vec<String> = trace
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}", i + 1, describe(c)))
        .collect();
    lines.push(format!("{}. Return the answer with final_answer.", trace.len() + 1));
    lines.join("\n")
}

fn py_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

pub fn poact_script(task: &SyntheticTask) -> Result<Vec<ScriptStep>, String> {
    let trace = trace_of(task)?;
    let mut steps = vec![ScriptStep::new(PLAN_MATCH, format!("<plan>\n{}\n</plan>", plan_text(trace)))];
    for (i, call) in trace.iter().enumerate() {
        let n = i + 1;
        let arg = if i == 0 {
            py_str(&call.argument)
        } else {
            format!("r{i}[{}]", py_str(&trace[i - 1].field))
        };
        let thought = describe(call);
        steps.push(ScriptStep::new(THOUGHT_MATCH, format!("<thought>{thought}</thought>")));
        steps.push(ScriptStep::new(
            CODE_MATCH,
            format!("<code>\nr{n} = {}({arg})\nprint(r{n})\n</code>", call.tool),
        ));
    }
    let n = trace.len();
    let field = py_str(&trace[n - 1].field);
    let pick = if task.is_knowledge() {
        format!("r{n}[0][{field}]")
    } else {
        format!("r{n}[{field}]")
    };
    steps.push(ScriptStep::new(
        THOUGHT_MATCH,
        "<thought>The last result holds the answer; return it with final_answer.</thought>",
    ));
    steps.push(ScriptStep::new(CODE_MATCH, format!("<code>\nfinal_answer({pick})\n</code>")));
    Ok(steps)
}

fn concrete_action(world: &World, call: &TraceCall) -> String {
    action_json(&call.tool, &key_param(world, &call.tool), json!(call.argument))
}

pub fn react_script(world: &World, task: &SyntheticTask) -> Result<Vec<ScriptStep>, String> {
    let trace = trace_of(task)?;
    let answer = reference_answer(world, task)?;
    let mut steps: Vec<ScriptStep> = trace
        .iter()
        .map(|c| {
            ScriptStep::new(
                "",
                format!("<thought>{}</thought>\n<action>{}</action>", describe(c), concrete_action(world, c)),
            )
        })
        .collect();
    steps.push(ScriptStep::new(
        "",
        format!("<thought>The last observation answers the task.</thought>\n<final_answer>{answer}</final_answer>"),
    ));
    Ok(steps)
}

pub fn plan_and_solve_script(world: &World, task: &SyntheticTask) -> Result<Vec<ScriptStep>, String> {
    let trace = trace_of(task)?;
    let answer = reference_answer(world, task)?;
    let plan: Vec<Value> = trace
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let value = if i == 0 {
                json!(c.argument)
            } else {
                json!(format!("#E{}.{}", i, trace[i - 1].field))
            };
            json!({"tool": c.tool, "args": {key_param(world, &c.tool): value}})
        })
        .collect();
    Ok(vec![
        ScriptStep::new("", format!("<plan>{}</plan>", Value::Array(plan))),
        ScriptStep::new("", format!("<answer>{answer}</answer>")),
    ])
}

pub fn plan_and_execute_script(world: &World, task: &SyntheticTask) -> Result<Vec<ScriptStep>, String> {
    let trace = trace_of(task)?;
    let answer = reference_answer(world, task)?;
    let mut steps = vec![ScriptStep::new("", format!("<plan>\n{}\n</plan>", plan_text(trace)))];
    for (i, call) in trace.iter().enumerate() {
        steps.push(ScriptStep::new("", format!("<action>{}</action>", concrete_action(world, call))));
        let rest = &trace[i + 1..];
        if rest.is_empty() {
            steps.push(ScriptStep::new("", format!("<final_answer>{answer}</final_answer>")));
        } else {
            steps.push(ScriptStep::new("", format!("<plan>\n{}\n</plan>", plan_text(rest))));
        }
    }
    Ok(steps)
}

pub fn script_for(strategy: Strategy, world: &World, task: &SyntheticTask) -> Result<Vec<ScriptStep>, String> {
    match strategy {
        Strategy::PoAct => poact_script(task),
        Strategy::ReAct => react_script(world, task),
        Strategy::PlanAndSolve => plan_and_solve_script(world, task),
        Strategy::PlanAndExecute => plan_and_execute_script(world, task),
    }
}

