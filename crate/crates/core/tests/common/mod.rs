#![allow(dead_code)]

use std::sync::Arc;

use poact_core::agent::AgentResources;
use poact_core::executor::tools::{HostTool, TableTool, ToolRegistry};
use poact_core::executor::transport::Launcher;
use poact_core::executor::InMemoryLauncher;
use poact_core::llm::ScriptStep;
use poact_core::policy::{AgentPolicy, TemplateRegistry};
use poact_core::rag::{index_registry, FewShotExample, HashingEmbedder, OverlapReranker, ToolSpec};
use poact_core::reviewer::{RewriteRules, RuleTable, TriggerSet};
use serde_json::json;

pub const PLAN: &str = "Write the plan for the task";
pub const THOUGHT: &str = "Write the thought";
pub const CODE: &str = "<task>";

pub fn spec(name: &str, description: &str) -> ToolSpec {
    ToolSpec {
        name: name.into(),
        description: description.into(),
        input_example: format!("{name}(\"x\")"),
        output_example: "{}".into(),
        callable_id: name.into(),
        embedding: None,
    }
}

/// Three linked tables plus filler tools.
pub fn table_tools(filler: usize) -> Vec<TableTool> {
    let mut tools: Vec<TableTool> = serde_json::from_value(json!([
        {
            "name": "get_company_info", "description": "Company registration record by company name: legal representative, subsidiary.",
            "input_example": "get_company_info(\"Acme\")", "output_example": "{\"subsidiary\": \"...\"}",
            "callable_id": "get_company_info", "key_param": "company_name",
            "table": {"Acme Holdings": {"legal_representative": "Li Wei", "subsidiary": "Acme Tools"}}
        },
        {
            "name": "get_subcompany_info", "description": "Subsidiary company record by subcompany name: case number of its court case.",
            "input_example": "get_subcompany_info(\"Acme Tools\")", "output_example": "{\"case_number\": \"...\"}",
            "callable_id": "get_subcompany_info", "key_param": "subcompany_name",
            "table": {"Acme Tools": {"legal_representative": "Zhao Min", "case_number": "(2021) C-17"}}
        },
        {
            "name": "get_legal_document", "description": "Legal document (judgment) by case number: court name of the court that handled the case.",
            "input_example": "get_legal_document(\"(2020) A-1\")", "output_example": "{\"court_name\": \"...\"}",
            "callable_id": "get_legal_document", "key_param": "case_number",
            "table": {"(2021) C-17": {"court_name": "Eastport Court", "cause": "contract dispute"}}
        }
    ]))
    .unwrap();
    for i in 0..filler {
        tools.push(TableTool {
            spec: spec(
                &format!("filler_tool_{i:02}"),
                &format!("Weather, sports and recipe lookups, variant {i}."),
            ),
            key_param: "name".into(),
            matching: Default::default(),
            table: Default::default(),
        });
    }
    tools
}

pub fn resources_with(tools: Vec<TableTool>, triggers: TriggerSet, launcher: Arc<dyn Launcher>) -> AgentResources {
    let embedder = Arc::new(HashingEmbedder::default());
    let specs = tools.iter().map(|t| t.spec.clone()).collect();
    let shots = vec![FewShotExample {
        task_type: "multi_hop".into(),
        content: "Look up the company, then follow the subsidiary to its case.".into(),
        embedding: None,
    }];
    let mut host = ToolRegistry::new();
    for t in tools {
        host.register(t.into_host_tool());
    }
    AgentResources {
        templates: TemplateRegistry::shipped(),
        agent_policy: AgentPolicy::shipped(),
        tools: index_registry(specs, embedder.as_ref()).unwrap(),
        few_shots: index_registry(shots, embedder.as_ref()).unwrap(),
        host_tools: Arc::new(host),
        embedder,
        reranker: Some(Arc::new(OverlapReranker)),
        rules: RuleTable::shipped(),
        triggers,
        rewrite: RewriteRules::default(),
        launcher,
    }
}

pub fn resources() -> Arc<AgentResources> {
    Arc::new(resources_with(table_tools(0), TriggerSet::default(), Arc::new(InMemoryLauncher)))
}

pub fn host_registry() -> Arc<ToolRegistry> {
    let mut host = ToolRegistry::new();
    for t in table_tools(0) {
        host.register(t.into_host_tool());
    }
    host.register(HostTool::new(spec("echo", "Echo the argument."), |a, _| Ok(a.first().cloned().unwrap_or_default())));
    Arc::new(host)
}

pub fn plan(text: &str) -> ScriptStep {
    ScriptStep::new(PLAN, format!("<plan>{text}</plan>"))
}

pub fn thought(text: &str) -> ScriptStep {
    ScriptStep::new(THOUGHT, format!("<thought>{text}</thought>"))
}

pub fn code(text: &str) -> ScriptStep {
    ScriptStep::new(CODE, format!("<code>\n{text}\n</code>"))
}
