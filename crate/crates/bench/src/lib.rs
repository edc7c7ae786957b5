//! Synthetic multi-hop benchmark: task generation, the dual-control agent
//! and three baseline strategies over one shared tool registry, keyword
//! success rates and token totals.

pub mod baselines;
pub mod oracle;
pub mod report;
pub mod world;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use poact_core::agent::{Agent, AgentConfig, AgentResources, TaskInput};
use poact_core::config::write_table_tools;
use poact_core::conversation::{write_log, Message, TrajectoryStatus};
use poact_core::executor::tools::ToolRegistry;
use poact_core::executor::InMemoryLauncher;
use poact_core::llm::{LlmBackend, ScriptedBackend, TokenUsage};
use poact_core::policy::{AgentPolicy, TemplateRegistry};
use poact_core::rag::{
    index_registry, render_few_shots, render_tools, retrieve, HashingEmbedder, OverlapReranker,
};
use poact_core::reviewer::{RewriteRules, RuleTable, TriggerSet};
use serde::{Deserialize, Serialize};
use tracing::warn;

use baselines::{run_plan_and_execute, run_plan_and_solve, run_react, BaselineContext};
use report::{evaluate_sr, RunReport, TaskResult};
use world::{SyntheticTask, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    PoAct,
    ReAct,
    PlanAndSolve,
    PlanAndExecute,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::PoAct,
        Strategy::ReAct,
        Strategy::PlanAndSolve,
        Strategy::PlanAndExecute,
    ];

    /// Short name used on the command line and in log paths.
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::PoAct => "poact",
            Strategy::ReAct => "react",
            Strategy::PlanAndSolve => "ps",
            Strategy::PlanAndExecute => "pe",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown strategy '{s}' (expected poact, react, ps or pe)"))
    }
}

/// Supplies the backend for one task under one strategy.
pub type BackendFactory = Arc<dyn Fn(&SyntheticTask, Strategy) -> Result<Arc<dyn LlmBackend>, String> + Send + Sync>;

/// Every task gets a perfect scripted model built from its reference trace.
pub fn oracle_backends(world: Arc<World>) -> BackendFactory {
    Arc::new(move |task, strategy| {
        let script = oracle::script_for(strategy, &world, task)?;
        Ok(Arc::new(ScriptedBackend::new(script)) as Arc<dyn LlmBackend>)
    })
}

/// All tasks share one backend.
pub fn shared_backend(backend: Arc<dyn LlmBackend>) -> BackendFactory {
    Arc::new(move |_, _| Ok(backend.clone()))
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub agent: AgentConfig,
    pub workers: usize,
    /// Trajectory logs go to `<log_dir>/<strategy>/<task>.jsonl`.
    pub log_dir: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            agent: AgentConfig::default(),
            workers: 1,
            log_dir: None,
        }
    }
}

pub struct Bench {
    pub world: Arc<World>,
    pub resources: Arc<AgentResources>,
}

struct TaskRun {
    journal: Vec<Message>,
    answer: Option<String>,
    usage: TokenUsage,
    status: String,
    failure: Option<String>,
}

impl Bench {
    /// Resources over the world's tools with the shipped prompts, rules and
    /// the in-memory sandbox.
    pub fn new(world: World) -> Result<Self, String> {
        Self::with_parts(
            world,
            TemplateRegistry::shipped(),
            AgentPolicy::shipped(),
            RuleTable::shipped(),
            TriggerSet::default(),
            RewriteRules::default(),
        )
    }

    pub fn with_parts(
        world: World,
        templates: TemplateRegistry,
        agent_policy: AgentPolicy,
        rules: RuleTable,
        triggers: TriggerSet,
        rewrite: RewriteRules,
    ) -> Result<Self, String> {
        let embedder = Arc::new(HashingEmbedder::default());
        let tools = index_registry(world.tool_specs(), embedder.as_ref()).map_err(|e| e.to_string())?;
        let few_shots = index_registry(world.few_shots.clone(), embedder.as_ref()).map_err(|e| e.to_string())?;
        let mut host_tools = ToolRegistry::new();
        for t in &world.tools {
            host_tools.register(t.clone().into_host_tool());
        }
        let resources = AgentResources {
            templates,
            agent_policy,
            tools,
            few_shots,
            host_tools: Arc::new(host_tools),
            embedder,
            reranker: Some(Arc::new(OverlapReranker)),
            rules,
            triggers,
            rewrite,
            launcher: Arc::new(InMemoryLauncher),
        };
        Ok(Self {
            world: Arc::new(world),
            resources: Arc::new(resources),
        })
    }

    async fn run_baseline(&self, strategy: Strategy, task: &SyntheticTask, cfg: &BenchConfig, backend: &dyn LlmBackend) -> TaskRun {
        let r = &self.resources;
        let shots = match retrieve(
            &r.few_shots,
            &task.query,
            cfg.agent.retrieval.k_shots,
            &cfg.agent.retrieval,
            r.embedder.as_ref(),
            r.reranker.as_deref(),
        ) {
            Ok(s) => render_few_shots(s),
            Err(e) => {
                warn!(task = %task.id, error = %e, "few-shot retrieval failed");
                render_few_shots(std::iter::empty())
            }
        };
        let descriptions = render_tools(r.tools.items());
        let ctx = BaselineContext {
            tools: &r.host_tools,
            tool_descriptions: &descriptions,
            few_shots: &shots,
            backend,
            step_limit: cfg.agent.step_limit,
            temperature: cfg.agent.temperature,
        };
        let run = match strategy {
            Strategy::ReAct => run_react(&ctx, &task.query).await,
            Strategy::PlanAndSolve => run_plan_and_solve(&ctx, &task.query).await,
            Strategy::PlanAndExecute => run_plan_and_execute(&ctx, &task.query).await,
            Strategy::PoAct => unreachable!("handled by the agent"),
        };
        let status = if run.answer.is_some() {
            TrajectoryStatus::Answered
        } else if run.step_limit_hit {
            TrajectoryStatus::StepLimit
        } else {
            TrajectoryStatus::Failed
        };
        TaskRun {
            journal: run.journal,
            answer: run.answer,
            usage: run.usage,
            status: status_name(status),
            failure: run.failure,
        }
    }

    async fn run_task(
        &self,
        strategy: Strategy,
        task: &SyntheticTask,
        cfg: &BenchConfig,
        backends: &BackendFactory,
    ) -> TaskResult {
        let run = match backends(task, strategy) {
            Err(e) => TaskRun {
                journal: Vec::new(),
                answer: None,
                usage: TokenUsage::ZERO,
                status: status_name(TrajectoryStatus::Failed),
                failure: Some(e),
            },
            Ok(backend) if strategy == Strategy::PoAct => {
                let agent = Agent::new(self.resources.clone(), cfg.agent.clone(), backend);
                let input = TaskInput {
                    id: task.id.clone(),
                    query: task.query.clone(),
                    task_type: Some(task.task_type.clone()),
                };
                let out = agent.run(&input).await;
                TaskRun {
                    usage: out.usage(),
                    status: status_name(out.status()),
                    answer: out.answer,
                    failure: out.failure,
                    journal: out.journal,
                }
            }
            Ok(backend) => self.run_baseline(strategy, task, cfg, backend.as_ref()).await,
        };

        let log_path = cfg.log_dir.as_ref().and_then(|dir| {
            let path = dir.join(strategy.as_str()).join(format!("{}.jsonl", task.id));
            match write_journal(&path, &run.journal) {
                Ok(()) => Some(path.display().to_string()),
                Err(e) => {
                    warn!(path = %path.display(), error = %e, "could not write trajectory log");
                    None
                }
            }
        });
        let sr = run.answer.as_deref().map_or(0.0, |a| evaluate_sr(a, &task.expected_keywords));
        TaskResult {
            task_id: task.id.clone(),
            hops: task.hops,
            task_type: task.task_type.clone(),
            answer: run.answer,
            sr,
            passed: sr >= 1.0,
            status: run.status,
            failure: run.failure,
            prompt_tokens: run.usage.prompt_tokens,
            completion_tokens: run.usage.completion_tokens,
            log_path,
        }
    }

    /// Runs every task under one strategy. Task failures score zero and
    /// never stop the batch; results keep the task order.
    pub async fn run_strategy(
        &self,
        strategy: Strategy,
        tasks: &[SyntheticTask],
        cfg: &BenchConfig,
        backends: &BackendFactory,
    ) -> RunReport {
        let results: Vec<TaskResult> = stream::iter(tasks)
            .map(|task| self.run_task(strategy, task, cfg, backends))
            .buffered(cfg.workers.max(1))
            .collect()
            .await;
        RunReport::from_results(strategy.as_str(), results)
    }
}

fn status_name(status: TrajectoryStatus) -> String {
    serde_json::to_value(status)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn write_journal(path: &Path, journal: &[Message]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_log(file, journal)
}

/// Writes `tools.json`, `few_shots.json` and `tasks.json` for a world.
pub fn write_world(dir: &Path, world: &World, tasks: &[SyntheticTask]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_table_tools(&dir.join("tools.json"), &world.tools)?;
    let shots = serde_json::to_string_pretty(&world.few_shots).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("few_shots.json"), shots + "\n")?;
    let tasks = serde_json::to_string_pretty(tasks).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("tasks.json"), tasks + "\n")
}

pub fn load_tasks(path: &Path) -> Result<Vec<SyntheticTask>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    let tasks: Vec<SyntheticTask> =
        serde_json::from_str(&text).map_err(|e| format!("parsing {}: {e}", path.display()))?;
    if let Some(t) = tasks.iter().find(|t| t.expected_keywords.is_empty()) {
        return Err(format!("task {} has no expected keywords", t.id));
    }
    Ok(tasks)
}
