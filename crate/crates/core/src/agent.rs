//! The dual-control loop: plan, then thought/code rounds, with the policy
//! controller picking each step's system prompt, the selector narrowing the
//! visible tools and the reviewer vetting code before it runs.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::conversation::{
    close_stopped_tag, parse_model_output, BacktrackEvent, HistoryFormat, Message, Role, Trajectory,
    TrajectoryStatus,
};
use crate::executor::tools::ToolRegistry;
use crate::executor::transport::Launcher;
use crate::executor::{ExecConfig, Session};
use crate::llm::{ChatRequest, ChatTurn, LlmBackend, TokenUsage, DEFAULT_TEMPERATURE};
use crate::policy::{next_policy, AgentPolicy, StepPolicy, TemplateRegistry};
use crate::rag::{
    select_action_space, ActionSpace, EmbeddingProvider, FewShotExample, Providers, Registry, RerankProvider,
    RetrievalConfig, ToolSpec,
};
use crate::reviewer::{
    handle_exception, hint_message, reflect_code, rewrite_answer, rewrite_query, Failure, ReviewDecision,
    RewriteRules, RuleTable, TriggerSet, CLASS_BACKTRACK, CLASS_MALFORMED_OUTPUT, CLASS_REJECTED_CODE,
    CLASS_REVISE_PLAN, DEFAULT_ERROR_WINDOW,
};

pub const DEFAULT_STEP_LIMIT: u32 = 20;
/// Completions allowed per reasoning round before the run is cut off, so
/// malformed replies cannot loop forever.
const COMPLETIONS_PER_ROUND: u32 = 4;
pub const NO_OUTPUT: &str = "(no output)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub retrieval: RetrievalConfig,
    /// Maximum number of thought/code rounds.
    pub step_limit: u32,
    pub error_window: usize,
    /// Query and answer rewriting.
    pub qar: bool,
    /// Code-action reflection (triggers and repeated-error backtracking).
    pub car: bool,
    pub history_format: HistoryFormat,
    pub authorized_imports: Vec<String>,
    pub exec: ExecConfig,
    pub temperature: f64,
    /// Ask the backend to stop at the closing tag of the expected block.
    pub stop_sequences: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig::default(),
            step_limit: DEFAULT_STEP_LIMIT,
            error_window: DEFAULT_ERROR_WINDOW,
            qar: true,
            car: true,
            history_format: HistoryFormat::default(),
            authorized_imports: Vec::new(),
            exec: ExecConfig::default(),
            temperature: DEFAULT_TEMPERATURE,
            stop_sequences: false,
        }
    }
}

/// Everything a run reads but never changes. Shared across parallel runs.
pub struct AgentResources {
    pub templates: TemplateRegistry,
    pub agent_policy: AgentPolicy,
    pub tools: Registry<ToolSpec>,
    pub few_shots: Registry<FewShotExample>,
    pub host_tools: Arc<ToolRegistry>,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub reranker: Option<Arc<dyn RerankProvider>>,
    pub rules: RuleTable,
    pub triggers: TriggerSet,
    pub rewrite: RewriteRules,
    pub launcher: Arc<dyn Launcher>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInput {
    pub id: String,
    pub query: String,
    #[serde(default)]
    pub task_type: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub task_id: String,
    /// Final trajectory (after any truncation).
    pub trajectory: Trajectory,
    /// Every message in the order it was appended, including messages later
    /// removed by backtracking. This is what the trajectory log holds.
    pub journal: Vec<Message>,
    /// Policies of the accepted model outputs, in order.
    pub policies: Vec<StepPolicy>,
    pub decisions: Vec<ReviewDecision>,
    pub answer: Option<String>,
    /// Why the run failed, when its status is `failed`.
    pub failure: Option<String>,
    /// Total characters of tool descriptions injected into system prompts.
    pub injected_tool_chars: usize,
}

impl RunOutcome {
    pub fn status(&self) -> TrajectoryStatus {
        self.trajectory.status()
    }

    pub fn usage(&self) -> TokenUsage {
        self.trajectory.usage()
    }
}

pub struct Agent {
    resources: Arc<AgentResources>,
    config: AgentConfig,
    backend: Arc<dyn LlmBackend>,
}

fn user_instruction(policy: StepPolicy, revising: bool) -> &'static str {
    match policy {
        StepPolicy::Plan if revising => "The current plan is not working. Write a revised plan inside <plan></plan>.",
        StepPolicy::Plan => "Write the plan for the task inside <plan></plan>.",
        StepPolicy::Thought => "Write the thought for the next round inside <thought></thought>.",
        StepPolicy::Code => "Write the code for the current thought inside <code></code>.",
    }
}

fn closing_tag(policy: StepPolicy) -> String {
    format!("</{}>", policy.as_str())
}

struct RunState {
    trajectory: Trajectory,
    journal: Vec<Message>,
    pending: TokenUsage,
    policies: Vec<StepPolicy>,
    decisions: Vec<ReviewDecision>,
    injected_tool_chars: usize,
}

impl RunState {
    /// Appends a message carrying `usage` plus any usage not yet attributed.
    fn push(&mut self, mut message: Message, usage: TokenUsage) {
        let total = usage + std::mem::take(&mut self.pending);
        if !total.is_zero() {
            message.tokens = Some(total);
        }
        self.journal.push(message.clone());
        self.trajectory
            .append_message(message)
            .expect("the loop only appends well-ordered messages");
    }
}

impl Agent {
    pub fn new(resources: Arc<AgentResources>, config: AgentConfig, backend: Arc<dyn LlmBackend>) -> Self {
        Self {
            resources,
            config,
            backend,
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    fn select(&self, trajectory: &Trajectory) -> Result<ActionSpace, String> {
        let r = &self.resources;
        let providers = Providers {
            embedder: r.embedder.as_ref(),
            reranker: r.reranker.as_deref(),
        };
        select_action_space(trajectory, &r.tools, &r.few_shots, &self.config.retrieval, &providers)
            .map_err(|e| e.to_string())
    }

    fn request(&self, policy: StepPolicy, space: &ActionSpace, trajectory: &Trajectory) -> Result<ChatRequest, String> {
        let r = &self.resources;
        let system = r
            .templates
            .assemble_system_prompt(
                policy,
                &r.agent_policy,
                &space.tool_descriptions,
                &space.few_shots,
                &self.config.authorized_imports,
            )
            .map_err(|e| e.to_string())?;
        let mut turns = vec![ChatTurn::system(system)];
        turns.extend(trajectory.render_history(self.config.history_format));
        if policy == StepPolicy::Code {
            let goal = trajectory.query().unwrap_or_default();
            let task = trajectory.latest(Role::Thought).map_or("", |m| m.content.as_str());
            turns.push(ChatTurn::user(format!(
                "<final_goal>{goal}</final_goal>\n<task>{task}</task>\n{}",
                user_instruction(policy, false)
            )));
        } else {
            let revising = policy == StepPolicy::Plan && trajectory.global_plan().is_some();
            turns.push(ChatTurn::user(user_instruction(policy, revising)));
        }
        let mut request = ChatRequest::new(turns).with_temperature(self.config.temperature);
        if self.config.stop_sequences && policy != StepPolicy::Plan {
            request = request.with_stop_sequences(vec![closing_tag(policy)]);
        }
        Ok(request)
    }

    /// Runs one task to an answer, the step limit, or a failure. Never
    /// panics on model or sandbox misbehaviour; those end up in the outcome.
    pub async fn run(&self, task: &TaskInput) -> RunOutcome {
        let mut st = RunState {
            trajectory: Trajectory::new(),
            journal: Vec::new(),
            pending: TokenUsage::ZERO,
            policies: Vec::new(),
            decisions: Vec::new(),
            injected_tool_chars: 0,
        };
        let failure = self.drive(task, &mut st).await.err();
        if let Some(reason) = &failure {
            info!(task = %task.id, %reason, "run failed");
            st.trajectory.set_status(TrajectoryStatus::Failed);
        }
        if !st.pending.is_zero() {
            // usage spent after the last message, e.g. on a failed call
            st.trajectory.charge(std::mem::take(&mut st.pending));
        }
        RunOutcome {
            task_id: task.id.clone(),
            answer: st.trajectory.answer().map(str::to_string),
            trajectory: st.trajectory,
            journal: st.journal,
            policies: st.policies,
            decisions: st.decisions,
            failure,
            injected_tool_chars: st.injected_tool_chars,
        }
    }

    async fn drive(&self, task: &TaskInput, st: &mut RunState) -> Result<(), String> {
        let r = &self.resources;
        let backend: &dyn LlmBackend = self.backend.as_ref();

        let query = if self.config.qar {
            let (q, usage) = rewrite_query(&task.query, task.task_type.as_deref(), &r.rewrite, Some(backend)).await;
            st.pending += usage;
            q
        } else {
            task.query.clone()
        };
        st.push(Message::new(Role::Query, query, 0), TokenUsage::ZERO);

        let initial = self.select(&st.trajectory)?;
        let mut session = Session::open(
            task.id.clone(),
            r.launcher.clone(),
            r.host_tools.clone(),
            initial.selected_tool_ids.clone(),
            self.config.authorized_imports.clone(),
            self.config.exec,
        )
        .await
        .map_err(|e| e.to_string())?;

        let result = self.rounds(st, &mut session).await;
        session.close().await;
        result
    }

    async fn rounds(&self, st: &mut RunState, session: &mut Session) -> Result<(), String> {
        let r = &self.resources;
        let backend: &dyn LlmBackend = self.backend.as_ref();
        let max_completions = self.config.step_limit.max(1) * COMPLETIONS_PER_ROUND;
        let mut completions = 0u32;
        let mut rounds = 0u32;

        while st.trajectory.status() == TrajectoryStatus::Running {
            let policy = next_policy(&st.trajectory).map_err(|e| e.to_string())?;
            if policy == StepPolicy::Thought && rounds >= self.config.step_limit {
                st.trajectory.set_status(TrajectoryStatus::StepLimit);
                break;
            }
            if completions >= max_completions {
                st.trajectory.set_status(TrajectoryStatus::StepLimit);
                break;
            }

            let space = self.select(&st.trajectory)?;
            st.injected_tool_chars += space.tool_descriptions.len();
            let request = self.request(policy, &space, &st.trajectory)?;
            completions += 1;
            let response = backend.complete(&request).await.map_err(|e| e.to_string())?;
            let raw = if self.config.stop_sequences {
                close_stopped_tag(&response.text, policy)
            } else {
                response.text.clone()
            };
            let usage = response.usage;
            debug!(policy = policy.as_str(), tokens = usage.total(), "completion");

            let parsed = parse_model_output(&raw, policy).ok().filter(|out| match policy {
                StepPolicy::Plan => out.plan.as_deref().is_some_and(|p| !p.trim().is_empty()),
                StepPolicy::Thought => out.thought.is_some(),
                StepPolicy::Code => out.code.as_deref().is_some_and(|c| !c.trim().is_empty()),
            });
            let Some(out) = parsed else {
                let step = match policy {
                    StepPolicy::Code => st.trajectory.step_count(),
                    _ if st.trajectory.global_plan().is_none() => 0,
                    _ => st.trajectory.opening_step(),
                };
                let failure = Failure::new(
                    CLASS_MALFORMED_OUTPUT,
                    format!("expected a <{}> block in the reply", policy.as_str()),
                );
                st.push(handle_exception(&failure, step, &r.rules), usage);
                continue;
            };

            match policy {
                StepPolicy::Plan => {
                    let step = if st.trajectory.global_plan().is_none() && st.trajectory.step_count() == 0 {
                        0
                    } else {
                        st.trajectory.opening_step()
                    };
                    st.policies.push(policy);
                    st.push(Message::new(Role::Plan, out.plan.unwrap_or_default(), step), usage);
                }
                StepPolicy::Thought => {
                    let step = st.trajectory.opening_step();
                    rounds += 1;
                    st.policies.push(policy);
                    st.push(Message::new(Role::Thought, out.thought.unwrap_or_default(), step), usage);
                }
                StepPolicy::Code => {
                    let code = out.code.unwrap_or_default();
                    let step = st.trajectory.step_count();
                    st.policies.push(policy);
                    let decision = self.review(st, &code).await;
                    st.push(Message::new(Role::Code, code.clone(), step), usage);
                    self.act(st, session, &space, &code, step, decision).await?;
                }
            }
        }
        Ok(())
    }

    /// Vets a code action against the trajectory as it stood before the
    /// action was appended.
    async fn review(&self, st: &mut RunState, code: &str) -> ReviewDecision {
        if !self.config.car {
            return ReviewDecision::Accept;
        }
        let r = &self.resources;
        let review = reflect_code(code, &st.trajectory, &r.triggers, self.backend.as_ref(), self.config.error_window).await;
        st.pending += review.usage;
        for note in &review.audit {
            debug!("{note}");
        }
        if review.decision != ReviewDecision::Accept {
            st.decisions.push(review.decision.clone());
        }
        review.decision
    }

    /// Applies the review decision and executes an accepted code action.
    async fn act(
        &self,
        st: &mut RunState,
        session: &mut Session,
        space: &ActionSpace,
        code: &str,
        step: u32,
        decision: ReviewDecision,
    ) -> Result<(), String> {
        let r = &self.resources;
        let backend: &dyn LlmBackend = self.backend.as_ref();

        match decision {
            ReviewDecision::Accept => {}
            ReviewDecision::Reject { hint } => {
                st.push(hint_message(CLASS_REJECTED_CODE, &hint, step, &r.rules), TokenUsage::ZERO);
                return Ok(());
            }
            ReviewDecision::Backtrack { to_step, hint } => {
                info!(from = step, to = to_step, "backtracking");
                st.trajectory = st
                    .trajectory
                    .truncate_to_step(i64::from(to_step))
                    .map_err(|e| e.to_string())?;
                st.trajectory.record_backtrack(BacktrackEvent {
                    from_step: step,
                    to_step,
                });
                session.restore_to_step(to_step).await.map_err(|e| e.to_string())?;
                let at = st.trajectory.opening_step();
                st.push(hint_message(CLASS_BACKTRACK, &hint, at, &r.rules), TokenUsage::ZERO);
                return Ok(());
            }
            ReviewDecision::RevisePlan { hint } => {
                st.push(hint_message(CLASS_REVISE_PLAN, &hint, step, &r.rules), TokenUsage::ZERO);
                st.trajectory.request_plan_revision();
                return Ok(());
            }
        }

        session
            .set_visible_tools(space.selected_tool_ids.clone())
            .await
            .map_err(|e| e.to_string())?;
        let result = session.execute(code, step).await.map_err(|e| e.to_string())?;

        if let Some(failure) = &result.failure {
            st.push(handle_exception(failure, step, &r.rules), TokenUsage::ZERO);
            return Ok(());
        }
        if let Some(answer) = result.final_answer {
            let mut observation = result.stdout.clone();
            if !observation.is_empty() && !observation.ends_with('\n') {
                observation.push('\n');
            }
            observation.push_str(&format!("Final answer: {answer}"));
            st.push(Message::new(Role::Observation, observation, step), TokenUsage::ZERO);

            let query = st.trajectory.query().unwrap_or_default().to_string();
            let answer = if self.config.qar {
                let (a, usage) = rewrite_answer(&query, &answer, &r.rewrite, Some(backend)).await;
                st.pending += usage;
                a
            } else {
                answer
            };
            st.push(Message::new(Role::Answer, answer, step), TokenUsage::ZERO);
            st.trajectory.set_status(TrajectoryStatus::Answered);
            return Ok(());
        }
        let observation = if result.stdout.trim().is_empty() {
            NO_OUTPUT.to_string()
        } else {
            result.stdout
        };
        st.push(Message::new(Role::Observation, observation, step), TokenUsage::ZERO);
        Ok(())
    }
}
