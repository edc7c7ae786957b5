//! Acceptance suite: one PASS/FAIL line per criterion, against the
//! in-memory sandbox and scripted backends.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use poact_bench::oracle::poact_script;
use poact_bench::report::evaluate_sr;
use poact_bench::world::{generate, SyntheticTask, TaskCounts, World};
use poact_bench::Bench;
use poact_core::agent::{Agent, AgentConfig, AgentResources, RunOutcome, TaskInput};
use poact_core::conversation::{Message, Role, TrajectoryStatus};
use poact_core::executor::InMemoryLauncher;
use poact_core::llm::{ChatRequest, ChatResponse, LlmBackend, LlmError, ScriptStep, ScriptedBackend, TokenUsage};
use poact_core::policy::{AgentPolicy, PolicyError, PromptTemplate, StepPolicy, TemplateRegistry};
use poact_core::rag::{render_tools, retrieve_by_vector, FewShotExample, Registry, RetrievalConfig};
use poact_core::reviewer::{
    handle_exception, rewrite_answer, ErrorRecord, Failure, ReviewDecision, RewriteRules, RuleTable, Trigger,
    TriggerSet, CLASS_BACKTRACK, CLASS_REVISE_PLAN,
};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const E2E_WALL_LIMIT: Duration = Duration::from_secs(5);
const E2E_REPEATS: usize = 3;
const POLICY_RUNS: u64 = 100;
const RETRIEVAL_REGISTRIES: u64 = 200;
const RETRIEVAL_MAX_ITEMS: usize = 1000;
const RETRIEVAL_WALL_LIMIT: Duration = Duration::from_secs(30);
const TOKEN_MIN_TOOLS: usize = 30;
const FUZZ_CASES: u32 = 1000;
const PROMPT_CASES: u32 = 256;

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        name,
        pass,
        detail: detail.into(),
    }
}

fn world() -> (World, Vec<SyntheticTask>) {
    generate(7, TaskCounts::default())
}

fn lookup(world: &World, tool: &str, key: &str, field: &str) -> String {
    world.table(tool).unwrap().lookup(key).unwrap()[field].as_str().unwrap().to_string()
}

async fn run_agent(resources: Arc<AgentResources>, config: AgentConfig, backend: Arc<dyn LlmBackend>, query: &str) -> RunOutcome {
    let task = TaskInput {
        id: "acceptance".into(),
        query: query.into(),
        task_type: None,
    };
    Agent::new(resources, config, backend).run(&task).await
}

fn scripted(steps: Vec<ScriptStep>) -> Arc<dyn LlmBackend> {
    Arc::new(ScriptedBackend::new(steps))
}

fn plan(text: &str) -> ScriptStep {
    ScriptStep::new("Write the plan for the task", format!("<plan>\n{text}\n</plan>"))
}

fn thought(text: &str) -> ScriptStep {
    ScriptStep::new("Write the thought", format!("<thought>{text}</thought>"))
}

fn code(text: &str) -> ScriptStep {
    ScriptStep::new("<task>", format!("<code>\n{text}\n</code>"))
}

fn error_class(m: &Message) -> Option<String> {
    (m.role == Role::Error).then(|| ErrorRecord::parse(m.step_index, &m.content).error_class)
}

// ------------------------------------------------------------ end to end

async fn end_to_end() -> Verdict {
    let name = "end-to-end scripted 3-hop run";
    let (world, _) = world();
    let company = world.companies[0].clone();
    let subsidiary = lookup(&world, "get_company_info", &company, "subsidiary");
    let case = lookup(&world, "get_subcompany_info", &subsidiary, "case_number");
    let court = lookup(&world, "get_legal_document", &case, "court_name");
    let query = format!("Which court handled the case of the subsidiary of {company}?");
    let script = || {
        vec![
            plan("1. Find the subsidiary with get_company_info.\n2. Find its case number with get_subcompany_info.\n3. Find the court with get_legal_document.\n4. Return the court name."),
            thought(&format!("Look up the registration record of the company \"{company}\" with get_company_info to get its subsidiary.")),
            code(&format!("company = get_company_info(\"{company}\")\nprint(company[\"subsidiary\"])")),
            thought("Look up the subsidiary company by its subcompany name with get_subcompany_info to get the case number."),
            code("sub = get_subcompany_info(company[\"subsidiary\"])\nprint(sub[\"case_number\"])"),
            thought("Read the legal document (judgment) for the case number with get_legal_document to find the court name of the court that handled the case."),
            code("doc = get_legal_document(sub[\"case_number\"])\nprint(doc[\"court_name\"])"),
            thought("The court name is known; return it with final_answer."),
            code("final_answer(doc[\"court_name\"])"),
        ]
    };
    let resources = Bench::new(world).unwrap().resources;

    let mut journals = Vec::new();
    let mut slowest = Duration::ZERO;
    let mut problems = Vec::new();
    for _ in 0..E2E_REPEATS {
        let started = Instant::now();
        let out = run_agent(resources.clone(), AgentConfig::default(), scripted(script()), &query).await;
        slowest = slowest.max(started.elapsed());
        let sr = out.answer.as_deref().map_or(0.0, |a| evaluate_sr(a, &[court.clone()]));
        if sr != 1.0 {
            problems.push(format!("sr {sr} ({:?})", out.failure));
        }
        let j = &out.journal;
        let plans: Vec<&Message> = j.iter().filter(|m| m.role == Role::Plan).collect();
        if plans.len() != 1 || plans[0].step_index != 0 {
            problems.push("expected exactly one plan at step 0".into());
        }
        let full_rounds = (1..=out.trajectory.step_count())
            .filter(|s| {
                [Role::Thought, Role::Code, Role::Observation]
                    .iter()
                    .all(|r| j.iter().any(|m| m.step_index == *s && m.role == *r))
            })
            .count();
        if full_rounds < 3 {
            problems.push(format!("{full_rounds} thought/code/observation rounds"));
        }
        let last_code = j.iter().rev().find(|m| m.role == Role::Code).map(|m| m.content.clone());
        if !last_code.is_some_and(|c| c.contains("final_answer(")) || j.last().map(|m| m.role) != Some(Role::Answer) {
            problems.push("run does not end with a final-answer code action".into());
        }
        journals.push(j.clone());
    }
    if journals.windows(2).any(|w| w[0] != w[1]) {
        problems.push("journals differ across runs".into());
    }
    if slowest >= E2E_WALL_LIMIT {
        problems.push(format!("slowest run {slowest:?}"));
    }
    let detail = format!(
        "SR 1.0 x{E2E_REPEATS}, identical logs, slowest {:.1} ms (< {} s)",
        slowest.as_secs_f64() * 1000.0,
        E2E_WALL_LIMIT.as_secs()
    );
    verdict(name, problems.is_empty(), if problems.is_empty() { detail } else { problems.join("; ") })
}

// ------------------------------------------------------------ policy sequence

/// Answers whichever policy the request asks for, at random: malformed
/// replies, successful code, repeated failures, rejected code and answers.
struct RandomModel {
    rng: Mutex<ChaCha8Rng>,
}

#[async_trait]
impl LlmBackend for RandomModel {
    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let last = request.turns.last().map(|t| t.content.clone()).unwrap_or_default();
        let mut rng = self.rng.lock().unwrap();
        let text = if rng.random_bool(0.08) {
            "I am not sure what to do.".to_string()
        } else if last.contains("<task>") {
            let roll: f64 = rng.random();
            let body = if roll < 0.35 {
                "x = 1\nprint(x)"
            } else if roll < 0.80 {
                "print(undefined_name)"
            } else if roll < 0.88 {
                "forbidden_call()"
            } else {
                "final_answer('done')"
            };
            format!("<code>\n{body}\n</code>")
        } else if last.contains("plan") {
            "<plan>1. Work it out.</plan>".to_string()
        } else {
            "<thought>Next step.</thought>".to_string()
        };
        Ok(ChatResponse {
            text,
            usage: TokenUsage::new(10, 5),
            estimated: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Plan,
    Thought,
    Code,
    RevisePlan,
}

fn events(journal: &[Message]) -> Vec<Event> {
    journal
        .iter()
        .filter_map(|m| match m.role {
            Role::Plan => Some(Event::Plan),
            Role::Thought => Some(Event::Thought),
            Role::Code => Some(Event::Code),
            Role::Error if error_class(m).as_deref() == Some(CLASS_REVISE_PLAN) => Some(Event::RevisePlan),
            _ => None,
        })
        .collect()
}

/// Plan (Thought Code)+ where a Plan after the first follows a revise-plan
/// event.
fn sequence_violation(ev: &[Event]) -> Option<String> {
    if ev.first() != Some(&Event::Plan) {
        return Some("does not start with a plan".into());
    }
    for (i, e) in ev.iter().enumerate().skip(1) {
        let prev = ev[i - 1];
        let ok = match e {
            Event::Plan => prev == Event::RevisePlan,
            Event::Thought => matches!(prev, Event::Plan | Event::Code | Event::RevisePlan),
            Event::Code => prev == Event::Thought,
            Event::RevisePlan => prev == Event::Code,
        };
        if !ok {
            return Some(format!("{e:?} after {prev:?} at {i}"));
        }
    }
    if ev.last() == Some(&Event::Thought) {
        return Some("ends with a thought".into());
    }
    if !ev.windows(2).any(|w| w == [Event::Thought, Event::Code]) {
        return Some("no thought/code round".into());
    }
    None
}

async fn policy_sequences() -> Verdict {
    let name = "policy sequence invariant";
    let (world, _) = world();
    let triggers = TriggerSet::new(vec![Trigger::keyword("no-forbidden", "forbidden_call", "Do not call that.")]).unwrap();
    let base = Bench::new(world).unwrap().resources;
    let resources = Arc::new(AgentResources {
        templates: base.templates.clone(),
        agent_policy: base.agent_policy.clone(),
        tools: base.tools.clone(),
        few_shots: base.few_shots.clone(),
        host_tools: base.host_tools.clone(),
        embedder: base.embedder.clone(),
        reranker: base.reranker.clone(),
        rules: base.rules.clone(),
        triggers,
        rewrite: base.rewrite.clone(),
        launcher: Arc::new(InMemoryLauncher),
    });

    let mut violations = Vec::new();
    let (mut revisions, mut backtracks, mut rejects) = (0, 0, 0);
    for seed in 0..POLICY_RUNS {
        let backend = Arc::new(RandomModel {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        });
        let out = run_agent(resources.clone(), AgentConfig::default(), backend, "Do the task.").await;
        for d in &out.decisions {
            match d {
                ReviewDecision::RevisePlan { .. } => revisions += 1,
                ReviewDecision::Backtrack { .. } => backtracks += 1,
                ReviewDecision::Reject { .. } => rejects += 1,
                ReviewDecision::Accept => {}
            }
        }
        let ev = events(&out.journal);
        let policies: Vec<Event> = ev.iter().copied().filter(|e| *e != Event::RevisePlan).collect();
        let accepted: Vec<Event> = out
            .policies
            .iter()
            .map(|p| match p {
                StepPolicy::Plan => Event::Plan,
                StepPolicy::Thought => Event::Thought,
                StepPolicy::Code => Event::Code,
            })
            .collect();
        if policies != accepted {
            violations.push(format!("seed {seed}: journal and policy list disagree"));
        }
        if let Some(v) = sequence_violation(&ev) {
            violations.push(format!("seed {seed}: {v}"));
        }
        if out.status() == TrajectoryStatus::Failed {
            violations.push(format!("seed {seed}: failed: {:?}", out.failure));
        }
    }
    let pass = violations.is_empty() && revisions > 0;
    let detail = if violations.is_empty() {
        format!("{POLICY_RUNS} runs, 0 violations ({backtracks} backtracks, {revisions} plan revisions, {rejects} rejections)")
    } else {
        format!("{} violations: {}", violations.len(), violations[..violations.len().min(3)].join("; "))
    };
    verdict(name, pass, detail)
}

// ------------------------------------------------------------ retrieval

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn retrieval_equivalence() -> Verdict {
    let name = "retrieval oracle equivalence";
    let started = Instant::now();
    let config = RetrievalConfig {
        rerank_enabled: false,
        ..RetrievalConfig::default()
    };
    let mut mismatches = Vec::new();
    let mut ties = 0usize;
    for seed in 0..RETRIEVAL_REGISTRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.random_range(1..=RETRIEVAL_MAX_ITEMS);
        let dim = rng.random_range(2..=64);
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            // some duplicates so the name tie-break is exercised
            if i > 0 && rng.random_bool(0.1) {
                let j = rng.random_range(0..i);
                vectors.push(vectors[j].clone());
                ties += 1;
            } else {
                vectors.push(unit_vector(&mut rng, dim));
            }
        }
        let mut names: Vec<String> = (0..n).map(|i| format!("item-{i:04}")).collect();
        names.shuffle(&mut rng);
        let items: Vec<FewShotExample> = names
            .iter()
            .zip(&vectors)
            .map(|(name, v)| FewShotExample {
                task_type: name.clone(),
                content: name.clone(),
                embedding: Some(v.clone()),
            })
            .collect();
        let registry = Registry::from_embedded(items).unwrap();
        let query = unit_vector(&mut rng, dim);
        let k = rng.random_range(1..=n + 5);

        let got: BTreeSet<String> = retrieve_by_vector(&registry, "", &query, k, &config, None)
            .unwrap()
            .into_iter()
            .map(|i| i.task_type.clone())
            .collect();

        let mut brute: Vec<(f64, &String)> = names
            .iter()
            .zip(&vectors)
            .map(|(name, v)| (v.iter().zip(&query).map(|(a, b)| a * b).sum::<f64>(), name))
            .collect();
        brute.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        let want: BTreeSet<String> = brute.into_iter().take(k).map(|(_, n)| n.clone()).collect();
        if got != want {
            mismatches.push(seed);
        }
    }
    let elapsed = started.elapsed();
    let pass = mismatches.is_empty() && elapsed < RETRIEVAL_WALL_LIMIT;
    verdict(
        name,
        pass,
        format!(
            "{RETRIEVAL_REGISTRIES} registries (<= {RETRIEVAL_MAX_ITEMS} items, {ties} duplicated vectors), {} mismatches, {:.2} s (< {} s)",
            mismatches.len(),
            elapsed.as_secs_f64(),
            RETRIEVAL_WALL_LIMIT.as_secs()
        ),
    )
}

// ------------------------------------------------------------ backtracking

async fn backtracking() -> Verdict {
    let name = "backtracking correctness";
    let (world, _) = world();
    let company = world.companies[1].clone();
    let subsidiary = lookup(&world, "get_company_info", &company, "subsidiary");
    let case = lookup(&world, "get_subcompany_info", &subsidiary, "case_number");
    let court = lookup(&world, "get_legal_document", &case, "court_name");
    let query = format!("Which court handled the case of the subsidiary of {company}?");
    let resources = Bench::new(world).unwrap().resources;

    let sub_thought = "Look up the subsidiary company by its subcompany name with get_subcompany_info to get the case number.";
    let script = vec![
        plan("1. get_company_info\n2. get_subcompany_info\n3. get_legal_document"),
        thought(&format!("Look up the registration record of the company \"{company}\" with get_company_info to get its subsidiary.")),
        code(&format!("r1 = get_company_info(\"{company}\")\nprint(r1)")),
        thought(sub_thought),
        code("r2 = get_subcompany_info(r1[\"subsidiary\"])\nprint(r2[\"case_no\"])"),
        thought(sub_thought),
        code("print(r2[\"case_no\"])"),
        thought(sub_thought),
        code("print(r2[\"case_no\"])"),
        // after the backtrack: r2 was bound after the target step
        thought(sub_thought),
        code("print(r2)"),
        thought(sub_thought),
        code("r2 = get_subcompany_info(r1[\"subsidiary\"])\nprint(r2[\"case_number\"])"),
        thought("Read the legal document (judgment) for the case number with get_legal_document to find the court name of the court that handled the case."),
        code("r3 = get_legal_document(r2[\"case_number\"])\nfinal_answer(r3[\"court_name\"])"),
    ];
    let out = run_agent(resources, AgentConfig::default(), scripted(script), &query).await;

    let mut problems = Vec::new();
    let target = match out.decisions.as_slice() {
        [ReviewDecision::Backtrack { to_step, .. }] => *to_step,
        other => {
            return verdict(name, false, format!("expected one backtrack, got {other:?} ({:?})", out.failure));
        }
    };
    if target != 1 {
        problems.push(format!("target step {target}, expected 1"));
    }
    let hint = out
        .journal
        .iter()
        .position(|m| error_class(m).as_deref() == Some(CLASS_BACKTRACK))
        .unwrap();
    let mut oracle: Vec<Message> = out.journal[..hint].iter().filter(|m| m.step_index <= target).cloned().collect();
    oracle.extend(out.journal[hint..].iter().cloned());
    if out.trajectory.messages() != oracle.as_slice() {
        problems.push("truncated trajectory differs from the filter-by-step oracle".into());
    }
    let first_after = out.journal[hint + 1..].iter().find(|m| m.role == Role::Error).map(|m| m.content.clone());
    if !first_after.is_some_and(|c| c.contains("name 'r2' is not defined")) {
        problems.push("restored session still sees r2".into());
    }
    if out.answer.as_deref().map_or(0.0, |a| evaluate_sr(a, &[court.clone()])) != 1.0 {
        problems.push(format!("recovery did not answer: {:?} {:?}", out.answer, out.failure));
    }
    let detail = format!("backtrack to step {target}; truncation matches oracle; r2 unbound after restore; recovered with SR 1.0");
    verdict(name, problems.is_empty(), if problems.is_empty() { detail } else { problems.join("; ") })
}

// ------------------------------------------------------------ token budget

async fn token_direction() -> Verdict {
    let name = "token-budget direction";
    let (world, tasks) = world();
    let tool_count = world.tools.len();
    let task = tasks.iter().find(|t| t.id == "hop3-000").unwrap().clone();
    let resources = Bench::new(world).unwrap().resources;

    let run = |retrieval: RetrievalConfig| {
        let resources = resources.clone();
        let task = task.clone();
        async move {
            let config = AgentConfig {
                retrieval,
                ..AgentConfig::default()
            };
            run_agent(resources, config, scripted(poact_script(&task).unwrap()), &task.query).await
        }
    };
    let k5 = run(RetrievalConfig { k_tools: 5, ..RetrievalConfig::default() }).await;
    let k10 = run(RetrievalConfig { k_tools: 10, ..RetrievalConfig::default() }).await;
    let full = run(RetrievalConfig { selector_enabled: false, ..RetrievalConfig::default() }).await;

    let answered = [&k5, &k10, &full].iter().all(|o| o.status() == TrajectoryStatus::Answered);
    let p5 = k5.usage().prompt_tokens;
    let pfull = full.usage().prompt_tokens;
    let len = |k: usize| render_tools(resources.tools.items().iter().take(k)).len();
    let rendered = [len(5), len(10), len(tool_count)];
    let injected = [k5.injected_tool_chars, k10.injected_tool_chars, full.injected_tool_chars];
    let monotone = rendered.windows(2).all(|w| w[0] <= w[1]) && injected.windows(2).all(|w| w[0] <= w[1]);
    let pass = tool_count >= TOKEN_MIN_TOOLS && answered && p5 < pfull && monotone;
    verdict(
        name,
        pass,
        format!(
            "{tool_count} tools; prompt tokens k=5 {p5} < no-selector {pfull}; injected chars 5/10/full {}/{}/{}",
            injected[0], injected[1], injected[2]
        ),
    )
}

// ------------------------------------------------------------ reviewer fuzz

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        PropConfig {
            cases,
            failure_persistence: None,
            ..PropConfig::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

/// Half-away-from-zero rounding of `mantissa / 10^scale` to `places`,
/// as a scaled integer.
fn round_scaled(mantissa: i64, scale: u32, places: u32) -> i128 {
    let m = i128::from(mantissa);
    if scale <= places {
        return m * 10i128.pow(places - scale);
    }
    let div = 10i128.pow(scale - places);
    let (q, r) = (m.abs() / div, m.abs() % div);
    let q = if r * 2 >= div { q + 1 } else { q };
    q * m.signum()
}

fn format_scaled(mantissa: i64, scale: u32) -> String {
    let sign = if mantissa < 0 { "-" } else { "" };
    let a = mantissa.unsigned_abs();
    if scale == 0 {
        return format!("{sign}{a}");
    }
    let div = 10u64.pow(scale);
    format!("{sign}{}.{:0width$}", a / div, a % div, width = scale as usize)
}

/// Numbers in `text` scaled by `10^places`, parsed with a plain pattern.
fn scaled_numbers(text: &str, places: u32) -> Vec<i128> {
    number_tokens(text)
        .into_iter()
        .map(|(neg, int, frac)| {
            let mut frac = frac;
            frac.truncate(places as usize);
            while frac.len() < places as usize {
                frac.push('0');
            }
            let v: i128 = format!("{int}{frac}").parse().unwrap();
            if neg { -v } else { v }
        })
        .collect()
}

/// `-?digits(.digits)?` tokens.
fn number_tokens(text: &str) -> Vec<(bool, String, String)> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i].is_ascii_digit() {
            let neg = i > 0 && b[i - 1] == b'-';
            let s = i;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            let int = text[s..i].to_string();
            let mut frac = String::new();
            if i + 1 < b.len() && b[i] == b'.' && b[i + 1].is_ascii_digit() {
                i += 1;
                let f = i;
                while i < b.len() && b[i].is_ascii_digit() {
                    i += 1;
                }
                frac = text[f..i].to_string();
            }
            out.push((neg, int, frac));
        } else {
            i += 1;
        }
    }
    out
}

fn reviewer_fuzz(rt: &tokio::runtime::Runtime) -> Verdict {
    let name = "reviewer totality and numeric preservation";
    let rules = RuleTable::shipped();
    let classes = [
        "name-error", "syntax-error", "import-violation", "tool-failure", "timeout", "crash", "key-error",
        "type-error", "zero-division",
    ];
    let failure = (
        prop_oneof![proptest::sample::select(classes.to_vec()).prop_map(String::from), "[a-z][a-z-]{0,15}"],
        "[ -~]{0,80}",
        0u32..50,
    );
    let totality = runner(FUZZ_CASES).run(&failure, |(class, message, step)| {
        let m = handle_exception(&Failure::new(class.clone(), message), step, &rules);
        let rec = ErrorRecord::parse(step, &m.content);
        prop_assert_eq!(m.role, Role::Error);
        prop_assert_eq!(m.step_index, step);
        prop_assert!(!rec.cause_hint.trim().is_empty() && !rec.solution_hint.trim().is_empty());
        Ok(())
    });

    let words = ["total", "is", "about", "yuan", "and", "with", "units", "rate"];
    let answer = (
        proptest::collection::vec((-10_000_000i64..10_000_000, 0u32..7, 0usize..words.len()), 1..6),
        proptest::option::of(0u32..5),
    );
    let rules_rw = RewriteRules::default();
    let preservation = runner(FUZZ_CASES).run(&answer, |(numbers, places)| {
        let text: Vec<String> = numbers
            .iter()
            .map(|(m, s, w)| format!("{} {}", words[*w], format_scaled(*m, *s)))
            .collect();
        let text = text.join(" ");
        let query = match places {
            Some(p) => format!("What is the total? Round to {p} decimal places."),
            None => "What is the total?".to_string(),
        };
        let (out, _) = rt.block_on(rewrite_answer(&query, &text, &rules_rw, None));
        let check_places = places.unwrap_or(6);
        let got = scaled_numbers(&out, check_places);
        let want: Vec<i128> = numbers
            .iter()
            .map(|(m, s, _)| match places {
                // integers are never rewritten
                Some(p) if *s > 0 => round_scaled(*m, *s, p),
                _ => round_scaled(*m, *s, check_places),
            })
            .collect();
        prop_assert_eq!(got, want, "{} -> {}", text, out);
        Ok(())
    });

    let mut problems = Vec::new();
    if let Err(e) = totality {
        problems.push(format!("totality: {e}"));
    }
    if let Err(e) = preservation {
        problems.push(format!("numbers: {e}"));
    }
    let detail = format!("{FUZZ_CASES} failures and {FUZZ_CASES} answers, 0 violations");
    verdict(name, problems.is_empty(), if problems.is_empty() { detail } else { problems.join("; ") })
}

// ------------------------------------------------------------ prompt assembly

fn prompt_assembly() -> Verdict {
    let name = "prompt assembly";
    let templates = TemplateRegistry::shipped();
    let agent_policy = AgentPolicy::shipped();
    let vocab = ["lookup", "<b>", "</code>", "a > b", "x<y", "{\"k\": 1}", "法院", "$1", "\\n", "%s", "{}"];
    let payload = (
        proptest::collection::btree_set("[a-z][a-z_]{2,20}", 1..12),
        proptest::collection::vec(proptest::sample::select(vocab.to_vec()), 0..30),
        proptest::collection::vec("[a-z]{1,8}", 0..4),
    );
    let assembled = runner(PROMPT_CASES).run(&payload, |(names, words, imports)| {
        let text = words.join(" ");
        let tools: String = names
            .iter()
            .map(|n| format!("- {n}: {text}\n  Input example: {n}(\"x\")"))
            .collect::<Vec<_>>()
            .join("\n");
        for policy in StepPolicy::ALL {
            let prompt = templates
                .assemble_system_prompt(policy, &agent_policy, &tools, &text, &imports)
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!(!prompt.contains("<<"), "{} prompt has <<", policy);
            for n in &names {
                prop_assert!(prompt.contains(n.as_str()), "{} prompt lacks {}", policy, n);
            }
        }
        Ok(())
    });

    let mut problems = Vec::new();
    if let Err(e) = assembled {
        problems.push(e.to_string());
    }
    for policy in StepPolicy::ALL {
        let body = format!("{}\n<<oops>>\n", templates.get(policy).unwrap().body());
        let mut reg = TemplateRegistry::shipped();
        reg.register_template(policy, PromptTemplate::new(policy, body).unwrap()).unwrap();
        let got = reg.assemble_system_prompt(policy, &agent_policy, "- t", "", &[]);
        if got != Err(PolicyError::UnresolvedPlaceholder("oops".into())) {
            problems.push(format!("{policy}: mutated template gave {got:?}"));
        }
    }
    let detail = format!("3 templates x {PROMPT_CASES} payloads: no '<<', every tool named; <<oops>> unresolved in all 3");
    verdict(name, problems.is_empty(), if problems.is_empty() { detail } else { problems.join("; ") })
}

// ------------------------------------------------------------ SR metric

fn sr_metric() -> Verdict {
    let name = "SR metric";
    let kw = |ks: &[&str]| ks.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let table = [
        ("Li Wei and C1234", kw(&["Li Wei", "C1234"]), 1.0),
        ("only Li Wei", kw(&["Li Wei", "C1234"]), 0.5),
        ("", kw(&["Li Wei"]), 0.0),
        ("the court is  Eastport\n District Court", kw(&["Eastport District   Court"]), 1.0),
    ];
    let failures: Vec<String> = table
        .iter()
        .filter(|(a, k, want)| evaluate_sr(a, k) != *want)
        .map(|(a, _, want)| format!("{a:?} expected {want}"))
        .collect();
    verdict(
        name,
        failures.is_empty(),
        if failures.is_empty() { "all-present 1.0, half 0.5, empty 0.0, whitespace variant 1.0".into() } else { failures.join("; ") },
    )
}

fn main() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let verdicts = vec![
        rt.block_on(end_to_end()),
        rt.block_on(policy_sequences()),
        retrieval_equivalence(),
        rt.block_on(backtracking()),
        rt.block_on(token_direction()),
        reviewer_fuzz(&rt),
        prompt_assembly(),
        sr_metric(),
    ];
    let mut out = std::io::stdout().lock();
    let mut failed = 0;
    for v in &verdicts {
        failed += usize::from(!v.pass);
        let _ = writeln!(out, "{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
    let _ = writeln!(out, "acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    drop(out);
    if failed > 0 {
        std::process::exit(1);
    }
}
