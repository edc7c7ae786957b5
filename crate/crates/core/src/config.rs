//! TOML runtime configuration: backend, prompt directory, registries,
//! retrieval, reviewer and executor settings.
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentConfig, AgentResources, DEFAULT_STEP_LIMIT};
use crate::conversation::HistoryFormat;
use crate::executor::tools::{load_table_tools, TableTool, ToolRegistry};
use crate::executor::transport::{InMemoryLauncher, Launcher, ProcessLauncher};
use crate::executor::ExecConfig;
use crate::llm::{HttpBackend, HttpBackendConfig, LlmBackend, ScriptedBackend, DEFAULT_TEMPERATURE};
use crate::policy::TemplateRegistry;
use crate::rag::{
    index_registry, load_few_shots, EmbeddingProvider, HashingEmbedder, OverlapReranker, RerankProvider,
    RetrievalConfig,
};
use crate::reviewer::{ReviewerError, RewriteRules, RuleTable, TriggerSet, DEFAULT_ERROR_WINDOW};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {message}")]
    Read { path: String, message: String },
    #[error("{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    Http,
    #[default]
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub provider: Provider,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub max_retries: Option<u32>,
    pub timeout_secs: Option<u64>,
    /// Script file for the scripted provider.
    pub script: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            provider: Provider::Scripted,
            endpoint: None,
            model: None,
            temperature: None,
            api_key_env: None,
            max_retries: None,
            timeout_secs: None,
            script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReviewerConfig {
    pub error_window: usize,
    pub rules: PathBuf,
    pub triggers: Option<PathBuf>,
    pub rewrite_rules: Option<PathBuf>,
    pub qar: bool,
    pub car: bool,
}

impl Default for ReviewerConfig {
    fn default() -> Self {
        Self {
            error_window: DEFAULT_ERROR_WINDOW,
            rules: "error_rules.json".into(),
            triggers: None,
            rewrite_rules: None,
            qar: true,
            car: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SandboxKind {
    /// The built-in interpreter over in-memory channels.
    #[default]
    Stub,
    /// A subprocess speaking the wire protocol on stdin/stdout.
    Process,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutorConfig {
    pub sandbox: SandboxKind,
    /// Program and arguments for the process sandbox.
    pub command: Vec<String>,
    pub authorized_imports: Vec<String>,
    pub timeout_ms: u64,
    pub control_timeout_ms: u64,
    pub stdout_cap_bytes: usize,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        let exec = ExecConfig::default();
        Self {
            sandbox: SandboxKind::Stub,
            command: Vec::new(),
            authorized_imports: Vec::new(),
            timeout_ms: exec.timeout_ms,
            control_timeout_ms: exec.control_timeout_ms,
            stdout_cap_bytes: exec.stdout_cap_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeConfig {
    pub backend: BackendConfig,
    pub prompt_dir: PathBuf,
    pub tools: PathBuf,
    pub few_shots: PathBuf,
    pub step_limit: u32,
    pub history_format: HistoryFormat,
    pub retrieval: RetrievalConfig,
    pub reviewer: ReviewerConfig,
    pub executor: ExecutorConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            backend: BackendConfig::default(),
            prompt_dir: "prompts".into(),
            tools: "tools.json".into(),
            few_shots: "few_shots.json".into(),
            step_limit: DEFAULT_STEP_LIMIT,
            history_format: HistoryFormat::default(),
            retrieval: RetrievalConfig::default(),
            reviewer: ReviewerConfig::default(),
            executor: ExecutorConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RuntimeConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut config: RuntimeConfig = toml::from_str(&text).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            retrieval: self.retrieval.clone(),
            step_limit: self.step_limit,
            error_window: self.reviewer.error_window,
            qar: self.reviewer.qar,
            car: self.reviewer.car,
            history_format: self.history_format,
            authorized_imports: self.executor.authorized_imports.clone(),
            exec: ExecConfig {
                timeout_ms: self.executor.timeout_ms,
                control_timeout_ms: self.executor.control_timeout_ms,
                stdout_cap_bytes: self.executor.stdout_cap_bytes,
            },
            temperature: self.backend.temperature.unwrap_or(DEFAULT_TEMPERATURE),
            stop_sequences: self.backend.provider == Provider::Http,
        }
    }

    /// Loads everything the config points at, reporting every problem
    /// rather than stopping at the first.
    pub fn build_resources(&self) -> Result<AgentResources, ConfigError> {
        let mut issues = Vec::new();
        if self.step_limit < 1 {
            issues.push("step_limit must be at least 1".to_string());
        }
        if self.reviewer.error_window < 1 {
            issues.push("reviewer.error_window must be at least 1".to_string());
        }

        let prompt_dir = self.resolve(&self.prompt_dir);
        let templates = note(&mut issues, TemplateRegistry::load_dir(&prompt_dir).map_err(|e| e.to_string()).and_then(
            |(reg, policy)| {
                let mut unknown = Vec::new();
                for p in crate::policy::StepPolicy::ALL {
                    if let Some(t) = reg.get(p) {
                        for name in t.unknown_placeholders() {
                            unknown.push(format!(
                                "{}: unknown placeholder <<{name}>>",
                                prompt_dir.join(p.template_file()).display()
                            ));
                        }
                    }
                }
                if unknown.is_empty() {
                    Ok((reg, policy))
                } else {
                    Err(unknown.join("\n"))
                }
            },
        ));

        let embedder: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::default());
        let table_tools = note(&mut issues, load_table_tools(&self.resolve(&self.tools)));
        let tools = table_tools.as_ref().and_then(|t| {
            let specs = t.iter().map(|t| t.spec.clone()).collect();
            note(&mut issues, index_registry(specs, embedder.as_ref()).map_err(|e| format!("{}: {e}", self.tools.display())))
        });
        let few_shots = note(&mut issues, 
            load_few_shots(&self.resolve(&self.few_shots))
                .and_then(|shots| index_registry(shots, embedder.as_ref()))
                .map_err(|e| format!("{}: {e}", self.few_shots.display())),
        );
        let rules_path = self.resolve(&self.reviewer.rules);
        let rules = note(&mut issues, RuleTable::load(&rules_path).map_err(|e| located(&rules_path, e)));
        let triggers = match &self.reviewer.triggers {
            Some(p) => {
                let path = self.resolve(p);
                note(&mut issues, TriggerSet::load(&path).map_err(|e| located(&path, e)))
            }
            None => Some(TriggerSet::default()),
        };
        let rewrite = match &self.reviewer.rewrite_rules {
            Some(p) => {
                let path = self.resolve(p);
                note(&mut issues, RewriteRules::load(&path).map_err(|e| located(&path, e)))
            }
            None => Some(RewriteRules::default()),
        };
        let launcher: Option<Arc<dyn Launcher>> = match self.executor.sandbox {
            SandboxKind::Stub => Some(Arc::new(InMemoryLauncher)),
            SandboxKind::Process => match self.executor.command.split_first() {
                Some((program, args)) => Some(Arc::new(ProcessLauncher::new(program.clone(), args.to_vec()))),
                None => {
                    issues.push("executor.command is required for the process sandbox".into());
                    None
                }
            },
        };
        if let Err(e) = self.check_backend() {
            issues.push(e);
        }

        match (templates, table_tools, tools, few_shots, rules, triggers, rewrite, launcher) {
            (
                Some((templates, agent_policy)),
                Some(table_tools),
                Some(tools),
                Some(few_shots),
                Some(rules),
                Some(triggers),
                Some(rewrite),
                Some(launcher),
            ) if issues.is_empty() => {
                let mut host_tools = ToolRegistry::new();
                for t in table_tools {
                    host_tools.register(t.into_host_tool());
                }
                let reranker: Option<Arc<dyn RerankProvider>> = Some(Arc::new(OverlapReranker));
                Ok(AgentResources {
                    templates,
                    agent_policy,
                    tools,
                    few_shots,
                    host_tools: Arc::new(host_tools),
                    embedder,
                    reranker,
                    rules,
                    triggers,
                    rewrite,
                    launcher,
                })
            }
            _ => Err(ConfigError::Invalid(issues)),
        }
    }

    fn check_backend(&self) -> Result<(), String> {
        let b = &self.backend;
        match b.provider {
            Provider::Http => {
                if b.endpoint.as_deref().is_none_or(str::is_empty) || b.model.as_deref().is_none_or(str::is_empty) {
                    return Err("backend: the http provider needs endpoint and model".into());
                }
                Ok(())
            }
            Provider::Scripted => match &b.script {
                Some(p) => ScriptedBackend::from_file(&self.resolve(p))
                    .map(|_| ())
                    .map_err(|e| format!("backend script {}: {e}", self.resolve(p).display())),
                None => Ok(()),
            },
        }
    }

    /// Builds the configured backend. A scripted provider without a script
    /// file gets an empty script.
    pub fn build_backend(&self) -> Result<Arc<dyn LlmBackend>, ConfigError> {
        let b = &self.backend;
        let invalid = |m: String| ConfigError::Invalid(vec![m]);
        match b.provider {
            Provider::Http => {
                self.check_backend().map_err(invalid)?;
                let mut cfg: HttpBackendConfig = serde_json::from_value(serde_json::json!({
                    "endpoint": b.endpoint,
                    "model": b.model,
                }))
                .map_err(|e| invalid(e.to_string()))?;
                cfg.api_key_env = b.api_key_env.clone();
                if let Some(n) = b.max_retries {
                    cfg.max_retries = n;
                }
                if let Some(t) = b.timeout_secs {
                    cfg.timeout_secs = t;
                }
                Ok(Arc::new(HttpBackend::new(cfg).map_err(|e| invalid(e.to_string()))?))
            }
            Provider::Scripted => match &b.script {
                Some(p) => {
                    let path = self.resolve(p);
                    let backend = ScriptedBackend::from_file(&path)
                        .map_err(|e| invalid(format!("backend script {}: {e}", path.display())))?;
                    Ok(Arc::new(backend))
                }
                None => Ok(Arc::new(ScriptedBackend::new(Vec::new()))),
            },
        }
    }
}

fn located(path: &Path, e: ReviewerError) -> String {
    match e {
        ReviewerError::Load { .. } => e.to_string(),
        other => format!("{}: {other}", path.display()),
    }
}

fn note<T>(issues: &mut Vec<String>, r: Result<T, String>) -> Option<T> {
    r.map_err(|e| issues.push(e)).ok()
}

/// Table tools with their lookup data, as written to registry files.
pub fn write_table_tools(path: &Path, tools: &[TableTool]) -> std::io::Result<()> {
    let text = serde_json::to_string_pretty(tools).map_err(std::io::Error::other)?;
    std::fs::write(path, text + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shipped_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config")
    }

    #[test]
    fn shipped_config_builds() {
        let cfg = RuntimeConfig::load(&shipped_dir().join("poact.toml")).unwrap();
        let res = cfg.build_resources().unwrap();
        assert!(res.tools.len() >= 30);
        assert!(res.tools.is_indexed() && res.few_shots.is_indexed());
        assert_eq!(cfg.agent_config().temperature, 0.0);
    }

    #[test]
    fn issues_are_aggregated() {
        let cfg = RuntimeConfig {
            base_dir: shipped_dir(),
            prompt_dir: "missing-prompts".into(),
            tools: "missing-tools.json".into(),
            step_limit: 0,
            ..Default::default()
        };
        let Err(ConfigError::Invalid(issues)) = cfg.build_resources() else {
            panic!("expected invalid config");
        };
        assert!(issues.iter().any(|i| i.contains("step_limit")));
        assert!(issues.iter().any(|i| i.contains("missing-prompts")));
        assert!(issues.iter().any(|i| i.contains("missing-tools.json")));
    }
}
