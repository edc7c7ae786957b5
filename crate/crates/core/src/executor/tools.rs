//! Host-side tool handlers and dispatch.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::protocol::FrameError;
use crate::rag::ToolSpec;

pub const CLASS_TOOL_FAILURE: &str = "tool-failure";
pub const CLASS_UNKNOWN_TOOL: &str = "unknown-tool";

pub type ToolHandler = Arc<dyn Fn(&[Value], &Map<String, Value>) -> Result<Value, String> + Send + Sync>;

#[derive(Clone)]
pub struct HostTool {
    pub spec: ToolSpec,
    pub handler: ToolHandler,
}

impl HostTool {
    pub fn new(
        spec: ToolSpec,
        handler: impl Fn(&[Value], &Map<String, Value>) -> Result<Value, String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            spec,
            handler: Arc::new(handler),
        }
    }
}

impl std::fmt::Debug for HostTool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HostTool").field("name", &self.spec.name).finish()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, HostTool>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers under the tool's name, replacing any earlier handler.
    pub fn register(&mut self, tool: HostTool) {
        self.tools.insert(tool.spec.name.clone(), tool);
    }

    pub fn get(&self, name: &str) -> Option<&HostTool> {
        self.tools.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }

    pub fn specs(&self) -> Vec<ToolSpec> {
        self.tools.values().map(|t| t.spec.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolCallRequest {
    pub call_id: u64,
    pub tool: String,
    pub args: Vec<Value>,
    pub kwargs: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToolCallResponse {
    pub call_id: u64,
    pub outcome: Result<Value, FrameError>,
}

/// Runs a tool call against the registry. Calls outside `visible` and
/// handler errors or panics come back as structured failures.
pub fn dispatch_tool(request: &ToolCallRequest, registry: &ToolRegistry, visible: &[String]) -> ToolCallResponse {
    let respond = |outcome| ToolCallResponse {
        call_id: request.call_id,
        outcome,
    };
    let tool = match registry.get(&request.tool) {
        Some(t) if visible.iter().any(|v| *v == request.tool) => t,
        _ => {
            return respond(Err(FrameError::new(
                CLASS_UNKNOWN_TOOL,
                format!("tool '{}' is not available in this step", request.tool),
            )))
        }
    };
    let handler = &tool.handler;
    match catch_unwind(AssertUnwindSafe(|| handler(&request.args, &request.kwargs))) {
        Ok(Ok(v)) => respond(Ok(v)),
        Ok(Err(msg)) => respond(Err(FrameError::new(CLASS_TOOL_FAILURE, msg))),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "tool handler panicked".into());
            respond(Err(FrameError::new(CLASS_TOOL_FAILURE, msg)))
        }
    }
}

/// First positional argument, or the named keyword argument.
pub fn arg<'a>(args: &'a [Value], kwargs: &'a Map<String, Value>, index: usize, name: &str) -> Option<&'a Value> {
    kwargs.get(name).or_else(|| args.get(index))
}

/// String form of [`arg`], failing with a message naming the parameter.
pub fn str_arg(args: &[Value], kwargs: &Map<String, Value>, index: usize, name: &str) -> Result<String, String> {
    match arg(args, kwargs, index, name) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(format!("argument '{name}' must be a string, got {other}")),
        None => Err(format!("missing required argument '{name}'")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableMatch {
    /// The argument must equal a key.
    #[default]
    Exact,
    /// Every key contained in the argument, or containing it, matches
    /// (case-insensitive). Returns a list of rows.
    Search,
}

/// A tool backed by a lookup table keyed on its first string argument, as
/// stored in tool registry files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableTool {
    #[serde(flatten)]
    pub spec: ToolSpec,
    /// Name of the looked-up parameter, for keyword calls.
    #[serde(default = "default_key_param")]
    pub key_param: String,
    #[serde(default)]
    pub matching: TableMatch,
    #[serde(default)]
    pub table: BTreeMap<String, Value>,
}

fn default_key_param() -> String {
    "name".into()
}

impl TableTool {
    pub fn lookup(&self, key: &str) -> Result<Value, String> {
        match self.matching {
            TableMatch::Exact => self
                .table
                .get(key)
                .cloned()
                .ok_or_else(|| format!("{}: no record found for '{key}'", self.spec.name)),
            TableMatch::Search => {
                let needle = key.to_lowercase();
                let hits: Vec<Value> = self
                    .table
                    .iter()
                    .filter(|(k, _)| {
                        let k = k.to_lowercase();
                        !needle.is_empty() && (k.contains(&needle) || needle.contains(&k))
                    })
                    .map(|(_, v)| v.clone())
                    .collect();
                Ok(Value::Array(hits))
            }
        }
    }

    pub fn into_host_tool(self) -> HostTool {
        let spec = self.spec.clone();
        HostTool::new(spec, move |args, kwargs| {
            let key = str_arg(args, kwargs, 0, &self.key_param)?;
            self.lookup(&key)
        })
    }
}

pub fn load_table_tools(path: &Path) -> Result<Vec<TableTool>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("parsing {}: {e}", path.display()))
}
