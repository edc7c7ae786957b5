//! Host side of code execution: sandbox sessions, tool dispatch, checkpoints
//! and recovery from timeouts and crashes.

pub mod protocol;
pub mod tools;
pub mod transport;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::reviewer::Failure;
use protocol::{decode, encode, HostFrame, SandboxFrame};
use tools::{dispatch_tool, ToolCallRequest, ToolRegistry};
use transport::{Launcher, Transport};

pub use tools::{load_table_tools, HostTool, TableMatch, TableTool, ToolHandler};
pub use transport::{InMemoryLauncher, ProcessLauncher};

pub const CLASS_TIMEOUT: &str = "timeout";
pub const CLASS_CRASH: &str = "crash";
pub const TRUNCATION_MARKER: &str = "[truncated]";
pub const DEFAULT_STDOUT_CAP: usize = 65536;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("could not start sandbox: {0}")]
    SpawnFailure(String),
    #[error("sandbox did not complete the handshake in time")]
    HandshakeTimeout,
    #[error("no checkpoint covers step {0}")]
    MissingCheckpoint(u32),
    #[error("sandbox protocol error: {0}")]
    Protocol(String),
    #[error("code block is empty")]
    EmptyCode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecConfig {
    /// Wall-clock limit for one code block, tool calls included.
    pub timeout_ms: u64,
    /// Limit for handshake, checkpoint and restore replies.
    pub control_timeout_ms: u64,
    pub stdout_cap_bytes: usize,
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            timeout_ms: 30_000,
            control_timeout_ms: 10_000,
            stdout_cap_bytes: DEFAULT_STDOUT_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionResult {
    pub stdout: String,
    pub failure: Option<Failure>,
    pub final_answer: Option<String>,
    pub wall_time: Duration,
}

/// A tool call as seen by the host, with the visible set at that moment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservedCall {
    pub tool: String,
    pub visible: Vec<String>,
}

/// Keeps at most `cap` bytes (on a character boundary) and marks the cut.
pub fn cap_stdout(stdout: String, cap: usize) -> String {
    if stdout.len() <= cap {
        return stdout;
    }
    let mut end = cap;
    while !stdout.is_char_boundary(end) {
        end -= 1;
    }
    let mut out = stdout[..end].to_string();
    out.push_str(TRUNCATION_MARKER);
    out
}

/// One persistent sandbox for one trajectory.
pub struct Session {
    id: String,
    launcher: Arc<dyn Launcher>,
    transport: Box<dyn Transport>,
    tools: Arc<ToolRegistry>,
    visible: Vec<String>,
    proxies: Vec<String>,
    authorized_imports: Vec<String>,
    checkpoints: BTreeMap<u32, String>,
    config: ExecConfig,
    observed: Vec<ObservedCall>,
}

enum Interrupted {
    Timeout,
    Crash(String),
}

impl Session {
    /// Starts a sandbox and installs proxies for `tool_ids` and the import
    /// whitelist.
    pub async fn open(
        id: impl Into<String>,
        launcher: Arc<dyn Launcher>,
        tools: Arc<ToolRegistry>,
        tool_ids: Vec<String>,
        authorized_imports: Vec<String>,
        config: ExecConfig,
    ) -> Result<Session, ExecError> {
        let transport = launcher.launch().await?;
        let mut session = Session {
            id: id.into(),
            launcher,
            transport,
            tools,
            visible: tool_ids,
            proxies: Vec::new(),
            authorized_imports,
            checkpoints: BTreeMap::new(),
            config,
            observed: Vec::new(),
        };
        session.handshake().await?;
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn visible_tools(&self) -> &[String] {
        &self.visible
    }

    /// Proxy names the sandbox reported in its last handshake reply.
    pub fn proxies(&self) -> &[String] {
        &self.proxies
    }

    pub fn authorized_imports(&self) -> &[String] {
        &self.authorized_imports
    }

    pub fn checkpoint_steps(&self) -> Vec<u32> {
        self.checkpoints.keys().copied().collect()
    }

    pub fn observed_calls(&self) -> &[ObservedCall] {
        &self.observed
    }

    fn control_timeout(&self) -> Duration {
        Duration::from_millis(self.config.control_timeout_ms)
    }

    async fn send(&mut self, frame: &HostFrame) -> Result<(), ExecError> {
        self.transport
            .send_line(encode(frame))
            .await
            .map_err(|e| ExecError::Protocol(format!("send failed: {e}")))
    }

    async fn recv_control(&mut self) -> Result<SandboxFrame, ExecError> {
        match tokio::time::timeout(self.control_timeout(), self.transport.recv_line()).await {
            Err(_) => Err(ExecError::Protocol("sandbox did not reply in time".into())),
            Ok(Err(e)) => Err(ExecError::Protocol(e.to_string())),
            Ok(Ok(None)) => Err(ExecError::Protocol("sandbox closed the connection".into())),
            Ok(Ok(Some(line))) => decode(&line).map_err(|e| ExecError::Protocol(format!("bad frame: {e}"))),
        }
    }

    async fn handshake(&mut self) -> Result<(), ExecError> {
        let frame = HostFrame::Handshake {
            tools: self.visible.clone(),
            authorized_imports: self.authorized_imports.clone(),
        };
        self.send(&frame).await.map_err(|_| ExecError::HandshakeTimeout)?;
        match tokio::time::timeout(self.control_timeout(), self.transport.recv_line()).await {
            Err(_) => Err(ExecError::HandshakeTimeout),
            Ok(Ok(Some(line))) => match decode(&line) {
                Ok(SandboxFrame::Handshake { proxies }) => {
                    self.proxies = proxies;
                    Ok(())
                }
                Ok(other) => Err(ExecError::Protocol(format!("expected handshake, got {other:?}"))),
                Err(e) => Err(ExecError::Protocol(format!("bad handshake: {e}"))),
            },
            Ok(_) => Err(ExecError::SpawnFailure("sandbox exited during handshake".into())),
        }
    }

    /// Makes exactly `tool_ids` callable from the next block on.
    pub async fn set_visible_tools(&mut self, tool_ids: Vec<String>) -> Result<(), ExecError> {
        if tool_ids != self.visible {
            self.visible = tool_ids;
            self.handshake().await?;
        }
        Ok(())
    }

    async fn restore_frame(&mut self, step: u32, token: Option<String>) -> Result<(), ExecError> {
        self.send(&HostFrame::Restore { step, token }).await?;
        match self.recv_control().await? {
            SandboxFrame::Restore { error: None, .. } => Ok(()),
            SandboxFrame::Restore { error: Some(e), .. } => {
                if e.error_class == crate::stub::CLASS_MISSING_CHECKPOINT {
                    Err(ExecError::MissingCheckpoint(step))
                } else {
                    Err(ExecError::Protocol(e.message))
                }
            }
            other => Err(ExecError::Protocol(format!("expected restore ack, got {other:?}"))),
        }
    }

    /// Runs one code block. A pre-execution checkpoint is stored under
    /// `step` first, so a timeout or crash can be recovered from it.
    pub async fn execute(&mut self, code: &str, step: u32) -> Result<ExecutionResult, ExecError> {
        if code.trim().is_empty() {
            return Err(ExecError::EmptyCode);
        }
        let started = Instant::now();

        self.send(&HostFrame::Checkpoint { step }).await?;
        match self.recv_control().await? {
            SandboxFrame::Checkpoint { token, warnings, .. } => {
                for w in warnings {
                    warn!(session = %self.id, step, "{w}");
                }
                self.checkpoints.insert(step, token);
            }
            other => return Err(ExecError::Protocol(format!("expected checkpoint ack, got {other:?}"))),
        }

        let timeout = Duration::from_millis(self.config.timeout_ms);
        self.send(&HostFrame::Exec {
            code: code.to_string(),
            step,
            timeout_ms: self.config.timeout_ms,
        })
        .await?;
        let deadline = tokio::time::Instant::now() + timeout;

        let interrupted = loop {
            let line = match tokio::time::timeout_at(deadline, self.transport.recv_line()).await {
                Err(_) => break Interrupted::Timeout,
                Ok(Err(e)) => break Interrupted::Crash(e.to_string()),
                Ok(Ok(None)) => break Interrupted::Crash("sandbox process exited".into()),
                Ok(Ok(Some(line))) => line,
            };
            let frame: SandboxFrame = decode(&line).map_err(|e| ExecError::Protocol(format!("bad frame: {e}")))?;
            match frame {
                SandboxFrame::ToolCall {
                    call_id,
                    tool,
                    args,
                    kwargs,
                } => {
                    self.observed.push(ObservedCall {
                        tool: tool.clone(),
                        visible: self.visible.clone(),
                    });
                    let request = ToolCallRequest {
                        call_id,
                        tool,
                        args,
                        kwargs,
                    };
                    let response = dispatch_tool(&request, &self.tools, &self.visible);
                    let (result, error) = match response.outcome {
                        Ok(v) => (Some(v), None),
                        Err(e) => (None, Some(e)),
                    };
                    self.send(&HostFrame::ToolResult {
                        call_id: response.call_id,
                        result,
                        error,
                    })
                    .await?;
                }
                SandboxFrame::ExecResult {
                    stdout,
                    error,
                    final_answer,
                } => {
                    let failure = error.map(|e| Failure::new(e.error_class, e.message));
                    let final_answer = if failure.is_some() { None } else { final_answer };
                    return Ok(ExecutionResult {
                        stdout: cap_stdout(stdout, self.config.stdout_cap_bytes),
                        failure,
                        final_answer,
                        wall_time: started.elapsed(),
                    });
                }
                other => return Err(ExecError::Protocol(format!("unexpected frame during exec: {other:?}"))),
            }
        };

        let failure = match interrupted {
            Interrupted::Timeout => Failure::new(
                CLASS_TIMEOUT,
                format!("code did not finish within {} ms", self.config.timeout_ms),
            ),
            Interrupted::Crash(reason) => Failure::new(CLASS_CRASH, format!("sandbox stopped: {reason}")),
        };
        debug!(session = %self.id, step, class = %failure.error_class, "recovering sandbox");
        self.respawn(step).await?;
        Ok(ExecutionResult {
            stdout: String::new(),
            failure: Some(failure),
            final_answer: None,
            wall_time: started.elapsed(),
        })
    }

    /// Replaces the sandbox process and restores the checkpoint for `step`.
    async fn respawn(&mut self, step: u32) -> Result<(), ExecError> {
        self.transport.kill().await;
        self.transport = self.launcher.launch().await?;
        self.handshake().await?;
        let token = self.checkpoints.get(&step).cloned();
        if token.is_some() {
            self.restore_frame(step, token).await?;
        }
        Ok(())
    }

    /// Rewinds the session to its state right after the block at `step`
    /// ran, i.e. the pre-execution checkpoint of the first later block.
    /// Checkpoints after `step` are discarded. A no-op when no block ran
    /// after `step`.
    pub async fn restore_to_step(&mut self, step: u32) -> Result<(), ExecError> {
        let Some((&next, token)) = self.checkpoints.range(step + 1..).next() else {
            return Ok(());
        };
        let token = token.clone();
        self.restore_frame(next, Some(token)).await?;
        self.checkpoints.retain(|s, _| *s <= step);
        Ok(())
    }

    pub async fn close(mut self) {
        self.transport.kill().await;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stdout_cap() {
        assert_eq!(cap_stdout("abc".into(), 3), "abc");
        assert_eq!(cap_stdout("abcd".into(), 3), "abc[truncated]");
        // never splits a character
        assert_eq!(cap_stdout("éé".into(), 3), "é[truncated]");
    }
}
