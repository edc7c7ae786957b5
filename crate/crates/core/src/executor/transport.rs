//! Ways to start a sandbox and exchange protocol lines with it.

use std::path::PathBuf;
use std::process::Stdio;

use async_trait::async_trait;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::process::{Child, ChildStdin, ChildStdout, Command};
use tokio::sync::mpsc::{unbounded_channel, UnboundedReceiver, UnboundedSender};

use super::ExecError;
use crate::stub::{ChannelIo, StubSandbox};

#[async_trait]
pub trait Transport: Send {
    async fn send_line(&mut self, line: String) -> std::io::Result<()>;
    /// `None` once the sandbox side has closed.
    async fn recv_line(&mut self) -> std::io::Result<Option<String>>;
    async fn kill(&mut self);
}

#[async_trait]
pub trait Launcher: Send + Sync {
    async fn launch(&self) -> Result<Box<dyn Transport>, ExecError>;
}

/// Runs the sandbox as a child process speaking over stdin/stdout.
#[derive(Debug, Clone)]
pub struct ProcessLauncher {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl ProcessLauncher {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
        }
    }
}

struct ProcessTransport {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

#[async_trait]
impl Launcher for ProcessLauncher {
    async fn launch(&self) -> Result<Box<dyn Transport>, ExecError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| ExecError::SpawnFailure(format!("{}: {e}", self.program.display())))?;
        let stdin = child.stdin.take();
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| ExecError::SpawnFailure("child has no stdout".into()))?;
        Ok(Box::new(ProcessTransport {
            child,
            stdin,
            stdout: BufReader::new(stdout),
        }))
    }
}

#[async_trait]
impl Transport for ProcessTransport {
    async fn send_line(&mut self, line: String) -> std::io::Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::BrokenPipe, "stdin closed"))?;
        stdin.write_all(line.as_bytes()).await?;
        stdin.flush().await
    }

    async fn recv_line(&mut self) -> std::io::Result<Option<String>> {
        let mut line = String::new();
        loop {
            line.clear();
            if self.stdout.read_line(&mut line).await? == 0 {
                return Ok(None);
            }
            if !line.trim().is_empty() {
                return Ok(Some(line));
            }
        }
    }

    async fn kill(&mut self) {
        self.stdin = None;
        let _ = self.child.kill().await;
    }
}

/// Runs a [`StubSandbox`] on a thread, exchanging the same NDJSON lines
/// over channels instead of pipes.
#[derive(Debug, Clone, Default)]
pub struct InMemoryLauncher;

struct ChannelTransport {
    tx: Option<UnboundedSender<String>>,
    rx: UnboundedReceiver<String>,
}

#[async_trait]
impl Launcher for InMemoryLauncher {
    async fn launch(&self) -> Result<Box<dyn Transport>, ExecError> {
        let (host_tx, sandbox_rx) = unbounded_channel();
        let (sandbox_tx, host_rx) = unbounded_channel();
        std::thread::Builder::new()
            .name("stub-sandbox".into())
            .spawn(move || {
                let mut io = ChannelIo {
                    rx: sandbox_rx,
                    tx: sandbox_tx,
                };
                StubSandbox::new(Vec::new()).serve(&mut io);
            })
            .map_err(|e| ExecError::SpawnFailure(e.to_string()))?;
        Ok(Box::new(ChannelTransport {
            tx: Some(host_tx),
            rx: host_rx,
        }))
    }
}

#[async_trait]
impl Transport for ChannelTransport {
    async fn send_line(&mut self, line: String) -> std::io::Result<()> {
        self.tx
            .as_ref()
            .and_then(|tx| tx.send(line).ok())
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::BrokenPipe, "sandbox closed"))
    }

    async fn recv_line(&mut self) -> std::io::Result<Option<String>> {
        Ok(self.rx.recv().await)
    }

    /// Threads cannot be killed; the stub notices the closed channels and
    /// stops once its current block finishes.
    async fn kill(&mut self) {
        self.tx = None;
        self.rx.close();
    }
}
