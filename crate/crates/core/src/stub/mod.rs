//! Stand-in sandbox that speaks the executor wire protocol.
//!
//! It runs straight-line Python through a small interpreter, which is enough
//! for scripted trajectories, tests and offline demos. It backs both the
//! in-memory transport and the `poact-stub-sandbox` binary.

pub mod interp;
pub mod value;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::mpsc;
use std::time::Duration;

use serde_json::{Map, Value as Json};

use crate::executor::protocol::{decode, encode, FrameError, HostFrame, SandboxFrame};
use interp::{Flow, Interp, Namespace, ToolCaller};
use value::Value;

pub const CLASS_MISSING_CHECKPOINT: &str = "missing-checkpoint";
pub const CLASS_PROTOCOL: &str = "protocol-error";

pub enum Recv {
    Frame(HostFrame),
    Closed,
    TimedOut,
}

/// Frame transport as seen from inside the sandbox.
pub trait FrameIo {
    /// False once the host side is gone.
    fn send(&mut self, frame: &SandboxFrame) -> bool;
    fn recv(&mut self, timeout: Option<Duration>) -> Recv;
}

/// How [`StubSandbox::serve`] ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeEnd {
    HostClosed,
    /// User code called `exit()`; a real interpreter process would be gone.
    Exited,
    HandshakeTimeout,
}

#[derive(Debug, Default)]
pub struct StubSandbox {
    whitelist: Vec<String>,
    proxies: Vec<String>,
    namespace: Namespace,
    snapshots: BTreeMap<u32, String>,
    next_call_id: u64,
    handshake_timeout: Option<Duration>,
}

struct WireCaller<'a> {
    io: &'a mut dyn FrameIo,
    next_call_id: &'a mut u64,
    closed: bool,
}

impl ToolCaller for WireCaller<'_> {
    fn call(&mut self, tool: &str, args: Vec<Json>, kwargs: Map<String, Json>) -> Result<Json, (String, String)> {
        *self.next_call_id += 1;
        let call_id = *self.next_call_id;
        let frame = SandboxFrame::ToolCall {
            call_id,
            tool: tool.to_string(),
            args,
            kwargs,
        };
        if !self.io.send(&frame) {
            self.closed = true;
            return Err((CLASS_PROTOCOL.into(), "host went away".into()));
        }
        match self.io.recv(None) {
            Recv::Frame(HostFrame::ToolResult {
                call_id: id,
                result,
                error,
            }) if id == call_id => match error {
                Some(e) => Err((e.error_class, e.message)),
                None => Ok(result.unwrap_or(Json::Null)),
            },
            Recv::Frame(other) => Err((CLASS_PROTOCOL.into(), format!("expected tool_result, got {other:?}"))),
            Recv::Closed | Recv::TimedOut => {
                self.closed = true;
                Err((CLASS_PROTOCOL.into(), "host went away".into()))
            }
        }
    }
}

impl StubSandbox {
    pub fn new(whitelist: Vec<String>) -> Self {
        Self {
            whitelist,
            ..Default::default()
        }
    }

    /// Gives up if no handshake arrives within `timeout`.
    pub fn with_handshake_timeout(mut self, timeout: Duration) -> Self {
        self.handshake_timeout = Some(timeout);
        self
    }

    pub fn serve(&mut self, io: &mut dyn FrameIo) -> ServeEnd {
        let mut handshaken = false;
        loop {
            let timeout = if handshaken { None } else { self.handshake_timeout };
            let frame = match io.recv(timeout) {
                Recv::Frame(f) => f,
                Recv::Closed => return ServeEnd::HostClosed,
                Recv::TimedOut => return ServeEnd::HandshakeTimeout,
            };
            let reply = match frame {
                HostFrame::Handshake {
                    tools,
                    authorized_imports,
                } => {
                    handshaken = true;
                    self.proxies = tools;
                    self.whitelist = authorized_imports;
                    SandboxFrame::Handshake {
                        proxies: self.proxies.clone(),
                    }
                }
                HostFrame::Exec { .. } if !handshaken => SandboxFrame::ExecResult {
                    stdout: String::new(),
                    error: Some(FrameError::new(CLASS_PROTOCOL, "exec before handshake")),
                    final_answer: None,
                },
                HostFrame::Exec { code, .. } => match self.run_block(&code, io) {
                    Some(frame) => frame,
                    None => return ServeEnd::Exited,
                },
                HostFrame::Checkpoint { step } => {
                    let (token, warnings) = self.snapshot();
                    self.snapshots.insert(step, token.clone());
                    SandboxFrame::Checkpoint { step, token, warnings }
                }
                HostFrame::Restore { step, token } => {
                    let token = token.or_else(|| self.snapshots.get(&step).cloned());
                    let error = match token.map(|t| serde_json::from_str::<Namespace>(&t)) {
                        Some(Ok(ns)) => {
                            self.namespace = ns;
                            self.snapshots.retain(|s, _| *s <= step);
                            None
                        }
                        Some(Err(e)) => Some(FrameError::new(CLASS_PROTOCOL, format!("bad checkpoint token: {e}"))),
                        None => Some(FrameError::new(
                            CLASS_MISSING_CHECKPOINT,
                            format!("no checkpoint for step {step}"),
                        )),
                    };
                    SandboxFrame::Restore { step, error }
                }
                HostFrame::ToolResult { call_id, .. } => SandboxFrame::ExecResult {
                    stdout: String::new(),
                    error: Some(FrameError::new(CLASS_PROTOCOL, format!("unexpected tool_result {call_id}"))),
                    final_answer: None,
                },
            };
            if !io.send(&reply) {
                return ServeEnd::HostClosed;
            }
        }
    }

    /// Serialisable bindings. Bound methods cannot be restored and are
    /// dropped with a warning.
    fn snapshot(&self) -> (String, Vec<String>) {
        let mut kept = Namespace::new();
        let mut warnings = Vec::new();
        for (k, v) in &self.namespace {
            if matches!(v, Value::Method(..)) {
                warnings.push(format!("binding '{k}' cannot be checkpointed and was dropped"));
            } else {
                kept.insert(k.clone(), v.clone());
            }
        }
        (serde_json::to_string(&kept).expect("namespace serializes"), warnings)
    }

    /// `None` when the code exited the interpreter or the host went away.
    fn run_block(&mut self, code: &str, io: &mut dyn FrameIo) -> Option<SandboxFrame> {
        let mut stdout = String::new();
        let mut caller = WireCaller {
            io,
            next_call_id: &mut self.next_call_id,
            closed: false,
        };
        let result = Interp {
            ns: &mut self.namespace,
            proxies: &self.proxies,
            whitelist: &self.whitelist,
            caller: &mut caller,
            stdout: &mut stdout,
        }
        .run(code);
        if caller.closed {
            return None;
        }
        let (error, final_answer) = match result {
            Ok(()) => (None, None),
            Err(Flow::FinalAnswer(v)) => (None, Some(v.to_str())),
            Err(Flow::Error { class, message }) => (Some(FrameError::new(class, message)), None),
            Err(Flow::Exit) => return None,
        };
        Some(SandboxFrame::ExecResult {
            stdout,
            error,
            final_answer,
        })
    }
}

/// Lines over channels, for the in-memory transport.
pub struct ChannelIo {
    pub rx: tokio::sync::mpsc::UnboundedReceiver<String>,
    pub tx: tokio::sync::mpsc::UnboundedSender<String>,
}

impl FrameIo for ChannelIo {
    fn send(&mut self, frame: &SandboxFrame) -> bool {
        self.tx.send(encode(frame)).is_ok()
    }

    fn recv(&mut self, _timeout: Option<Duration>) -> Recv {
        loop {
            match self.rx.blocking_recv() {
                None => return Recv::Closed,
                Some(line) => match decode::<HostFrame>(&line) {
                    Ok(f) => return Recv::Frame(f),
                    Err(e) => tracing::warn!(error = %e, "stub sandbox ignored a bad frame"),
                },
            }
        }
    }
}

/// Lines over stdin/stdout, for the standalone binary. A reader thread feeds
/// a channel so the handshake wait can time out.
pub struct StdioIo<W: Write> {
    lines: mpsc::Receiver<String>,
    out: W,
}

impl<W: Write> StdioIo<W> {
    pub fn new<R: BufRead + Send + 'static>(input: R, out: W) -> Self {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in input.lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Self { lines: rx, out }
    }
}

impl<W: Write> FrameIo for StdioIo<W> {
    fn send(&mut self, frame: &SandboxFrame) -> bool {
        self.out.write_all(encode(frame).as_bytes()).is_ok() && self.out.flush().is_ok()
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Recv {
        loop {
            let line = match timeout {
                Some(t) => match self.lines.recv_timeout(t) {
                    Ok(l) => l,
                    Err(mpsc::RecvTimeoutError::Timeout) => return Recv::TimedOut,
                    Err(mpsc::RecvTimeoutError::Disconnected) => return Recv::Closed,
                },
                None => match self.lines.recv() {
                    Ok(l) => l,
                    Err(_) => return Recv::Closed,
                },
            };
            if line.trim().is_empty() {
                continue;
            }
            match decode::<HostFrame>(&line) {
                Ok(f) => return Recv::Frame(f),
                Err(e) => eprintln!("stub sandbox: ignoring bad frame: {e}"),
            }
        }
    }
}
