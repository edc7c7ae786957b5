//! Newline-delimited JSON frames exchanged with the sandbox over stdio.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Failure reported inside a frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameError {
    pub error_class: String,
    pub message: String,
}

impl FrameError {
    pub fn new(error_class: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            error_class: error_class.into(),
            message: message.into(),
        }
    }
}

/// Frames written by the host.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HostFrame {
    /// Installs tool proxies and the import whitelist. May be re-sent at any
    /// time between blocks to change the visible tools.
    Handshake {
        tools: Vec<String>,
        authorized_imports: Vec<String>,
    },
    Exec {
        code: String,
        step: u32,
        timeout_ms: u64,
    },
    ToolResult {
        call_id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        result: Option<Value>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<FrameError>,
    },
    Checkpoint {
        step: u32,
    },
    /// Restores the snapshot taken for `step`. When `token` is present the
    /// sandbox restores from it, so snapshots survive a respawn.
    Restore {
        step: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        token: Option<String>,
    },
}

/// Frames written by the sandbox.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SandboxFrame {
    Handshake {
        proxies: Vec<String>,
    },
    ToolCall {
        call_id: u64,
        tool: String,
        #[serde(default)]
        args: Vec<Value>,
        #[serde(default)]
        kwargs: Map<String, Value>,
    },
    ExecResult {
        stdout: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<FrameError>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        final_answer: Option<String>,
    },
    Checkpoint {
        step: u32,
        token: String,
        #[serde(default)]
        warnings: Vec<String>,
    },
    Restore {
        step: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<FrameError>,
    },
}

pub fn encode<T: Serialize>(frame: &T) -> String {
    let mut line = serde_json::to_string(frame).expect("frames always serialize");
    line.push('\n');
    line
}

pub fn decode<'a, T: Deserialize<'a>>(line: &'a str) -> Result<T, serde_json::Error> {
    serde_json::from_str(line.trim_end_matches(['\n', '\r']))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn wire_shapes() {
        let exec = HostFrame::Exec {
            code: "print(1)".into(),
            step: 2,
            timeout_ms: 500,
        };
        assert_eq!(
            serde_json::to_value(&exec).unwrap(),
            json!({"type": "exec", "code": "print(1)", "step": 2, "timeout_ms": 500})
        );
        let call: SandboxFrame =
            decode(r#"{"type":"tool_call","call_id":7,"tool":"lookup","args":["a"],"kwargs":{"k":1}}"#).unwrap();
        assert!(matches!(call, SandboxFrame::ToolCall { call_id: 7, .. }));
        let line = encode(&HostFrame::ToolResult {
            call_id: 7,
            result: None,
            error: Some(FrameError::new("tool-failure", "boom")),
        });
        assert!(line.ends_with('\n') && !line[..line.len() - 1].contains('\n'));
        assert_eq!(decode::<HostFrame>(&line).unwrap(), decode::<HostFrame>(line.trim()).unwrap());
    }
}
