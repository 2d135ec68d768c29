//! Wire protocol between the manager and benchmark workers:
//! length-prefixed frames over a stream socket, each carrying one
//! line-delimited key-value payload (UTF-8). Values escape backslashes
//! and newlines so IR bodies travel intact. Debuggable with `nc`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::action::Invocation;
use crate::env::{BenchmarkPolicy, Task, TaskKind, TaskOutcome, TaskResult};
use crate::state::{ArtifactId, StateFingerprint};

pub const PROTOCOL_VERSION: u32 = 1;

/// Frames above this size are refused (corrupt peer or runaway IR).
pub const MAX_FRAME_BYTES: u32 = 256 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Hello,
    TaskRequest,
    Task,
    Result,
    Heartbeat,
    Shutdown,
}

impl MessageKind {
    pub fn name(&self) -> &'static str {
        match self {
            MessageKind::Hello => "hello",
            MessageKind::TaskRequest => "task_request",
            MessageKind::Task => "task",
            MessageKind::Result => "result",
            MessageKind::Heartbeat => "heartbeat",
            MessageKind::Shutdown => "shutdown",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "hello" => MessageKind::Hello,
            "task_request" => MessageKind::TaskRequest,
            "task" => MessageKind::Task,
            "result" => MessageKind::Result,
            "heartbeat" => MessageKind::Heartbeat,
            "shutdown" => MessageKind::Shutdown,
            _ => return None,
        })
    }

    pub const ALL: [MessageKind; 6] = [
        MessageKind::Hello,
        MessageKind::TaskRequest,
        MessageKind::Task,
        MessageKind::Result,
        MessageKind::Heartbeat,
        MessageKind::Shutdown,
    ];
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("unknown message kind `{0}`")]
    UnknownKind(String),
    #[error("protocol version mismatch: peer speaks {peer}, this side speaks {ours}")]
    VersionMismatch { peer: u32, ours: u32 },
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_BYTES}-byte limit")]
    Oversized(u32),
    #[error("connection error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub protocol_version: u32,
    pub fields: BTreeMap<String, String>,
}

impl Message {
    pub fn new(kind: MessageKind) -> Self {
        Self { kind, protocol_version: PROTOCOL_VERSION, fields: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        debug_assert!(!key.contains('='), "field keys must not contain '='");
        self.fields.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &'static str) -> Result<&str, ProtocolError> {
        self.get(key).ok_or(ProtocolError::MissingField(key))
    }

    pub fn require_parsed<T: std::str::FromStr>(
        &self,
        key: &'static str,
    ) -> Result<T, ProtocolError> {
        self.require(key)?
            .parse()
            .map_err(|_| ProtocolError::Malformed(format!("field `{key}` failed to parse")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = String::new();
        out.push_str("kind=");
        out.push_str(self.kind.name());
        out.push('\n');
        out.push_str("v=");
        out.push_str(&self.protocol_version.to_string());
        out.push('\n');
        for (key, value) in &self.fields {
            out.push_str(key);
            out.push('=');
            out.push_str(&escape(value));
            out.push('\n');
        }
        out.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| ProtocolError::Malformed(format!("not UTF-8: {e}")))?;
        let mut kind = None;
        let mut version = None;
        let mut fields = BTreeMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ProtocolError::Malformed(format!("line without '=': {line}")))?;
            match key {
                "kind" => {
                    kind = Some(
                        MessageKind::parse(value)
                            .ok_or_else(|| ProtocolError::UnknownKind(value.to_string()))?,
                    )
                }
                "v" => {
                    version = Some(value.parse::<u32>().map_err(|_| {
                        ProtocolError::Malformed(format!("bad version `{value}`"))
                    })?)
                }
                _ => {
                    fields.insert(key.to_string(), unescape(value)?);
                }
            }
        }
        Ok(Self {
            kind: kind.ok_or(ProtocolError::MissingField("kind"))?,
            protocol_version: version.ok_or(ProtocolError::MissingField("v"))?,
            fields,
        })
    }
}

fn escape(value: &str) -> String {
    let mut out = String::with_capacity(value.len());
    for c in value.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape(value: &str) -> Result<String, ProtocolError> {
    let mut out = String::with_capacity(value.len());
    let mut chars = value.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(ProtocolError::Malformed(format!(
                    "bad escape `\\{}`",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(out)
}

pub fn write_frame(writer: &mut impl Write, message: &Message) -> Result<(), ProtocolError> {
    let payload = message.encode();
    let len = payload.len() as u32;
    if len > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversized(len));
    }
    writer.write_all(&len.to_be_bytes())?;
    writer.write_all(&payload)?;
    writer.flush()?;
    Ok(())
}

pub fn read_frame(reader: &mut impl Read) -> Result<Message, ProtocolError> {
    let mut len_buf = [0u8; 4];
    reader.read_exact(&mut len_buf)?;
    let len = u32::from_be_bytes(len_buf);
    if len > MAX_FRAME_BYTES {
        return Err(ProtocolError::Oversized(len));
    }
    let mut payload = vec![0u8; len as usize];
    reader.read_exact(&mut payload)?;
    Message::decode(&payload)
}

/// Shutdown frame carrying a refusal or error reason.
pub fn shutdown_with_reason(reason: &str) -> Message {
    Message::new(MessageKind::Shutdown).with("reason", reason)
}

// --- task / result payload codecs -------------------------------------

pub fn task_to_message(task: &Task, include_ir_body: bool) -> Message {
    let mut msg = Message::new(MessageKind::Task)
        .with("task_id", task.id)
        .with("program", &task.program_id)
        .with("policy", serde_json::to_string(&task.policy).expect("policy serializes"));
    match &task.kind {
        TaskKind::Baseline { source_name, source_text } => {
            msg = msg
                .with("task_kind", "baseline")
                .with("source_name", source_name)
                .with("source_text", source_text);
        }
        TaskKind::Transition { state, action, ir_id, ir_body, invocation } => {
            msg = msg
                .with("task_kind", "transition")
                .with("state", state.to_hex())
                .with("action", action)
                .with("ir_id", ir_id.to_hex())
                .with("passes", invocation.passes.join(","))
                .with(
                    "flags",
                    invocation
                        .flags
                        .iter()
                        .map(|(k, v)| format!("{k}={v}"))
                        .collect::<Vec<_>>()
                        .join(","),
                );
            if include_ir_body {
                if let Some(body) = ir_body {
                    msg = msg.with("ir_body", body);
                }
            }
        }
    }
    msg
}

pub fn message_to_task(msg: &Message) -> Result<Task, ProtocolError> {
    let policy: BenchmarkPolicy = serde_json::from_str(msg.require("policy")?)
        .map_err(|e| ProtocolError::Malformed(format!("bad policy: {e}")))?;
    let kind = match msg.require("task_kind")? {
        "baseline" => TaskKind::Baseline {
            source_name: msg.require("source_name")?.to_string(),
            source_text: msg.require("source_text")?.to_string(),
        },
        "transition" => {
            let passes: Vec<String> = msg
                .require("passes")?
                .split(',')
                .filter(|p| !p.is_empty())
                .map(str::to_string)
                .collect();
            let flags_field = msg.get("flags").unwrap_or_default();
            let mut flags = Vec::new();
            for part in flags_field.split(',').filter(|p| !p.is_empty()) {
                let (k, v) = part.split_once('=').ok_or_else(|| {
                    ProtocolError::Malformed(format!("bad flag assignment `{part}`"))
                })?;
                flags.push((k.to_string(), v.to_string()));
            }
            TaskKind::Transition {
                state: StateFingerprint::from_hex(msg.require("state")?)
                    .map_err(|e| ProtocolError::Malformed(format!("bad state: {e}")))?,
                action: msg.require_parsed("action")?,
                ir_id: ArtifactId::from_hex(msg.require("ir_id")?)
                    .map_err(|e| ProtocolError::Malformed(format!("bad ir id: {e}")))?,
                ir_body: msg.get("ir_body").map(str::to_string),
                invocation: Invocation { passes, flags },
            }
        }
        other => return Err(ProtocolError::Malformed(format!("bad task kind `{other}`"))),
    };
    Ok(Task {
        id: msg.require_parsed("task_id")?,
        program_id: msg.require("program")?.to_string(),
        kind,
        policy,
    })
}

pub fn result_to_message(result: &TaskResult) -> Message {
    let msg = Message::new(MessageKind::Result)
        .with("task_id", result.task_id)
        .with("worker", &result.worker);
    match &result.outcome {
        TaskOutcome::Baseline { base_ir, base_runtime, o3_ir, o3_runtime } => msg
            .with("status", "ok")
            .with("result_kind", "baseline")
            .with("base_ir", base_ir)
            .with("base_runtime", base_runtime)
            .with("o3_ir", o3_ir)
            .with("o3_runtime", o3_runtime),
        TaskOutcome::Transition { result_ir, runtime } => msg
            .with("status", "ok")
            .with("result_kind", "transition")
            .with("result_ir", result_ir)
            .with("runtime", runtime),
        TaskOutcome::Fault { message, missing_ir } => msg
            .with("status", "fault")
            .with("message", message)
            .with("missing_ir", missing_ir),
    }
}

pub fn message_to_result(msg: &Message) -> Result<TaskResult, ProtocolError> {
    let outcome = match msg.require("status")? {
        "fault" => TaskOutcome::Fault {
            message: msg.get("message").unwrap_or_default().to_string(),
            missing_ir: msg.get("missing_ir") == Some("true"),
        },
        "ok" => match msg.require("result_kind")? {
            "baseline" => TaskOutcome::Baseline {
                base_ir: msg.require("base_ir")?.to_string(),
                base_runtime: msg.require_parsed("base_runtime")?,
                o3_ir: msg.require("o3_ir")?.to_string(),
                o3_runtime: msg.require_parsed("o3_runtime")?,
            },
            "transition" => TaskOutcome::Transition {
                result_ir: msg.require("result_ir")?.to_string(),
                runtime: msg.require_parsed("runtime")?,
            },
            other => {
                return Err(ProtocolError::Malformed(format!("bad result kind `{other}`")))
            }
        },
        other => return Err(ProtocolError::Malformed(format!("bad status `{other}`"))),
    };
    Ok(TaskResult {
        task_id: msg.require_parsed("task_id")?,
        worker: msg.require("worker")?.to_string(),
        outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unknown_kinds_are_rejected() {
        let err = Message::decode(b"kind=gossip\nv=1\n").unwrap_err();
        assert!(matches!(err, ProtocolError::UnknownKind(k) if k == "gossip"));
    }

    #[test]
    fn frames_round_trip_over_a_buffer() {
        let msg = Message::new(MessageKind::Task)
            .with("task_id", 42u64)
            .with("ir_body", "line one\nline two\\with backslash");
        let mut buf = Vec::new();
        write_frame(&mut buf, &msg).unwrap();
        let decoded = read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!(decoded, msg);
    }

    #[test]
    fn oversized_frames_are_refused() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(MAX_FRAME_BYTES + 1).to_be_bytes());
        assert!(matches!(
            read_frame(&mut buf.as_slice()),
            Err(ProtocolError::Oversized(_))
        ));
    }

    #[test]
    fn task_codec_round_trips_with_and_without_body() {
        use crate::env::{BenchmarkPolicy, Task, TaskKind};
        use crate::state::{AgentState, IrArtifact};
        let ir = IrArtifact::base("1,2,3");
        let task = Task {
            id: 9,
            program_id: "prog".into(),
            kind: TaskKind::Transition {
                state: AgentState::base(ir.id, "prog").fingerprint(),
                action: 3,
                ir_id: ir.id,
                ir_body: Some(ir.body.clone()),
                invocation: Invocation {
                    passes: vec!["gvn".into()],
                    flags: vec![("enable-pre".into(), "false".into())],
                },
            },
            policy: BenchmarkPolicy::default(),
        };
        let full = message_to_task(&task_to_message(&task, true)).unwrap();
        assert_eq!(full, task);

        let slim = message_to_task(&task_to_message(&task, false)).unwrap();
        let TaskKind::Transition { ir_body, .. } = &slim.kind else { panic!() };
        assert!(ir_body.is_none(), "body elided when the worker holds it");
    }

    #[test]
    fn result_codec_round_trips_every_outcome() {
        use crate::env::{TaskOutcome, TaskResult};
        let outcomes = [
            TaskOutcome::Baseline {
                base_ir: "1,2".into(),
                base_runtime: 0.5,
                o3_ir: "2,1".into(),
                o3_runtime: 0.25,
            },
            TaskOutcome::Transition { result_ir: "3,4\n5".into(), runtime: 0.125 },
            TaskOutcome::Fault { message: "boom\nstack".into(), missing_ir: false },
        ];
        for outcome in outcomes {
            let result = TaskResult { task_id: 5, worker: "w1".into(), outcome };
            let back = message_to_result(&result_to_message(&result)).unwrap();
            assert_eq!(back, result);
        }
    }

    proptest! {
        #[test]
        fn encode_decode_is_identity_for_every_kind(
            kind_idx in 0usize..MessageKind::ALL.len(),
            fields in proptest::collection::btree_map(
                "[a-z][a-z0-9_]{0,12}",
                proptest::string::string_regex(".{0,64}").unwrap(),
                0..6
            )
        ) {
            let mut msg = Message::new(MessageKind::ALL[kind_idx]);
            for (k, v) in &fields {
                if k == "kind" || k == "v" {
                    continue;
                }
                msg = msg.with(k, v);
            }
            let decoded = Message::decode(&msg.encode()).unwrap();
            prop_assert_eq!(decoded, msg);
        }
    }
}
