//! Execution-kernel wire protocol and clients.
//!
//! Messages are single JSON objects, one per line, exchanged over a kernel's
//! standard streams. Every request is answered by exactly one `result`
//! message; an `execute` answer carries the request's `cell_id`.
//!
//! Two transports implement the same protocol: [`process::ProcessKernel`]
//! talks to a child process, [`stub::StubKernel`] answers in-process. Both
//! get [`Executor`] through the blanket impl, so callers cannot tell them
//! apart.

pub mod process;
pub mod stub;

use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const DEFAULT_TIMEOUT_SECS: f64 = 30.0;
pub const DEFAULT_QUOTA_BYTES: u64 = 256 * 1024 * 1024;
/// Name under which the data snapshot is bound in every session.
pub const DATA_HANDLE: &str = "df";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    Init,
    Execute,
    Result,
    Reset,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMessage {
    pub kind: MessageKind,
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
}

impl KernelMessage {
    fn bare(kind: MessageKind, session_id: &str) -> Self {
        Self {
            kind,
            session_id: session_id.into(),
            cell_id: None,
            code: None,
            payload: None,
        }
    }

    pub fn init(session_id: &str, spec: &InitSpec) -> Self {
        Self {
            payload: Some(serde_json::to_value(spec).expect("spec serializes")),
            ..Self::bare(MessageKind::Init, session_id)
        }
    }

    pub fn execute(session_id: &str, cell_id: &str, code: &str) -> Self {
        Self {
            cell_id: Some(cell_id.into()),
            code: Some(code.into()),
            ..Self::bare(MessageKind::Execute, session_id)
        }
    }

    /// An execute that only checks syntax.
    pub fn parse_only(session_id: &str, cell_id: &str, code: &str) -> Self {
        Self {
            payload: Some(json!({"mode": "parse"})),
            ..Self::execute(session_id, cell_id, code)
        }
    }

    pub fn reset(session_id: &str) -> Self {
        Self::bare(MessageKind::Reset, session_id)
    }

    pub fn shutdown(session_id: &str) -> Self {
        Self::bare(MessageKind::Shutdown, session_id)
    }

    pub fn ready(session_id: &str, artifacts: &[Artifact]) -> Self {
        Self {
            payload: Some(json!({"status": "ready", "artifacts": artifacts})),
            ..Self::bare(MessageKind::Result, session_id)
        }
    }

    pub fn failure(session_id: &str, cell_id: Option<&str>, err: &KernelError) -> Self {
        Self {
            cell_id: cell_id.map(str::to_string),
            payload: Some(json!({"status": "error", "error": WireError::from(err)})),
            ..Self::bare(MessageKind::Result, session_id)
        }
    }

    pub fn result(session_id: &str, cell_id: &str, result: &ExecutionResult) -> Self {
        Self {
            cell_id: Some(cell_id.into()),
            payload: Some(serde_json::to_value(result).expect("result serializes")),
            ..Self::bare(MessageKind::Result, session_id)
        }
    }

    pub fn is_parse_only(&self) -> bool {
        self.payload
            .as_ref()
            .and_then(|p| p.get("mode"))
            .and_then(Value::as_str)
            == Some("parse")
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("message serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, KernelError> {
        serde_json::from_str(line).map_err(|e| KernelError::Protocol(format!("bad message: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Ok,
    Error,
    Violation,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Table,
    Image,
    File,
}

impl ArtifactKind {
    pub fn from_path(path: &str) -> Self {
        let ext = path
            .rsplit_once('.')
            .map(|(_, e)| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "csv" | "tsv" | "xlsx" | "parquet" => ArtifactKind::Table,
            "png" | "jpg" | "jpeg" | "svg" | "gif" | "webp" => ArtifactKind::Image,
            _ => ArtifactKind::File,
        }
    }

    pub fn content_type(path: &str) -> &'static str {
        let ext = path
            .rsplit_once('.')
            .map(|(_, e)| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "csv" => "text/csv",
            "tsv" => "text/tab-separated-values",
            "png" => "image/png",
            "jpg" | "jpeg" => "image/jpeg",
            "svg" => "image/svg+xml",
            "gif" => "image/gif",
            "webp" => "image/webp",
            "json" => "application/json",
            "txt" | "md" => "text/plain; charset=utf-8",
            "html" => "text/html; charset=utf-8",
            _ => "application/octet-stream",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: ArtifactKind,
    /// Relative to the session workspace, `/`-separated.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    #[serde(default)]
    pub logs: String,
    /// Rendering of the cell's last expression; empty when there is none.
    #[serde(default)]
    pub output: String,
    #[serde(default)]
    pub artifacts: Vec<Artifact>,
    /// Present exactly when `status` is `error`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exception: Option<String>,
    /// What the sandbox denied, when `status` is `violation`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violation: Option<String>,
}

impl ExecutionResult {
    pub fn ok(logs: String, output: String, artifacts: Vec<Artifact>) -> Self {
        Self {
            status: ExecStatus::Ok,
            logs,
            output,
            artifacts,
            exception: None,
            violation: None,
        }
    }

    pub fn error(logs: String, exception: String) -> Self {
        Self {
            status: ExecStatus::Error,
            logs,
            output: String::new(),
            artifacts: Vec::new(),
            exception: Some(exception),
            violation: None,
        }
    }

    pub fn violation(logs: String, what: String) -> Self {
        Self {
            status: ExecStatus::Violation,
            logs,
            output: String::new(),
            artifacts: Vec::new(),
            exception: None,
            violation: Some(what),
        }
    }

    pub fn timeout(logs: String, secs: f64) -> Self {
        Self {
            status: ExecStatus::Timeout,
            logs,
            output: String::new(),
            artifacts: Vec::new(),
            exception: None,
            violation: Some(format!("cell exceeded the {secs} s time limit")),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }

    /// Text handed to the code generator when the cell did not succeed.
    pub fn failure_text(&self) -> Option<String> {
        match self.status {
            ExecStatus::Ok => None,
            ExecStatus::Error => Some(
                self.exception
                    .clone()
                    .unwrap_or_else(|| "unknown error".into()),
            ),
            ExecStatus::Violation => Some(format!(
                "sandbox violation: {}",
                self.violation.as_deref().unwrap_or("unspecified")
            )),
            ExecStatus::Timeout => Some(format!(
                "timeout: {}",
                self.violation
                    .as_deref()
                    .unwrap_or("cell exceeded the time limit")
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginManifestEntry {
    pub name: String,
    /// Kernel-side module that provides the function.
    pub module: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub snapshot: PathBuf,
    pub workspace: PathBuf,
    #[serde(default)]
    pub plugins: Vec<PluginManifestEntry>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_quota")]
    pub quota_bytes: u64,
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECS
}

fn default_quota() -> u64 {
    DEFAULT_QUOTA_BYTES
}

impl InitSpec {
    pub fn new(snapshot: impl Into<PathBuf>, workspace: impl Into<PathBuf>) -> Self {
        Self {
            snapshot: snapshot.into(),
            workspace: workspace.into(),
            plugins: Vec::new(),
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            quota_bytes: DEFAULT_QUOTA_BYTES,
        }
    }

    pub fn with_plugins(mut self, plugins: Vec<PluginManifestEntry>) -> Self {
        self.plugins = plugins;
        self
    }

    pub fn with_quota(mut self, bytes: u64) -> Self {
        self.quota_bytes = bytes;
        self
    }

    pub fn with_timeout(mut self, secs: f64) -> Self {
        self.timeout_secs = secs;
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("data snapshot not found: {0}")]
    SnapshotMissing(String),
    #[error("plugin {plugin} failed to load: {reason}")]
    PluginLoadError { plugin: String, reason: String },
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} is already initialized")]
    SessionExists(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("kernel unavailable: {0}")]
    Unavailable(String),
}

/// Serialized form of a [`KernelError`] inside a `result` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
}

impl From<&KernelError> for WireError {
    fn from(e: &KernelError) -> Self {
        let (kind, subject) = match e {
            KernelError::SnapshotMissing(p) => ("SnapshotMissing", Some(p.clone())),
            KernelError::PluginLoadError { plugin, .. } => {
                ("PluginLoadError", Some(plugin.clone()))
            }
            KernelError::UnknownSession(s) => ("UnknownSession", Some(s.clone())),
            KernelError::SessionExists(s) => ("SessionExists", Some(s.clone())),
            KernelError::Protocol(_) => ("Protocol", None),
            KernelError::Unavailable(_) => ("Unavailable", None),
        };
        let message = match e {
            KernelError::PluginLoadError { reason, .. } => reason.clone(),
            KernelError::Protocol(m) | KernelError::Unavailable(m) => m.clone(),
            other => other.to_string(),
        };
        Self {
            kind: kind.into(),
            message,
            subject,
        }
    }
}

impl From<WireError> for KernelError {
    fn from(w: WireError) -> Self {
        let subject = w.subject.clone().unwrap_or_default();
        match w.kind.as_str() {
            "SnapshotMissing" => KernelError::SnapshotMissing(subject),
            "PluginLoadError" => KernelError::PluginLoadError {
                plugin: subject,
                reason: w.message,
            },
            "UnknownSession" => KernelError::UnknownSession(subject),
            "SessionExists" => KernelError::SessionExists(subject),
            "Unavailable" => KernelError::Unavailable(w.message),
            _ => KernelError::Protocol(w.message),
        }
    }
}

/// Carries one request to a kernel and brings back its answer.
pub trait Transport: Send {
    fn roundtrip(&mut self, message: KernelMessage) -> Result<KernelMessage, KernelError>;
}

/// What the agent needs from a kernel.
pub trait Executor: Send {
    /// Creates the workspace, loads the snapshot as [`DATA_HANDLE`] and
    /// imports the manifest plugins. Returns the workspace's artifacts.
    fn init(&mut self, session_id: &str, spec: &InitSpec) -> Result<Vec<Artifact>, KernelError>;
    fn execute(
        &mut self,
        session_id: &str,
        cell_id: &str,
        code: &str,
    ) -> Result<ExecutionResult, KernelError>;
    /// Syntax check only; nothing runs.
    fn dry_parse(
        &mut self,
        session_id: &str,
        cell_id: &str,
        code: &str,
    ) -> Result<ExecutionResult, KernelError>;
    /// Clears interpreter state but keeps workspace artifacts, which are
    /// returned.
    fn reset(&mut self, session_id: &str) -> Result<Vec<Artifact>, KernelError>;
    fn shutdown(&mut self, session_id: &str) -> Result<(), KernelError>;
}

fn check_reply(
    reply: &KernelMessage,
    session_id: &str,
    cell_id: Option<&str>,
) -> Result<(), KernelError> {
    if reply.kind != MessageKind::Result {
        return Err(KernelError::Protocol(format!(
            "expected a result message, got {:?}",
            reply.kind
        )));
    }
    if reply.session_id != session_id {
        return Err(KernelError::Protocol(format!(
            "reply for session {} instead of {session_id}",
            reply.session_id
        )));
    }
    if let Some(cell) = cell_id {
        if reply.cell_id.as_deref() != Some(cell) {
            return Err(KernelError::Protocol(format!(
                "reply for cell {:?} instead of {cell}",
                reply.cell_id
            )));
        }
    }
    if let Some(err) = reply.payload.as_ref().and_then(|p| p.get("error")) {
        let wire: WireError = serde_json::from_value(err.clone())
            .map_err(|e| KernelError::Protocol(format!("bad error payload: {e}")))?;
        return Err(wire.into());
    }
    Ok(())
}

fn decode_ready(reply: KernelMessage, session_id: &str) -> Result<Vec<Artifact>, KernelError> {
    check_reply(&reply, session_id, None)?;
    let payload = reply.payload.unwrap_or(Value::Null);
    if payload.get("status").and_then(Value::as_str) != Some("ready") {
        return Err(KernelError::Protocol(format!(
            "expected ready, got {payload}"
        )));
    }
    match payload.get("artifacts") {
        Some(a) => serde_json::from_value(a.clone())
            .map_err(|e| KernelError::Protocol(format!("bad artifact list: {e}"))),
        None => Ok(Vec::new()),
    }
}

fn decode_result(
    reply: KernelMessage,
    session_id: &str,
    cell_id: &str,
) -> Result<ExecutionResult, KernelError> {
    check_reply(&reply, session_id, Some(cell_id))?;
    let payload = reply
        .payload
        .ok_or_else(|| KernelError::Protocol("result without payload".into()))?;
    let result: ExecutionResult = serde_json::from_value(payload)
        .map_err(|e| KernelError::Protocol(format!("bad execution result: {e}")))?;
    if (result.status == ExecStatus::Error) != result.exception.is_some() {
        return Err(KernelError::Protocol(
            "exception must be present exactly when status is error".into(),
        ));
    }
    Ok(result)
}

impl<T: Transport> Executor for T {
    fn init(&mut self, session_id: &str, spec: &InitSpec) -> Result<Vec<Artifact>, KernelError> {
        let reply = self.roundtrip(KernelMessage::init(session_id, spec))?;
        decode_ready(reply, session_id)
    }

    fn execute(
        &mut self,
        session_id: &str,
        cell_id: &str,
        code: &str,
    ) -> Result<ExecutionResult, KernelError> {
        let reply = self.roundtrip(KernelMessage::execute(session_id, cell_id, code))?;
        decode_result(reply, session_id, cell_id)
    }

    fn dry_parse(
        &mut self,
        session_id: &str,
        cell_id: &str,
        code: &str,
    ) -> Result<ExecutionResult, KernelError> {
        let reply = self.roundtrip(KernelMessage::parse_only(session_id, cell_id, code))?;
        decode_result(reply, session_id, cell_id)
    }

    fn reset(&mut self, session_id: &str) -> Result<Vec<Artifact>, KernelError> {
        let reply = self.roundtrip(KernelMessage::reset(session_id))?;
        decode_ready(reply, session_id)
    }

    fn shutdown(&mut self, session_id: &str) -> Result<(), KernelError> {
        let reply = self.roundtrip(KernelMessage::shutdown(session_id))?;
        decode_ready(reply, session_id).map(|_| ())
    }
}

/// Lexically resolves `path` against `workspace`. Returns `None` when the
/// result would leave the workspace.
pub fn contained_path(workspace: &Path, path: &str) -> Option<PathBuf> {
    let candidate = Path::new(path);
    let joined = if candidate.is_absolute() {
        candidate.to_path_buf()
    } else {
        workspace.join(candidate)
    };
    let mut out = PathBuf::new();
    for c in joined.components() {
        match c {
            Component::ParentDir => {
                if !out.pop() {
                    return None;
                }
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    let root: PathBuf = workspace
        .components()
        .filter(|c| !matches!(c, Component::CurDir))
        .collect();
    (out.starts_with(&root) && out != root).then_some(out)
}
