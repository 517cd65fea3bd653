//! In-process kernel that speaks the wire protocol.
//!
//! It interprets a small Python subset: assignments, expressions, imports,
//! calls and f-strings, without blocks or function definitions. That is
//! enough for the straight-line analysis cells the code generator emits, and
//! it makes the sandbox rules checkable without a Python runtime.

mod interp;
mod lexer;
mod parser;
pub mod plugins;
pub mod value;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::time::Duration;

pub use interp::{count_by, format_value, load_csv, Flow, Interpreter};
pub use parser::parse;

use super::{
    Artifact, ArtifactKind, ExecutionResult, InitSpec, KernelError, KernelMessage, MessageKind,
    Transport,
};
use value::Table;

struct Session {
    interp: Interpreter,
    df: Table,
}

/// Sessions live as long as the kernel value.
#[derive(Default)]
pub struct StubKernel {
    sessions: HashMap<String, Session>,
}

impl StubKernel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    /// Answers one request. Never fails: protocol problems come back as
    /// error payloads.
    pub fn handle(&mut self, msg: KernelMessage) -> KernelMessage {
        let sid = msg.session_id.clone();
        match msg.kind {
            MessageKind::Init => {
                let spec: InitSpec = match msg.payload.clone().map(serde_json::from_value) {
                    Some(Ok(spec)) => spec,
                    Some(Err(e)) => {
                        return KernelMessage::failure(
                            &sid,
                            None,
                            &KernelError::Protocol(format!("bad init payload: {e}")),
                        )
                    }
                    None => {
                        return KernelMessage::failure(
                            &sid,
                            None,
                            &KernelError::Protocol("init without payload".into()),
                        )
                    }
                };
                match self.init(&sid, spec) {
                    Ok(artifacts) => KernelMessage::ready(&sid, &artifacts),
                    Err(e) => KernelMessage::failure(&sid, None, &e),
                }
            }
            MessageKind::Execute => {
                let cell = msg.cell_id.clone().unwrap_or_default();
                let Some(session) = self.sessions.get_mut(&sid) else {
                    return KernelMessage::failure(
                        &sid,
                        Some(&cell),
                        &KernelError::UnknownSession(sid.clone()),
                    );
                };
                let code = msg.code.clone().unwrap_or_default();
                let result = if msg.is_parse_only() {
                    match parse(&code) {
                        Ok(_) => ExecutionResult::ok(String::new(), String::new(), Vec::new()),
                        Err(e) => ExecutionResult::error(String::new(), e),
                    }
                } else {
                    session.interp.run_cell(&code)
                };
                KernelMessage::result(&sid, &cell, &result)
            }
            MessageKind::Reset => match self.sessions.get_mut(&sid) {
                Some(s) => {
                    s.interp.reset_env(&s.df);
                    KernelMessage::ready(&sid, &s.interp.artifacts)
                }
                None => {
                    KernelMessage::failure(&sid, None, &KernelError::UnknownSession(sid.clone()))
                }
            },
            MessageKind::Shutdown => match self.sessions.remove(&sid) {
                Some(_) => KernelMessage::ready(&sid, &[]),
                None => {
                    KernelMessage::failure(&sid, None, &KernelError::UnknownSession(sid.clone()))
                }
            },
            MessageKind::Result => KernelMessage::failure(
                &sid,
                msg.cell_id.as_deref(),
                &KernelError::Protocol("kernels do not accept result messages".into()),
            ),
        }
    }

    fn init(&mut self, sid: &str, spec: InitSpec) -> Result<Vec<Artifact>, KernelError> {
        if self.sessions.contains_key(sid) {
            return Err(KernelError::SessionExists(sid.into()));
        }
        if !spec.snapshot.is_file() {
            return Err(KernelError::SnapshotMissing(
                spec.snapshot.display().to_string(),
            ));
        }
        let mut plugin_names = BTreeSet::new();
        for entry in &spec.plugins {
            let known = plugins::BUILTIN_PLUGINS
                .iter()
                .find(|(_, m)| *m == entry.module);
            match known {
                Some((name, _)) if *name == entry.name => {
                    plugin_names.insert(entry.name.clone());
                }
                Some((_, module)) => {
                    return Err(KernelError::PluginLoadError {
                        plugin: entry.name.clone(),
                        reason: format!("cannot import name '{}' from '{module}'", entry.name),
                    })
                }
                None => {
                    return Err(KernelError::PluginLoadError {
                        plugin: entry.name.clone(),
                        reason: format!("No module named '{}'", entry.module),
                    })
                }
            }
        }
        let text = std::fs::read_to_string(&spec.snapshot).map_err(|e| {
            KernelError::SnapshotMissing(format!("{}: {e}", spec.snapshot.display()))
        })?;
        let df = load_csv(&text)
            .map_err(|e| KernelError::Protocol(format!("snapshot is not valid CSV: {e}")))?;
        std::fs::create_dir_all(&spec.workspace)
            .map_err(|e| KernelError::Unavailable(format!("cannot create workspace: {e}")))?;

        let timeout = Duration::from_secs_f64(spec.timeout_secs.max(0.0));
        let mut interp = Interpreter::new(
            spec.workspace.clone(),
            spec.snapshot.clone(),
            plugin_names,
            timeout,
            spec.quota_bytes,
        );
        interp.artifacts = scan_workspace(&spec.workspace);
        interp.reset_env(&df);
        let artifacts = interp.artifacts.clone();
        self.sessions.insert(sid.into(), Session { interp, df });
        Ok(artifacts)
    }
}

impl Transport for StubKernel {
    fn roundtrip(&mut self, message: KernelMessage) -> Result<KernelMessage, KernelError> {
        Ok(self.handle(message))
    }
}

/// Files already in a workspace, sorted by path.
fn scan_workspace(root: &Path) -> Vec<Artifact> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) {
        let Ok(rd) = std::fs::read_dir(dir) else {
            return;
        };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if let Ok(rel) = p.strip_prefix(root) {
                out.push(
                    rel.components()
                        .map(|c| c.as_os_str().to_string_lossy().into_owned())
                        .collect::<Vec<_>>()
                        .join("/"),
                );
            }
        }
    }
    let mut paths = Vec::new();
    walk(root, root, &mut paths);
    paths.sort();
    paths
        .into_iter()
        .map(|path| Artifact {
            kind: ArtifactKind::from_path(&path),
            path,
            url: None,
            caption: None,
        })
        .collect()
}
