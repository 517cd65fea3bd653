//! Kernel client over a child process's stdio.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use super::{
    ExecutionResult, KernelError, KernelMessage, MessageKind, Transport, DEFAULT_TIMEOUT_SECS,
};

/// Extra wait beyond the cell limit before the client gives up on the child.
const GRACE: Duration = Duration::from_secs(2);
/// Wait for requests that run no user code.
const CONTROL_WAIT: Duration = Duration::from_secs(30);

struct Running {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

/// Spawns the kernel on first use and again after it was killed. A respawned
/// kernel has no sessions, so callers see `UnknownSession` until they init.
pub struct ProcessKernel {
    program: String,
    args: Vec<String>,
    running: Option<Running>,
    timeouts: HashMap<String, f64>,
}

impl ProcessKernel {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
            running: None,
            timeouts: HashMap::new(),
        }
    }

    fn ensure_running(&mut self) -> Result<&mut Running, KernelError> {
        if self.running.is_none() {
            let mut child = Command::new(&self.program)
                .args(&self.args)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| {
                    KernelError::Unavailable(format!("cannot start {}: {e}", self.program))
                })?;
            let stdin = child
                .stdin
                .take()
                .ok_or_else(|| KernelError::Unavailable("no stdin".into()))?;
            let stdout = child
                .stdout
                .take()
                .ok_or_else(|| KernelError::Unavailable("no stdout".into()))?;
            let (tx, rx) = mpsc::channel();
            thread::spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    let Ok(line) = line else { break };
                    if line.trim().is_empty() {
                        continue;
                    }
                    if tx.send(line).is_err() {
                        break;
                    }
                }
            });
            self.running = Some(Running {
                child,
                stdin,
                lines: rx,
            });
        }
        Ok(self.running.as_mut().expect("just started"))
    }

    fn kill(&mut self) {
        if let Some(mut r) = self.running.take() {
            let _ = r.child.kill();
            let _ = r.child.wait();
        }
    }
}

impl Transport for ProcessKernel {
    fn roundtrip(&mut self, message: KernelMessage) -> Result<KernelMessage, KernelError> {
        let wait = match message.kind {
            MessageKind::Execute if !message.is_parse_only() => {
                let secs = self
                    .timeouts
                    .get(&message.session_id)
                    .copied()
                    .unwrap_or(DEFAULT_TIMEOUT_SECS);
                Duration::from_secs_f64(secs) + GRACE
            }
            _ => CONTROL_WAIT,
        };
        if message.kind == MessageKind::Init {
            let secs = message
                .payload
                .as_ref()
                .and_then(|p| p.get("timeout_secs"))
                .and_then(|v| v.as_f64());
            self.timeouts.insert(
                message.session_id.clone(),
                secs.unwrap_or(DEFAULT_TIMEOUT_SECS),
            );
        }
        let running = self.ensure_running()?;
        let line = message.to_line();
        if writeln!(running.stdin, "{line}")
            .and_then(|_| running.stdin.flush())
            .is_err()
        {
            self.kill();
            return Err(KernelError::Unavailable("kernel closed its input".into()));
        }
        match running.lines.recv_timeout(wait) {
            Ok(reply) => KernelMessage::from_line(&reply),
            Err(RecvTimeoutError::Timeout) => {
                self.kill();
                match (message.kind, message.cell_id) {
                    (MessageKind::Execute, Some(cell)) => {
                        let secs = wait.saturating_sub(GRACE).as_secs_f64();
                        Ok(KernelMessage::result(
                            &message.session_id,
                            &cell,
                            &ExecutionResult::timeout(String::new(), secs),
                        ))
                    }
                    _ => Err(KernelError::Unavailable("kernel did not answer".into())),
                }
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.kill();
                Err(KernelError::Unavailable("kernel exited".into()))
            }
        }
    }
}

impl Drop for ProcessKernel {
    fn drop(&mut self) {
        self.kill();
    }
}
