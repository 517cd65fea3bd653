//! Background pipeline jobs on a fixed pool of worker threads.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread;

use chrono::{DateTime, Utc};
use parking_lot::{Condvar, Mutex};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
    Canceled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            JobState::Succeeded | JobState::Failed | JobState::Canceled
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct JobStatus {
    pub id: String,
    pub kind: String,
    pub state: JobState,
    /// Fraction done, in [0, 1]; never decreases.
    pub progress: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub created_at: DateTime<Utc>,
}

/// What a running job sees of itself.
pub struct JobContext {
    cancel: AtomicBool,
    progress: AtomicU64,
}

impl JobContext {
    fn new() -> Self {
        Self {
            cancel: AtomicBool::new(false),
            progress: AtomicU64::new(0f64.to_bits()),
        }
    }

    pub fn is_canceled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    /// Records `done` of `total`. Smaller values than already reported are
    /// ignored.
    pub fn report(&self, done: usize, total: usize) {
        let f = if total == 0 {
            1.0
        } else {
            (done as f64 / total as f64).clamp(0.0, 1.0)
        };
        let _ = self
            .progress
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |old| {
                (f > f64::from_bits(old)).then_some(f.to_bits())
            });
    }

    pub fn progress(&self) -> f64 {
        f64::from_bits(self.progress.load(Ordering::SeqCst))
    }
}

/// Job bodies return a JSON report or an error message. A body that
/// notices cancellation returns `Err(JobError::Canceled)`.
#[derive(Debug)]
pub enum JobError {
    Canceled,
    Failed(String),
}

impl<E: std::fmt::Display> From<E> for JobError {
    fn from(e: E) -> Self {
        JobError::Failed(e.to_string())
    }
}

type Body = Box<dyn FnOnce(&JobContext) -> Result<serde_json::Value, JobError> + Send>;

struct Entry {
    kind: String,
    state: JobState,
    report: Option<serde_json::Value>,
    error: Option<String>,
    created_at: DateTime<Utc>,
    ctx: Arc<JobContext>,
}

#[derive(Default)]
struct Shared {
    jobs: Mutex<HashMap<String, Entry>>,
    changed: Condvar,
}

pub struct JobManager {
    shared: Arc<Shared>,
    queue: Mutex<Option<Sender<(String, Body)>>>,
    workers: Mutex<Vec<thread::JoinHandle<()>>>,
}

impl JobManager {
    pub fn new(workers: usize) -> Self {
        let (tx, rx) = channel::<(String, Body)>();
        let rx = Arc::new(Mutex::new(rx));
        let shared = Arc::new(Shared::default());
        let handles = (0..workers.max(1))
            .map(|i| {
                let rx = rx.clone();
                let shared = shared.clone();
                thread::Builder::new()
                    .name(format!("job-worker-{i}"))
                    .spawn(move || worker(&rx, &shared))
                    .expect("spawn job worker")
            })
            .collect();
        Self {
            shared,
            queue: Mutex::new(Some(tx)),
            workers: Mutex::new(handles),
        }
    }

    pub fn submit(
        &self,
        kind: &str,
        body: impl FnOnce(&JobContext) -> Result<serde_json::Value, JobError> + Send + 'static,
    ) -> String {
        let id = uuid::Uuid::new_v4().simple().to_string();
        self.shared.jobs.lock().insert(
            id.clone(),
            Entry {
                kind: kind.into(),
                state: JobState::Queued,
                report: None,
                error: None,
                created_at: Utc::now(),
                ctx: Arc::new(JobContext::new()),
            },
        );
        let sent = self
            .queue
            .lock()
            .as_ref()
            .map(|q| q.send((id.clone(), Box::new(body))).is_ok());
        if sent != Some(true) {
            self.finish(
                &id,
                JobState::Failed,
                None,
                Some("job queue is shut down".into()),
            );
        }
        id
    }

    fn finish(
        &self,
        id: &str,
        state: JobState,
        report: Option<serde_json::Value>,
        error: Option<String>,
    ) {
        finish(&self.shared, id, state, report, error);
    }

    pub fn status(&self, id: &str) -> Option<JobStatus> {
        self.shared.jobs.lock().get(id).map(|e| status(id, e))
    }

    /// Asks a job to stop. Queued jobs never start; running ones stop at
    /// their next check. Returns false for unknown ids.
    pub fn cancel(&self, id: &str) -> bool {
        let mut jobs = self.shared.jobs.lock();
        let Some(e) = jobs.get_mut(id) else {
            return false;
        };
        e.ctx.cancel.store(true, Ordering::SeqCst);
        if e.state == JobState::Queued {
            e.state = JobState::Canceled;
            self.shared.changed.notify_all();
        }
        true
    }

    /// Blocks until the job reaches a terminal state.
    pub fn wait(&self, id: &str) -> Option<JobStatus> {
        let mut jobs = self.shared.jobs.lock();
        loop {
            let e = jobs.get(id)?;
            if e.state.is_terminal() {
                return Some(status(id, e));
            }
            self.shared.changed.wait(&mut jobs);
        }
    }

    /// Stops accepting jobs and waits for the workers to drain the queue.
    pub fn shutdown(&self) {
        self.queue.lock().take();
        for h in self.workers.lock().drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for JobManager {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn status(id: &str, e: &Entry) -> JobStatus {
    let progress = if e.state == JobState::Succeeded {
        1.0
    } else {
        e.ctx.progress()
    };
    JobStatus {
        id: id.into(),
        kind: e.kind.clone(),
        state: e.state,
        progress,
        report: e.report.clone(),
        error: e.error.clone(),
        created_at: e.created_at,
    }
}

fn finish(
    shared: &Shared,
    id: &str,
    state: JobState,
    report: Option<serde_json::Value>,
    error: Option<String>,
) {
    let mut jobs = shared.jobs.lock();
    if let Some(e) = jobs.get_mut(id) {
        if state == JobState::Succeeded {
            e.ctx.report(1, 1);
        }
        e.state = state;
        e.report = report;
        e.error = error;
    }
    shared.changed.notify_all();
}

fn worker(rx: &Mutex<Receiver<(String, Body)>>, shared: &Shared) {
    loop {
        let next = rx.lock().recv();
        let Ok((id, body)) = next else { return };
        let ctx = {
            let mut jobs = shared.jobs.lock();
            let Some(e) = jobs.get_mut(&id) else { continue };
            if e.state != JobState::Queued {
                continue;
            }
            e.state = JobState::Running;
            e.ctx.clone()
        };
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| body(&ctx)));
        match outcome {
            Ok(Ok(report)) => finish(shared, &id, JobState::Succeeded, Some(report), None),
            Ok(Err(JobError::Canceled)) => finish(shared, &id, JobState::Canceled, None, None),
            Ok(Err(JobError::Failed(msg))) => {
                log::warn!("job {id} failed: {msg}");
                finish(shared, &id, JobState::Failed, None, Some(msg))
            }
            Err(_) => finish(
                shared,
                &id,
                JobState::Failed,
                None,
                Some("job panicked".into()),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::mpsc;
    use std::time::Duration;

    #[test]
    fn runs_and_reports() {
        let jobs = JobManager::new(1);
        let id = jobs.submit("t", |ctx| {
            ctx.report(1, 2);
            ctx.report(0, 2);
            assert_eq!(ctx.progress(), 0.5);
            Ok(serde_json::json!({"n": 1}))
        });
        let s = jobs.wait(&id).unwrap();
        assert_eq!(s.state, JobState::Succeeded);
        assert_eq!(s.progress, 1.0);
        assert_eq!(s.report.unwrap()["n"], 1);
    }

    #[test]
    fn cancel_running_and_queued() {
        let jobs = JobManager::new(1);
        let (started_tx, started_rx) = mpsc::channel();
        let running = jobs.submit("slow", move |ctx| {
            started_tx.send(()).unwrap();
            while !ctx.is_canceled() {
                thread::sleep(Duration::from_millis(2));
            }
            Err(JobError::Canceled)
        });
        let queued = jobs.submit("never", |_| panic!("must not run"));
        started_rx.recv().unwrap();
        assert!(jobs.cancel(&queued));
        assert!(jobs.cancel(&running));
        assert_eq!(jobs.wait(&running).unwrap().state, JobState::Canceled);
        assert_eq!(jobs.wait(&queued).unwrap().state, JobState::Canceled);
        assert!(!jobs.cancel("missing"));
    }

    #[test]
    fn failures_and_panics_are_reported() {
        let jobs = JobManager::new(2);
        let a = jobs.submit("fail", |_| Err(JobError::Failed("boom".into())));
        let b = jobs.submit("panic", |_| panic!("bad"));
        assert_eq!(jobs.wait(&a).unwrap().error.as_deref(), Some("boom"));
        assert_eq!(jobs.wait(&b).unwrap().state, JobState::Failed);
    }
}
