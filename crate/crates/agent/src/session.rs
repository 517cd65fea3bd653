//! Chat sessions: one kernel, one history, one turn at a time.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use feedlens_core::llm::LlmError;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codegen::{AttemptRecord, CodeGenerator, CodegenError, MAX_ATTEMPTS};
use crate::kernel::{contained_path, Artifact, ArtifactKind, Executor, InitSpec, KernelError};
use crate::planner::{Judgement, Plan, PlanReply, Planner, PlannerError, Replan, StepStatus};

/// Infrastructure failures. Domain failures (unreadable plans, exhausted
/// repairs) are answered with a failed response instead.
#[derive(Debug, Error)]
pub enum SessionError {
    #[error("kernel: {0}")]
    Kernel(#[from] KernelError),
    #[error("gateway: {0}")]
    Gateway(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnStatus {
    Answered,
    ClarificationNeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub text: String,
    pub artifacts: Vec<Artifact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_shown: Option<String>,
    pub status: TurnStatus,
}

/// What happened inside a turn, for diagnostics and tests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    /// Every plan the turn ran, in order; the last one is final.
    pub plans: Vec<Plan>,
    /// Generation attempts per dispatched query.
    pub queries: Vec<(String, Vec<AttemptRecord>)>,
    pub judgements: Vec<Judgement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub response: AgentResponse,
    #[serde(skip)]
    pub trace: TurnTrace,
}

/// Issues unguessable, session-scoped URLs for workspace files.
pub struct ArtifactRegistry {
    secret: Vec<u8>,
    entries: RwLock<HashMap<String, ArtifactEntry>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactEntry {
    pub session_id: String,
    pub path: PathBuf,
    pub kind: ArtifactKind,
    pub content_type: &'static str,
}

impl ArtifactRegistry {
    pub fn new(secret: impl Into<Vec<u8>>) -> Self {
        Self {
            secret: secret.into(),
            entries: RwLock::new(HashMap::new()),
        }
    }

    /// SHA-256 over the secret, session and path, cut to 128 bits.
    pub fn token(&self, session_id: &str, rel_path: &str) -> String {
        let mut h = Sha256::new();
        h.update(&self.secret);
        h.update([0]);
        h.update(session_id.as_bytes());
        h.update([0]);
        h.update(rel_path.as_bytes());
        hex::encode(h.finalize())[..32].to_string()
    }

    /// Registers a workspace file and returns the artifact with its URL.
    pub fn mint(
        &self,
        session_id: &str,
        workspace: &Path,
        artifact: &Artifact,
    ) -> Option<Artifact> {
        let abs = contained_path(workspace, &artifact.path)?;
        let token = self.token(session_id, &artifact.path);
        self.entries.write().insert(
            token.clone(),
            ArtifactEntry {
                session_id: session_id.into(),
                path: abs,
                kind: artifact.kind,
                content_type: ArtifactKind::content_type(&artifact.path),
            },
        );
        Some(Artifact {
            url: Some(format!("/artifacts/{token}")),
            ..artifact.clone()
        })
    }

    pub fn resolve(&self, token: &str) -> Option<ArtifactEntry> {
        self.entries.read().get(token).cloned()
    }

    pub fn revoke_session(&self, session_id: &str) {
        self.entries
            .write()
            .retain(|_, e| e.session_id != session_id);
    }
}

pub struct Session {
    pub id: String,
    spec: InitSpec,
    schema: String,
    kernel: Box<dyn Executor>,
    kernel_ready: bool,
    history: Vec<Turn>,
    plan: Option<Plan>,
    registry: Arc<ArtifactRegistry>,
}

impl Session {
    /// The kernel starts on the first question.
    pub fn new(
        id: impl Into<String>,
        spec: InitSpec,
        schema: impl Into<String>,
        kernel: Box<dyn Executor>,
        registry: Arc<ArtifactRegistry>,
    ) -> Self {
        Self {
            id: id.into(),
            spec,
            schema: schema.into(),
            kernel,
            kernel_ready: false,
            history: Vec::new(),
            plan: None,
            registry,
        }
    }

    pub fn history(&self) -> &[Turn] {
        &self.history
    }

    pub fn plan(&self) -> Option<&Plan> {
        self.plan.as_ref()
    }

    pub fn workspace(&self) -> &Path {
        &self.spec.workspace
    }

    fn ensure_kernel(&mut self) -> Result<(), KernelError> {
        if !self.kernel_ready {
            self.kernel.init(&self.id, &self.spec)?;
            self.kernel_ready = true;
        }
        Ok(())
    }

    /// Stops the kernel and withdraws the session's artifact URLs.
    pub fn close(&mut self) {
        if self.kernel_ready {
            if let Err(e) = self.kernel.shutdown(&self.id) {
                log::warn!("session {}: kernel shutdown failed: {e}", self.id);
            }
            self.kernel_ready = false;
        }
        self.registry.revoke_session(&self.id);
    }

    fn history_pairs(&self) -> Vec<(String, String)> {
        self.history
            .iter()
            .map(|t| (t.question.clone(), t.response.text.clone()))
            .collect()
    }

    fn record(
        &mut self,
        question: &str,
        response: AgentResponse,
        trace: TurnTrace,
    ) -> AgentResponse {
        self.history.push(Turn {
            question: question.into(),
            response: response.clone(),
            trace,
        });
        response
    }

    pub fn last_trace(&self) -> Option<&TurnTrace> {
        self.history.last().map(|t| &t.trace)
    }
}

/// Most gateway calls one turn can make. Each plan revision costs up to two
/// planning calls, one reflection, a judge call and, per step, the code
/// generator's attempts plus its re-ask; the summary comes last.
pub fn turn_call_budget(max_replans: u32, max_steps: usize) -> usize {
    let per_step = MAX_ATTEMPTS as usize + 1;
    (max_replans as usize + 1) * (2 + 1 + max_steps * per_step + 1) + 1
}

pub struct Agent {
    pub planner: Planner,
    pub codegen: CodeGenerator,
}

enum Stop {
    Clarify(String),
    Fail(String),
    Infra(SessionError),
}

impl From<PlannerError> for Stop {
    fn from(e: PlannerError) -> Self {
        match e {
            PlannerError::Gateway(g) => Stop::Infra(g.into()),
            other => Stop::Fail(other.to_string()),
        }
    }
}

impl Agent {
    pub fn new(planner: Planner, codegen: CodeGenerator) -> Self {
        Self { planner, codegen }
    }

    pub fn with_max_replans(mut self, n: u32) -> Self {
        self.planner = self.planner.with_max_replans(n);
        self
    }

    /// Runs one user turn to completion. The turn is appended to the
    /// history whatever its outcome.
    pub fn ask(
        &self,
        session: &mut Session,
        question: &str,
    ) -> Result<AgentResponse, SessionError> {
        let mut trace = TurnTrace::default();
        if let Err(e) = session.ensure_kernel() {
            let resp = failed(
                format!("The analysis kernel is unavailable: {e}"),
                Vec::new(),
                None,
            );
            session.record(question, resp, trace);
            return Err(e.into());
        }
        let history = session.history_pairs();
        let turn = session.history.len() + 1;
        let outcome = self.run_turn(session, question, &history, turn, &mut trace);
        let (artifacts, code) = collect_outputs(session, &trace);
        let response = match outcome {
            Ok(plan) => {
                session.plan = Some(plan.clone());
                match self
                    .planner
                    .summarize(question, &plan, &artifacts, &history)
                {
                    Ok(text) => AgentResponse {
                        text,
                        artifacts,
                        code_shown: code,
                        status: TurnStatus::Answered,
                    },
                    Err(e) => failed(
                        format!("The results could not be summarized: {e}"),
                        artifacts,
                        code,
                    ),
                }
            }
            Err(Stop::Clarify(q)) => AgentResponse {
                text: q,
                artifacts,
                code_shown: code,
                status: TurnStatus::ClarificationNeeded,
            },
            Err(Stop::Fail(reason)) => {
                failed(format!("The analysis failed: {reason}"), artifacts, code)
            }
            Err(Stop::Infra(e)) => {
                let resp = failed(
                    format!("The analysis was interrupted: {e}"),
                    artifacts,
                    code,
                );
                session.record(question, resp, trace);
                return Err(e);
            }
        };
        Ok(session.record(question, response, trace))
    }

    fn run_turn(
        &self,
        session: &mut Session,
        question: &str,
        history: &[(String, String)],
        turn: usize,
        trace: &mut TurnTrace,
    ) -> Result<Plan, Stop> {
        let mut plan = match self
            .planner
            .plan(question, &session.schema, history, None)?
        {
            PlanReply::Clarify(q) => return Err(Stop::Clarify(q)),
            PlanReply::Steps(p) => self.planner.reflect_merge(question, p),
        };
        trace.plans.push(plan.clone());
        loop {
            let judgement = self.planner.judge(question, &plan)?;
            trace.judgements.push(judgement.clone());
            match judgement {
                Judgement::Finish => return Ok(plan),
                Judgement::Clarify(q) => return Err(Stop::Clarify(q)),
                Judgement::Continue => {
                    let i = plan
                        .next_pending()
                        .expect("continue implies a pending step");
                    let qid = format!("t{turn}-p{}-s{i}", plan.revision);
                    let query = self
                        .planner
                        .dispatch(&plan, i, &session.schema, qid.clone())?;
                    plan.steps[i].status = StepStatus::Dispatched;
                    match self
                        .codegen
                        .run(&query, session.kernel.as_mut(), &session.id)
                    {
                        Ok(ok) => {
                            trace.queries.push((qid, ok.attempts));
                            let step = &mut plan.steps[i];
                            step.status = StepStatus::Done;
                            step.code = Some(ok.cell.source);
                            step.result = Some(ok.result);
                        }
                        Err(f) => {
                            trace.queries.push((qid, f.attempts));
                            match f.error {
                                CodegenError::Kernel(e) => return Err(Stop::Infra(e.into())),
                                CodegenError::Gateway(e) => return Err(Stop::Infra(e.into())),
                                other => {
                                    let step = &mut plan.steps[i];
                                    step.status = StepStatus::Failed;
                                    step.failure = Some(other.to_string());
                                }
                            }
                        }
                    }
                    if let Some(last) = trace.plans.last_mut() {
                        *last = plan.clone();
                    }
                }
                Judgement::Replan(reason) => {
                    if plan.revision >= self.planner.max_replans {
                        return Err(PlannerError::ReplanBudgetExhausted(plan.revision).into());
                    }
                    let context = Replan {
                        failed: &plan,
                        reason: &reason,
                    };
                    let next = match self.planner.plan(
                        question,
                        &session.schema,
                        history,
                        Some(&context),
                    )? {
                        PlanReply::Clarify(q) => return Err(Stop::Clarify(q)),
                        PlanReply::Steps(p) => p,
                    };
                    let mut next = self.planner.reflect_merge(question, next);
                    next.revision = plan.revision + 1;
                    plan = next;
                    trace.plans.push(plan.clone());
                }
            }
        }
    }
}

fn failed(text: String, artifacts: Vec<Artifact>, code: Option<String>) -> AgentResponse {
    AgentResponse {
        text,
        artifacts,
        code_shown: code,
        status: TurnStatus::Failed,
    }
}

/// Artifacts the turn's cells produced that still exist, with URLs, and the
/// source of every successful cell.
fn collect_outputs(session: &Session, trace: &TurnTrace) -> (Vec<Artifact>, Option<String>) {
    let mut artifacts: Vec<Artifact> = Vec::new();
    let mut code: Vec<String> = Vec::new();
    for plan in &trace.plans {
        for step in &plan.steps {
            if step.status != StepStatus::Done {
                continue;
            }
            if let Some(c) = &step.code {
                if !code.contains(c) {
                    code.push(c.clone());
                }
            }
            for a in step.result.iter().flat_map(|r| &r.artifacts) {
                match artifacts.iter_mut().find(|x| x.path == a.path) {
                    Some(slot) => *slot = a.clone(),
                    None => artifacts.push(a.clone()),
                }
            }
        }
    }
    let ws = session.workspace();
    let listed = artifacts
        .iter()
        .filter(|a| contained_path(ws, &a.path).is_some_and(|p| p.is_file()))
        .filter_map(|a| session.registry.mint(&session.id, ws, a))
        .collect();
    (listed, (!code.is_empty()).then(|| code.join("\n\n")))
}
