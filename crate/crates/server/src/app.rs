//! The internal API. HTTP handlers and CLI commands are thin wrappers over
//! these methods.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use feedlens_agent::kernel::process::ProcessKernel;
use feedlens_agent::kernel::stub::StubKernel;
use feedlens_agent::kernel::{Executor, InitSpec};
use feedlens_agent::session::Turn;
use feedlens_agent::{
    Agent, AgentResponse, ArtifactRegistry, CodeGenerator, Planner, PluginRegistry, Session,
    SessionError,
};
use feedlens_core::classify::{
    evaluate, Classifier, ClassifyError, DemoPool, Dimension, EvalConfig, LabeledExample,
};
use feedlens_core::llm::cassette::{Cassette, Recorder, Replay};
use feedlens_core::llm::live::OpenAiCompatible;
use feedlens_core::llm::LlmError;
use feedlens_core::store::{Filter, Format, IngestReport, RecordStore, StoreError};
use feedlens_core::topics::{
    apply_review, coherence, others_rate, refine_topics, review_candidates, run_round_one,
    run_round_two, Assignment, Decision, EmbeddingCosineScorer, ExtraDemoIndex, ReviewOutcome,
    ReviewSession, TopicError, TopicList,
};
use feedlens_core::LanguageModel;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Backend, Config};
use crate::jobs::{JobError, JobManager, JobStatus};

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    NotFound(String),
    /// The request conflicts with current state (incomplete review, a turn
    /// already in progress, a pipeline step that has not run).
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
    /// Gateway or kernel down.
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl From<StoreError> for AppError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io(_) => AppError::Internal(e.to_string()),
            StoreError::UnknownId(_) => AppError::NotFound(e.to_string()),
            _ => AppError::Invalid(e.to_string()),
        }
    }
}

impl From<SessionError> for AppError {
    fn from(e: SessionError) -> Self {
        AppError::Unavailable(e.to_string())
    }
}

impl From<LlmError> for AppError {
    fn from(e: LlmError) -> Self {
        AppError::Unavailable(e.to_string())
    }
}

pub type AppResult<T> = Result<T, AppError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub id: String,
    pub created_at: DateTime<Utc>,
    pub snapshot_ref: String,
    pub status: SessionStatus,
}

struct SessionSlot {
    handle: SessionHandle,
    session: Mutex<Session>,
}

/// Topic pipeline state, persisted next to the store so CLI invocations
/// can pick up where the previous one stopped.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct TopicState {
    round1: Option<RoundOne>,
    review: Option<ReviewOutcome>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RoundOne {
    assignments: Vec<Assignment>,
    topics: TopicList,
}

#[derive(Debug, Clone, Serialize)]
pub struct TopicEvalReport {
    pub round: Option<u8>,
    pub records: usize,
    pub others_rate: f64,
    pub mean_coherence: Option<f64>,
    pub coherence: Vec<(String, f64)>,
}

pub struct App {
    config: Config,
    model: Arc<dyn LanguageModel>,
    store: Arc<RecordStore>,
    jobs: JobManager,
    topics: Arc<Mutex<TopicState>>,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
    artifacts: Arc<ArtifactRegistry>,
    agent: Agent,
}

/// Builds the configured gateway backend.
pub fn gateway(config: &Config) -> AppResult<Arc<dyn LanguageModel>> {
    let g = &config.gateway;
    Ok(match g.backend {
        Backend::Live => Arc::new(OpenAiCompatible::new(g.live())),
        Backend::Record => {
            let path = g
                .cassettes
                .clone()
                .ok_or_else(|| AppError::Invalid("no cassette path".into()))?;
            Arc::new(Recorder::new(
                OpenAiCompatible::new(g.live()),
                path,
                g.embed_model.clone(),
            )?)
        }
        Backend::Replay => {
            let path = g
                .cassettes
                .clone()
                .ok_or_else(|| AppError::Invalid("no cassette path".into()))?;
            Arc::new(Replay::new(load_cassettes(&path)?, g.embed_model.clone()))
        }
    })
}

/// One cassette file, or every `*.jsonl` in a directory merged in name
/// order.
pub fn load_cassettes(path: &std::path::Path) -> Result<Cassette, LlmError> {
    if !path.is_dir() {
        return Cassette::load(path);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| LlmError::Cassette(format!("{}: {e}", path.display())))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut merged = Cassette::default();
    for f in files {
        for e in Cassette::load(&f)?.entries() {
            merged.insert(e.clone());
        }
    }
    Ok(merged)
}

impl App {
    /// Opens the store under the data directory and uses the configured
    /// gateway.
    pub fn open(config: Config) -> AppResult<Self> {
        std::fs::create_dir_all(&config.server.data_dir)
            .map_err(|e| AppError::Internal(format!("cannot create data dir: {e}")))?;
        let store = RecordStore::open(config.server.data_dir.join("store.jsonl"))?;
        let model = gateway(&config)?;
        Self::with_parts(config, model, store)
    }

    pub fn with_parts(
        config: Config,
        model: Arc<dyn LanguageModel>,
        store: RecordStore,
    ) -> AppResult<Self> {
        config
            .validate()
            .map_err(|e| AppError::Invalid(e.to_string()))?;
        for spec in &config.classify.dimensions {
            let known = store.dimensions();
            if !known.contains_key(&spec.name) {
                store.declare_dimension(&spec.name, &spec.labels)?;
            }
        }
        let secret = match &config.server.artifact_secret {
            Some(s) => s.clone().into_bytes(),
            None => uuid::Uuid::new_v4().as_bytes().to_vec(),
        };
        let params = config.gateway.chat_params();
        let agent = Agent::new(
            Planner::new(model.clone())
                .with_params(params.clone())
                .with_max_replans(config.kernel.max_replans),
            CodeGenerator::new(model.clone(), PluginRegistry::with_builtins()).with_params(params),
        );
        let topics = read_topic_state(&config);
        Ok(Self {
            jobs: JobManager::new(config.server.workers),
            model,
            store: Arc::new(store),
            topics: Arc::new(Mutex::new(topics)),
            sessions: Mutex::new(HashMap::new()),
            artifacts: Arc::new(ArtifactRegistry::new(secret)),
            agent,
            config,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn store(&self) -> &RecordStore {
        &self.store
    }

    pub fn ingest(&self, bytes: &[u8], format: Format) -> AppResult<IngestReport> {
        Ok(self.store.ingest(bytes, format)?)
    }

    pub fn job(&self, id: &str) -> AppResult<JobStatus> {
        self.jobs
            .status(id)
            .ok_or_else(|| AppError::NotFound(format!("unknown job {id}")))
    }

    pub fn cancel_job(&self, id: &str) -> AppResult<JobStatus> {
        if !self.jobs.cancel(id) {
            return Err(AppError::NotFound(format!("unknown job {id}")));
        }
        self.job(id)
    }

    pub fn wait_job(&self, id: &str) -> AppResult<JobStatus> {
        self.jobs
            .wait(id)
            .ok_or_else(|| AppError::NotFound(format!("unknown job {id}")))
    }

    fn dimension(&self, name: &str) -> AppResult<Dimension> {
        if let Some(spec) = self
            .config
            .classify
            .dimensions
            .iter()
            .find(|d| d.name == name)
        {
            return Dimension::from_spec(spec).map_err(|e| AppError::Invalid(e.to_string()));
        }
        let labels = self
            .store
            .dimensions()
            .get(name)
            .cloned()
            .ok_or_else(|| AppError::NotFound(format!("unknown dimension {name:?}")))?;
        Dimension::new(name, &labels.into_iter().collect::<Vec<_>>(), None)
            .map_err(|e| AppError::Invalid(e.to_string()))
    }

    fn labeled(&self, dimension: &str) -> (Vec<LabeledExample>, Vec<(String, String)>) {
        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for r in self.store.all() {
            match r.annotations.labels.get(dimension) {
                Some(l) => labeled.push(LabeledExample {
                    id: r.id,
                    text: r.text,
                    label: l.clone(),
                }),
                None => unlabeled.push((r.id, r.text)),
            }
        }
        (labeled, unlabeled)
    }

    /// Labels every record that has no label in `dimension`, using the
    /// labeled ones as the demonstration pool. Results are written when
    /// the whole batch is done; a canceled run writes nothing.
    pub fn start_classify(&self, dimension: &str, k: Option<usize>) -> AppResult<String> {
        let dim = self.dimension(dimension)?;
        let k = k.unwrap_or(self.config.classify.k);
        let (pool_examples, targets) = self.labeled(dim.name());
        let model = self.model.clone();
        let store = self.store.clone();
        let params = self.config.gateway.chat_params();
        Ok(self.jobs.submit("classify", move |ctx| {
            let pool = DemoPool::build(&*model, &pool_examples)?;
            let classifier = Classifier::new(&*model, &pool).with_params(params);
            let mut labels = Vec::new();
            let mut unparseable = Vec::new();
            let mut calls = 0;
            for (i, (id, text)) in targets.iter().enumerate() {
                if ctx.is_canceled() {
                    return Err(JobError::Canceled);
                }
                match classifier.classify(id, text, &dim, k) {
                    Ok(r) => {
                        calls += r.calls;
                        labels.push((id.clone(), r.label));
                    }
                    Err(ClassifyError::UnparseableLabel(_)) => {
                        calls += 2;
                        unparseable.push(id.clone());
                    }
                    Err(e) => return Err(e.into()),
                }
                ctx.report(i + 1, targets.len());
            }
            store.annotate_many(&labels, dim.name())?;
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for (_, l) in &labels {
                *counts.entry(l.as_str()).or_default() += 1;
            }
            Ok(serde_json::json!({
                "dimension": dim.name(),
                "k": k,
                "pool_size": pool.len(),
                "classified": labels.len(),
                "unparseable": unparseable,
                "label_counts": counts,
                "calls": calls,
            }))
        }))
    }

    /// Accuracy of the classifier on the records already labeled in
    /// `dimension`, split into demonstration pool and test set.
    pub fn start_eval_classify(
        &self,
        dimension: &str,
        k: Option<usize>,
        seed: Option<u64>,
    ) -> AppResult<String> {
        let dim = self.dimension(dimension)?;
        let (examples, _) = self.labeled(dim.name());
        if examples.is_empty() {
            return Err(AppError::Conflict(format!(
                "no records are labeled in {:?}",
                dim.name()
            )));
        }
        let c = &self.config.classify;
        let config = EvalConfig {
            k: k.unwrap_or(c.k),
            seed: seed.unwrap_or(c.seed),
            test_fraction: c.test_fraction,
            fold_top_n: c.fold_top_n,
        };
        let model = self.model.clone();
        Ok(self.jobs.submit("eval_classify", move |ctx| {
            if ctx.is_canceled() {
                return Err(JobError::Canceled);
            }
            let report = evaluate(&*model, &examples, &dim, &config)?;
            Ok(serde_json::to_value(report)?)
        }))
    }

    fn save_topics(config: &Config, state: &TopicState) -> Result<(), std::io::Error> {
        let path = config.server.data_dir.join("topics.json");
        std::fs::create_dir_all(&config.server.data_dir)?;
        std::fs::write(path, serde_json::to_vec_pretty(state)?)
    }

    /// Round one over every record, in posting order.
    pub fn start_round_one(&self) -> AppResult<String> {
        let (model, store, topics, config) = (
            self.model.clone(),
            self.store.clone(),
            self.topics.clone(),
            self.config.clone(),
        );
        Ok(self.jobs.submit("topics_round1", move |ctx| {
            let records = store.all();
            let params = config.gateway.chat_params();
            let outcome = run_round_one(&*model, &params, &records, &config.topics, |i, n| {
                ctx.report(i, n);
                !ctx.is_canceled()
            })?;
            if ctx.is_canceled() {
                return Err(JobError::Canceled);
            }
            store.set_topics_many(&as_pairs(&outcome.assignments), 1)?;
            let report = serde_json::json!({
                "records": records.len(),
                "assigned": outcome.assignments.len(),
                "topics": outcome.topics.len(),
                "list_sizes": outcome.list_sizes,
                "errors": outcome.errors,
                "calls": outcome.calls,
            });
            let mut st = topics.lock();
            *st = TopicState {
                round1: Some(RoundOne {
                    assignments: outcome.assignments,
                    topics: outcome.topics,
                }),
                review: None,
            };
            Self::save_topics(&config, &st)?;
            Ok(report)
        }))
    }

    pub fn candidates(&self) -> AppResult<ReviewSession> {
        let st = self.topics.lock();
        let r1 = st
            .round1
            .as_ref()
            .ok_or_else(|| AppError::Conflict("topic round one has not run".into()))?;
        Ok(review_candidates(&r1.topics))
    }

    /// Applies reviewer decisions; every candidate needs one.
    pub fn review(&self, decisions: &BTreeMap<String, Decision>) -> AppResult<ReviewOutcome> {
        let session = self.candidates()?;
        let outcome = apply_review(&session, decisions).map_err(|e| match e {
            TopicError::IncompleteReview(_) => AppError::Conflict(e.to_string()),
            other => AppError::Invalid(other.to_string()),
        })?;
        let mut st = self.topics.lock();
        st.review = Some(outcome.clone());
        Self::save_topics(&self.config, &st).map_err(|e| AppError::Internal(e.to_string()))?;
        Ok(outcome)
    }

    /// Clusters and summarizes the accepted topics, then assigns every
    /// record again against the refined list.
    pub fn start_round_two(&self) -> AppResult<String> {
        let (round1, review) = {
            let st = self.topics.lock();
            match (&st.round1, &st.review) {
                (Some(r1), Some(rv)) => (r1.clone(), rv.clone()),
                (None, _) => return Err(AppError::Conflict("topic round one has not run".into())),
                (_, None) => {
                    return Err(AppError::Conflict(
                        "round-one topics have not been reviewed".into(),
                    ))
                }
            }
        };
        let (model, store, config) = (self.model.clone(), self.store.clone(), self.config.clone());
        Ok(self.jobs.submit("topics_round2", move |ctx| {
            let params = config.gateway.chat_params();
            let records = store.all();
            let mut reviewed = round1.assignments.clone();
            review.rewrite(&mut reviewed);
            let (clusters, refined) = refine_topics(
                &*model,
                &params,
                &review.accepted,
                config.topics.cluster_threshold,
            )?;
            if ctx.is_canceled() {
                return Err(JobError::Canceled);
            }
            let scorer = EmbeddingCosineScorer(model.clone());
            let extra = ExtraDemoIndex::build(&*model, &scorer, &records, &reviewed)?;
            let refined_config = config.topics.refined(&refined);
            let outcome = run_round_two(
                &*model,
                &params,
                &records,
                &refined_config,
                Some(&extra),
                |i, n| {
                    ctx.report(i, n);
                    !ctx.is_canceled()
                },
            )?;
            if ctx.is_canceled() {
                return Err(JobError::Canceled);
            }
            store.set_topics_many(&as_pairs(&outcome.assignments), 2)?;
            Ok(serde_json::json!({
                "records": records.len(),
                "clusters": clusters.len(),
                "refined_topics": refined.iter().map(|t| t.display.clone()).collect::<Vec<_>>(),
                "topics": outcome.topics.names(),
                "others_rate": others_rate(&outcome.assignments),
                "errors": outcome.errors,
                "calls": outcome.calls,
            }))
        }))
    }

    /// OthersRate and NPMI coherence of the topics currently in the store.
    pub fn eval_topics(&self) -> TopicEvalReport {
        let records = self.store.all();
        let assignments: Vec<Assignment> = records
            .iter()
            .filter(|r| !r.annotations.topics.is_empty())
            .map(|r| Assignment {
                id: r.id.clone(),
                topics: r.annotations.topics.clone(),
            })
            .collect();
        let round = records
            .iter()
            .filter_map(|r| r.annotations.topic_round)
            .max();
        let report = coherence(&assignments, &records);
        TopicEvalReport {
            round,
            records: assignments.len(),
            others_rate: others_rate(&assignments),
            mean_coherence: report.mean(),
            coherence: report
                .topics
                .iter()
                .map(|t| (t.topic.clone(), t.npmi))
                .collect(),
        }
    }

    fn kernel(&self) -> Box<dyn Executor> {
        match self.config.kernel.command.split_first() {
            Some((program, args)) => Box::new(ProcessKernel::new(program.clone(), args.to_vec())),
            None => Box::new(StubKernel::new()),
        }
    }

    /// A chat session over a snapshot of the store as it is now.
    pub fn create_session(&self) -> AppResult<SessionHandle> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        self.create_session_with_id(&id)
    }

    /// As [`create_session`](Self::create_session) with a chosen id.
    pub fn create_session_with_id(&self, id: &str) -> AppResult<SessionHandle> {
        if id.is_empty()
            || !id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        {
            return Err(AppError::Invalid(format!("invalid session id {id:?}")));
        }
        if self.sessions.lock().contains_key(id) {
            return Err(AppError::Conflict(format!("session {id} exists")));
        }
        let dir = self.config.server.data_dir.join("sessions").join(id);
        std::fs::create_dir_all(&dir).map_err(|e| AppError::Internal(e.to_string()))?;
        let snapshot = dir.join("snapshot.csv");
        self.store
            .export_to_path(&Filter::All, Format::Csv, &snapshot)?;
        let spec = InitSpec::new(&snapshot, dir.join("workspace"))
            .with_plugins(self.agent.codegen.registry().manifest())
            .with_timeout(self.config.kernel.timeout_secs)
            .with_quota(self.config.kernel.quota_bytes);
        let schema = self.store.schema_summary().render();
        let session = Session::new(id, spec, schema, self.kernel(), self.artifacts.clone());
        let handle = SessionHandle {
            id: id.into(),
            created_at: Utc::now(),
            snapshot_ref: format!("sessions/{id}/snapshot.csv"),
            status: SessionStatus::Active,
        };
        self.sessions.lock().insert(
            id.into(),
            Arc::new(SessionSlot {
                handle: handle.clone(),
                session: Mutex::new(session),
            }),
        );
        Ok(handle)
    }

    fn slot(&self, id: &str) -> AppResult<Arc<SessionSlot>> {
        self.sessions
            .lock()
            .get(id)
            .cloned()
            .ok_or_else(|| AppError::NotFound(format!("unknown session {id}")))
    }

    pub fn session(&self, id: &str) -> AppResult<SessionHandle> {
        Ok(self.slot(id)?.handle.clone())
    }

    /// Runs one turn. A session answers one question at a time; a second
    /// concurrent question is refused.
    pub fn ask(&self, id: &str, question: &str) -> AppResult<AgentResponse> {
        if question.trim().is_empty() {
            return Err(AppError::Invalid("empty question".into()));
        }
        let slot = self.slot(id)?;
        let mut session = slot.session.try_lock().ok_or_else(|| {
            AppError::Conflict(format!("session {id} is answering another question"))
        })?;
        Ok(self.agent.ask(&mut session, question)?)
    }

    pub fn history(&self, id: &str) -> AppResult<Vec<Turn>> {
        let slot = self.slot(id)?;
        let session = slot.session.lock();
        Ok(session.history().to_vec())
    }

    /// Shuts the kernel down and forgets the session; its artifact URLs
    /// stop resolving.
    pub fn close_session(&self, id: &str) -> AppResult<SessionHandle> {
        let slot = self
            .sessions
            .lock()
            .remove(id)
            .ok_or_else(|| AppError::NotFound(format!("unknown session {id}")))?;
        slot.session.lock().close();
        Ok(SessionHandle {
            status: SessionStatus::Closed,
            ..slot.handle.clone()
        })
    }

    /// File bytes and content type behind an artifact token.
    pub fn artifact(&self, token: &str) -> AppResult<(Vec<u8>, &'static str)> {
        let entry = self
            .artifacts
            .resolve(token)
            .ok_or_else(|| AppError::NotFound("unknown artifact".into()))?;
        let bytes = std::fs::read(&entry.path)
            .map_err(|_| AppError::NotFound("artifact file is gone".into()))?;
        Ok((bytes, entry.content_type))
    }

    /// Closes every session and drains the job queue.
    pub fn shutdown(&self) {
        let ids: Vec<String> = self.sessions.lock().keys().cloned().collect();
        for id in ids {
            let _ = self.close_session(&id);
        }
        self.jobs.shutdown();
    }
}

fn as_pairs(assignments: &[Assignment]) -> Vec<(String, Vec<String>)> {
    assignments
        .iter()
        .map(|a| (a.id.clone(), a.topics.clone()))
        .collect()
}

fn read_topic_state(config: &Config) -> TopicState {
    let path = config.server.data_dir.join("topics.json");
    match std::fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_else(|e| {
            log::warn!("ignoring unreadable {}: {e}", path.display());
            TopicState::default()
        }),
        Err(_) => TopicState::default(),
    }
}
