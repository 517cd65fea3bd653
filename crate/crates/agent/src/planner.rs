//! Planning: questions become ordered sub-tasks, which are merged, judged
//! and finally summarized.

use std::collections::BTreeSet;
use std::sync::{Arc, LazyLock};

use feedlens_core::llm::LlmError;
use feedlens_core::{ChatMessage, ChatParams, ChatRequest, LanguageModel};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codegen::CgQuery;
use crate::kernel::{Artifact, ExecutionResult};

pub const DEFAULT_MAX_REPLANS: u32 = 3;
/// Per-output cap when results are quoted back to the model.
const DIGEST_CHARS: usize = 1500;

const PLAN: &str = include_str!("../prompts/plan.txt");
const PLAN_DEMOS: &str = include_str!("../prompts/plan_demos.txt");
const PLAN_REASK: &str = include_str!("../prompts/plan_reask.txt");
const REFLECT: &str = include_str!("../prompts/reflect.txt");
const JUDGE: &str = include_str!("../prompts/judge.txt");
const SUMMARIZE: &str = include_str!("../prompts/summarize.txt");

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("unreadable plan: {0}")]
    PlanParseError(String),
    #[error("step {step} depends on step {dependency}, which is not done")]
    DependencyUnmet { step: usize, dependency: usize },
    #[error("gave up after {0} replans")]
    ReplanBudgetExhausted(u32),
    #[error("gateway: {0}")]
    Gateway(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepStatus {
    Pending,
    Dispatched,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTask {
    pub description: String,
    pub depends_on: Vec<usize>,
    /// The planner's own hint; merging follows the reflection reply.
    pub mergeable: bool,
    pub status: StepStatus,
    pub result: Option<ExecutionResult>,
    /// Source of the cell that produced `result`.
    pub code: Option<String>,
    /// Why the step failed, when it did.
    pub failure: Option<String>,
}

impl SubTask {
    pub fn new(description: impl Into<String>, depends_on: Vec<usize>) -> Self {
        Self {
            description: description.into(),
            depends_on,
            mergeable: false,
            status: StepStatus::Pending,
            result: None,
            code: None,
            failure: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<SubTask>,
    pub revision: u32,
}

impl Plan {
    pub fn is_acyclic(&self) -> bool {
        self.steps
            .iter()
            .enumerate()
            .all(|(i, s)| s.depends_on.iter().all(|&d| d < i))
    }

    pub fn next_pending(&self) -> Option<usize> {
        self.steps
            .iter()
            .position(|s| s.status == StepStatus::Pending)
    }

    pub fn render(&self) -> String {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let deps = if s.depends_on.is_empty() {
                    "-".to_string()
                } else {
                    s.depends_on
                        .iter()
                        .map(usize::to_string)
                        .collect::<Vec<_>>()
                        .join(", ")
                };
                let hint = if s.mergeable {
                    " [marked mergeable]"
                } else {
                    ""
                };
                format!("{i}. {} (depends on: {deps}){hint}", s.description)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// What a planning completion asked for.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanReply {
    Steps(Plan),
    Clarify(String),
}

#[derive(Deserialize)]
struct StepWire {
    description: String,
    #[serde(default)]
    depends_on: Vec<usize>,
    #[serde(default)]
    mergeable: bool,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PlanWire {
    Steps(Vec<StepWire>),
    Clarify { clarify: String },
}

/// The first fenced block, or the whole text when there is none.
fn fenced_json(text: &str) -> &str {
    static FENCE: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r"(?s)```[ \t]*(?:json)?[ \t]*\r?\n(.*?)```").expect("valid regex")
    });
    FENCE
        .captures(text)
        .and_then(|c| c.get(1))
        .map_or(text.trim(), |m| m.as_str().trim())
}

pub fn parse_plan(text: &str) -> Result<PlanReply, PlannerError> {
    let wire: PlanWire = serde_json::from_str(fenced_json(text))
        .map_err(|e| PlannerError::PlanParseError(e.to_string()))?;
    let steps = match wire {
        PlanWire::Clarify { clarify } => return Ok(PlanReply::Clarify(clarify.trim().to_string())),
        PlanWire::Steps(s) => s,
    };
    if steps.is_empty() {
        return Err(PlannerError::PlanParseError("the plan has no steps".into()));
    }
    let mut out = Vec::with_capacity(steps.len());
    for (i, s) in steps.into_iter().enumerate() {
        if s.description.trim().is_empty() {
            return Err(PlannerError::PlanParseError(format!(
                "step {i} has no description"
            )));
        }
        if let Some(&bad) = s.depends_on.iter().find(|&&d| d >= i) {
            return Err(PlannerError::PlanParseError(format!(
                "step {i} depends on step {bad}, which is not earlier"
            )));
        }
        let mut deps = s.depends_on;
        deps.sort_unstable();
        deps.dedup();
        out.push(SubTask {
            mergeable: s.mergeable,
            ..SubTask::new(s.description.trim(), deps)
        });
    }
    Ok(PlanReply::Steps(Plan {
        steps: out,
        revision: 0,
    }))
}

/// Indices where step `i + 1` depends on step `i` alone.
fn chain_links(plan: &Plan) -> Vec<usize> {
    (0..plan.steps.len().saturating_sub(1))
        .filter(|&i| plan.steps[i + 1].depends_on == [i])
        .collect()
}

/// Fuses every run of consecutive steps in `mergeable` where each step
/// depends only on its predecessor. Never adds steps and keeps the
/// dependency graph pointing backwards.
pub fn merge_chains(plan: &Plan, mergeable: &BTreeSet<usize>) -> Plan {
    let n = plan.steps.len();
    // group[i] = index of the merged step that absorbs original step i
    let mut group = vec![0usize; n];
    let mut merged: Vec<SubTask> = Vec::new();
    for i in 0..n {
        let joins = i > 0
            && plan.steps[i].depends_on == [i - 1]
            && mergeable.contains(&i)
            && mergeable.contains(&(i - 1))
            && plan.steps[i].status == StepStatus::Pending
            && plan.steps[i - 1].status == StepStatus::Pending;
        if joins {
            let last = merged.last_mut().expect("step i-1 was emitted");
            last.description = format!("{}; then {}", last.description, plan.steps[i].description);
            last.mergeable = last.mergeable && plan.steps[i].mergeable;
            group[i] = merged.len() - 1;
        } else {
            let mut s = plan.steps[i].clone();
            let mut deps: Vec<usize> = s.depends_on.iter().map(|&d| group[d]).collect();
            deps.sort_unstable();
            deps.dedup();
            s.depends_on = deps;
            merged.push(s);
            group[i] = merged.len() - 1;
        }
    }
    Plan {
        steps: merged,
        revision: plan.revision,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "detail", rename_all = "lowercase")]
pub enum Judgement {
    Continue,
    Replan(String),
    Clarify(String),
    Finish,
}

/// Reads a judge completion. Anything other than a replan or clarify line
/// counts as satisfied.
pub fn parse_judgement(text: &str) -> Judgement {
    for line in text.lines() {
        let l = line
            .trim()
            .trim_matches(|c| c == '*' || c == '`' || c == '"');
        let lower = l.to_lowercase();
        if lower.starts_with("replan:") {
            return Judgement::Replan(l["replan:".len()..].trim().to_string());
        }
        if lower.starts_with("clarify:") {
            return Judgement::Clarify(l["clarify:".len()..].trim().to_string());
        }
        if lower.starts_with("satisfied") {
            return Judgement::Finish;
        }
    }
    Judgement::Finish
}

fn clip(s: &str, n: usize) -> String {
    if s.chars().count() <= n {
        s.to_string()
    } else {
        let mut t: String = s.chars().take(n).collect();
        t.push_str("\n[truncated]");
        t
    }
}

/// Step outputs, logs and artifacts as quoted to the model.
pub fn results_digest(plan: &Plan) -> String {
    let mut out = String::new();
    for (i, s) in plan.steps.iter().enumerate() {
        if s.status != StepStatus::Done && s.status != StepStatus::Failed {
            continue;
        }
        out.push_str(&format!("Step {i}: {}\n", s.description));
        if let Some(f) = &s.failure {
            out.push_str(&format!("Failed: {}\n", clip(f, DIGEST_CHARS)));
        }
        if let Some(r) = &s.result {
            if !r.logs.trim().is_empty() {
                out.push_str(&format!(
                    "Logs:\n{}\n",
                    clip(r.logs.trim_end(), DIGEST_CHARS)
                ));
            }
            if !r.output.is_empty() {
                out.push_str(&format!("Output:\n{}\n", clip(&r.output, DIGEST_CHARS)));
            }
            for a in &r.artifacts {
                out.push_str(&format!(
                    "Artifact: {}{}\n",
                    a.path,
                    a.caption
                        .as_ref()
                        .map(|c| format!(" ({c})"))
                        .unwrap_or_default()
                ));
            }
        }
        out.push('\n');
    }
    if out.is_empty() {
        "(no results)".into()
    } else {
        out.trim_end().to_string()
    }
}

/// Prior turns, oldest first.
pub fn history_digest(history: &[(String, String)]) -> String {
    if history.is_empty() {
        return "(none)".into();
    }
    history
        .iter()
        .map(|(q, a)| format!("User: {q}\nAssistant: {}", clip(a, DIGEST_CHARS)))
        .collect::<Vec<_>>()
        .join("\n\n")
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Why a new plan is needed.
#[derive(Debug, Clone)]
pub struct Replan<'a> {
    pub failed: &'a Plan,
    pub reason: &'a str,
}

pub struct Planner {
    model: Arc<dyn LanguageModel>,
    params: ChatParams,
    pub max_replans: u32,
}

impl Planner {
    pub fn new(model: Arc<dyn LanguageModel>) -> Self {
        Self {
            model,
            params: ChatParams::default(),
            max_replans: DEFAULT_MAX_REPLANS,
        }
    }

    pub fn with_params(mut self, params: ChatParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_max_replans(mut self, n: u32) -> Self {
        self.max_replans = n;
        self
    }

    fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest::new(messages).with_params(self.params.clone())
    }

    pub fn plan_prompt(
        &self,
        question: &str,
        schema: &str,
        history: &[(String, String)],
        replan: Option<&Replan<'_>>,
    ) -> String {
        let previous = match replan {
            None => String::new(),
            Some(r) => format!(
                "\n## Previous attempt\nThis plan did not answer the question:\n{}\nReason: {}\nResults so far:\n{}\nWrite a new plan for the remaining work.\n",
                r.failed.render(),
                r.reason,
                results_digest(r.failed)
            ),
        };
        fill(
            PLAN,
            &[
                ("demos", PLAN_DEMOS.trim_end()),
                ("schema", schema.trim_end()),
                ("history", &history_digest(history)),
                ("previous", &previous),
                ("question", question.trim()),
            ],
        )
    }

    /// One planning call, plus one re-ask when the reply cannot be read.
    pub fn plan(
        &self,
        question: &str,
        schema: &str,
        history: &[(String, String)],
        replan: Option<&Replan<'_>>,
    ) -> Result<PlanReply, PlannerError> {
        let prompt = self.plan_prompt(question, schema, history, replan);
        let reply = self
            .model
            .chat(&self.request(vec![ChatMessage::user(prompt.clone())]))?;
        match parse_plan(&reply) {
            Ok(p) => Ok(p),
            Err(PlannerError::PlanParseError(e)) => {
                log::debug!("plan unreadable ({e}), asking again");
                let again = self.model.chat(&self.request(vec![
                    ChatMessage::user(prompt),
                    ChatMessage::assistant(reply),
                    ChatMessage::user(fill(PLAN_REASK.trim_end(), &[("error", &e)])),
                ]))?;
                parse_plan(&again)
            }
            Err(other) => Err(other),
        }
    }

    /// Asks which chained steps to fuse. Plans without a chain are returned
    /// as they are and cost no call; an unusable reply keeps the plan.
    pub fn reflect_merge(&self, question: &str, plan: Plan) -> Plan {
        if chain_links(&plan).is_empty() {
            return plan;
        }
        let prompt = fill(
            REFLECT,
            &[("question", question.trim()), ("plan", &plan.render())],
        );
        let reply = match self
            .model
            .chat(&self.request(vec![ChatMessage::user(prompt)]))
        {
            Ok(r) => r,
            Err(e) => {
                log::warn!("reflection failed, keeping the plan: {e}");
                return plan;
            }
        };
        match serde_json::from_str::<Vec<usize>>(fenced_json(&reply)) {
            Ok(indices) => merge_chains(
                &plan,
                &indices
                    .into_iter()
                    .filter(|&i| i < plan.steps.len())
                    .collect(),
            ),
            Err(e) => {
                log::warn!("unreadable reflection reply, keeping the plan: {e}");
                plan
            }
        }
    }

    /// The CG query for step `i`, quoting the results of its dependencies.
    pub fn dispatch(
        &self,
        plan: &Plan,
        i: usize,
        schema: &str,
        query_id: String,
    ) -> Result<CgQuery, PlannerError> {
        let step = &plan.steps[i];
        if let Some(&d) = step
            .depends_on
            .iter()
            .find(|&&d| plan.steps[d].status != StepStatus::Done)
        {
            return Err(PlannerError::DependencyUnmet {
                step: i,
                dependency: d,
            });
        }
        let mut context = schema.trim_end().to_string();
        for &d in &step.depends_on {
            let dep = &plan.steps[d];
            context.push_str(&format!(
                "\n\nEarlier step {d} ({}) is done; its variables are still defined.",
                dep.description
            ));
            if let Some(code) = &dep.code {
                context.push_str(&format!("\nIts code:\n{code}"));
            }
            if let Some(r) = dep.result.as_ref().filter(|r| !r.output.is_empty()) {
                context.push_str(&format!("\nIts output:\n{}", clip(&r.output, DIGEST_CHARS)));
            }
        }
        Ok(
            CgQuery::new(query_id, step.description.clone(), context).with_constraints(
                "Save tables and figures the user should see to files in the workspace.",
            ),
        )
    }

    /// Deterministic while work remains; otherwise asks the model.
    pub fn judge(&self, question: &str, plan: &Plan) -> Result<Judgement, PlannerError> {
        if let Some(s) = plan.steps.iter().find(|s| s.status == StepStatus::Failed) {
            return Ok(Judgement::Replan(
                s.failure.clone().unwrap_or_else(|| "a step failed".into()),
            ));
        }
        if plan.next_pending().is_some() {
            return Ok(Judgement::Continue);
        }
        let prompt = fill(
            JUDGE,
            &[
                ("question", question.trim()),
                ("results", &results_digest(plan)),
            ],
        );
        let reply = self
            .model
            .chat(&self.request(vec![ChatMessage::user(prompt)]))?;
        Ok(parse_judgement(&reply))
    }

    pub fn summarize(
        &self,
        question: &str,
        plan: &Plan,
        artifacts: &[Artifact],
        history: &[(String, String)],
    ) -> Result<String, PlannerError> {
        let listed = if artifacts.is_empty() {
            "(none)".to_string()
        } else {
            artifacts
                .iter()
                .map(|a| {
                    format!(
                        "- {}{}",
                        a.path,
                        a.caption
                            .as_ref()
                            .map(|c| format!(": {c}"))
                            .unwrap_or_default()
                    )
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        let prompt = fill(
            SUMMARIZE,
            &[
                ("history", &history_digest(history)),
                ("question", question.trim()),
                ("results", &results_digest(plan)),
                ("artifacts", &listed),
            ],
        );
        Ok(self
            .model
            .chat(&self.request(vec![ChatMessage::user(prompt)]))?
            .trim()
            .to_string())
    }
}
