//! Code generation: CG queries become kernel cells, which are verified,
//! executed and repaired from their failure text.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, LazyLock};

use feedlens_core::llm::cassette::CassetteRequest;
use feedlens_core::llm::LlmError;
use feedlens_core::{ChatMessage, ChatParams, ChatRequest, LanguageModel};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{
    ArtifactKind, ExecutionResult, Executor, KernelError, PluginManifestEntry, DATA_HANDLE,
};

/// Generation attempts per query. A missing code block earns one extra
/// re-ask on top.
pub const MAX_ATTEMPTS: u32 = 3;

const INSTRUCTIONS: &str = include_str!("../prompts/codegen_instructions.txt");
const DEMOS: &str = include_str!("../prompts/codegen_demos.txt");
const GENERATE: &str = include_str!("../prompts/codegen_generate.txt");
const REPAIR: &str = include_str!("../prompts/codegen_repair.txt");
const REASK: &str = include_str!("../prompts/codegen_reask.txt");

#[derive(Debug, Error)]
pub enum CodegenError {
    #[error("plugin {0} is already registered")]
    DuplicatePlugin(String),
    #[error("plugin manifest: {0}")]
    Manifest(String),
    #[error("the model returned no code block")]
    NoCodeBlock,
    #[error("no compliant code after {attempts} attempts; last failure: {last_failure}")]
    AttemptsExhausted { attempts: u32, last_failure: String },
    #[error("gateway: {0}")]
    Gateway(#[from] LlmError),
    #[error("kernel: {0}")]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginParam {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
}

impl PluginParam {
    pub fn new(name: &str, ty: &str, default: Option<&str>) -> Self {
        Self {
            name: name.into(),
            ty: ty.into(),
            default: default.map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginDescriptor {
    pub name: String,
    /// Kernel-side module providing the implementation.
    pub module: String,
    pub signature: Vec<PluginParam>,
    pub doc: String,
    /// Example invocation.
    pub demo: String,
    /// Kind of artifact the demo produces.
    pub produces: ArtifactKind,
}

impl PluginDescriptor {
    pub fn render_signature(&self) -> String {
        let params: Vec<String> = self
            .signature
            .iter()
            .map(|p| match &p.default {
                Some(d) => format!("{}: {} = {d}", p.name, p.ty),
                None => format!("{}: {}", p.name, p.ty),
            })
            .collect();
        format!("{}({})", self.name, params.join(", "))
    }

    pub fn issue_river() -> Self {
        Self {
            name: "issue_river".into(),
            module: "feedlens.plugins.issue_river".into(),
            signature: vec![
                PluginParam::new("table", "DataFrame", None),
                PluginParam::new("topic_column", "str", Some("\"topics\"")),
                PluginParam::new("time_column", "str", Some("\"timestamp\"")),
                PluginParam::new("top_n", "int", Some("7")),
                PluginParam::new("bucket", "str", Some("\"day\"")),
                PluginParam::new("path", "str", Some("\"issue_river.svg\"")),
            ],
            doc: "Draws an issue river: stacked areas of how often each of the top_n most frequent topics \
                  appears per time bucket (hour, day, month or year). Writes an SVG image to path."
                .into(),
            demo: "issue_river(df, top_n=5, bucket=\"day\")".into(),
            produces: ArtifactKind::Image,
        }
    }

    pub fn word_cloud() -> Self {
        Self {
            name: "word_cloud".into(),
            module: "feedlens.plugins.word_cloud".into(),
            signature: vec![
                PluginParam::new("table", "DataFrame", None),
                PluginParam::new("text_column", "str", Some("\"text\"")),
                PluginParam::new("top_n", "int", Some("40")),
                PluginParam::new("path", "str", Some("\"word_cloud.svg\"")),
            ],
            doc: "Draws a word cloud of the most frequent content words of text_column, sized by frequency. \
                  Writes an SVG image to path."
                .into(),
            demo: "word_cloud(filter_rows(df, \"topics\", \"login\"), text_column=\"text\")".into(),
            produces: ArtifactKind::Image,
        }
    }
}

/// Plugin descriptors by name. Implementations live in the kernel; the
/// registry only knows how to describe and locate them.
#[derive(Debug, Clone, Default)]
pub struct PluginRegistry {
    plugins: BTreeMap<String, PluginDescriptor>,
}

impl PluginRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register(PluginDescriptor::issue_river())
            .expect("fresh registry");
        r.register(PluginDescriptor::word_cloud())
            .expect("fresh registry");
        r
    }

    /// Reads a JSON list of descriptors.
    pub fn from_manifest(path: &Path) -> Result<Self, CodegenError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CodegenError::Manifest(format!("{}: {e}", path.display())))?;
        let descriptors: Vec<PluginDescriptor> = serde_json::from_str(&text)
            .map_err(|e| CodegenError::Manifest(format!("{}: {e}", path.display())))?;
        let mut r = Self::new();
        for d in descriptors {
            r.register(d)?;
        }
        Ok(r)
    }

    pub fn register(&mut self, descriptor: PluginDescriptor) -> Result<(), CodegenError> {
        if self.plugins.contains_key(&descriptor.name) {
            return Err(CodegenError::DuplicatePlugin(descriptor.name));
        }
        self.plugins.insert(descriptor.name.clone(), descriptor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&PluginDescriptor> {
        self.plugins.get(name)
    }

    pub fn len(&self) -> usize {
        self.plugins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plugins.is_empty()
    }

    /// What the kernel must import at init.
    pub fn manifest(&self) -> Vec<PluginManifestEntry> {
        self.plugins
            .values()
            .map(|d| PluginManifestEntry {
                name: d.name.clone(),
                module: d.module.clone(),
            })
            .collect()
    }

    pub fn catalog_prompt(&self) -> String {
        if self.plugins.is_empty() {
            return "No plugins available.".into();
        }
        let mut out = String::from("Plugins are already imported and are called like functions:\n");
        for d in self.plugins.values() {
            out.push_str(&format!(
                "- {} -> {} artifact\n  {}\n  Example: {}\n",
                d.render_signature(),
                kind_name(d.produces),
                d.doc,
                d.demo
            ));
        }
        out.trim_end().to_string()
    }
}

fn kind_name(k: ArtifactKind) -> &'static str {
    match k {
        ArtifactKind::Table => "table",
        ArtifactKind::Image => "image",
        ArtifactKind::File => "file",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgQuery {
    pub id: String,
    pub task_description: String,
    /// Data schema plus a digest of earlier step results.
    pub context: String,
    pub data_handle: String,
    /// Expected outputs, e.g. "save the chart as an image".
    pub constraints: Option<String>,
}

impl CgQuery {
    pub fn new(id: impl Into<String>, task: impl Into<String>, context: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            task_description: task.into(),
            context: context.into(),
            data_handle: DATA_HANDLE.into(),
            constraints: None,
        }
    }

    pub fn with_constraints(mut self, constraints: impl Into<String>) -> Self {
        self.constraints = Some(constraints.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub query_id: String,
    /// Fingerprint of the gateway request that produced the source; the key
    /// of the exchange in a cassette.
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeCell {
    pub source: String,
    pub attempt: u32,
    pub provenance: Provenance,
}

impl CodeCell {
    pub fn cell_id(&self) -> String {
        format!("{}-a{}", self.provenance.query_id, self.attempt)
    }
}

/// Extracts fenced code. Several fences are joined in order.
pub fn extract_code(completion: &str) -> Option<String> {
    static FENCE: LazyLock<Regex> = LazyLock::new(|| {
        Regex::new(r"(?s)```[ \t]*(?:python|py|python3)?[ \t]*\r?\n(.*?)```").expect("valid regex")
    });
    let blocks: Vec<&str> = FENCE
        .captures_iter(completion)
        .filter_map(|c| c.get(1))
        .map(|m| m.as_str().trim_end())
        .filter(|b| !b.trim().is_empty())
        .collect();
    if blocks.is_empty() {
        None
    } else {
        Some(blocks.join("\n"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail")]
pub enum Violation {
    NetworkAccess(String),
    ProcessSpawn(String),
    FilesystemEscape(String),
    DynamicExecution(String),
    SyntaxError(String),
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::NetworkAccess(d) => write!(f, "NetworkAccess: {d}"),
            Violation::ProcessSpawn(d) => write!(f, "ProcessSpawn: {d}"),
            Violation::FilesystemEscape(d) => write!(f, "FilesystemEscape: {d}"),
            Violation::DynamicExecution(d) => write!(f, "DynamicExecution: {d}"),
            Violation::SyntaxError(d) => write!(f, "SyntaxError: {d}"),
        }
    }
}

struct Rule {
    re: Regex,
    make: fn(String) -> Violation,
}

static DENYLIST: LazyLock<Vec<Rule>> = LazyLock::new(|| {
    let rule = |p: &str, make: fn(String) -> Violation| Rule {
        re: Regex::new(p).expect("valid denylist pattern"),
        make,
    };
    vec![
        rule(
            r"(?m)^\s*(?:import|from)\s+(socket|ssl|requests|urllib\d?|http|httpx|aiohttp|ftplib|smtplib|telnetlib|poplib|imaplib|xmlrpc|websockets?|paramiko|asyncio)\b",
            Violation::NetworkAccess,
        ),
        rule(
            r"\b(socket\.(?:socket|create_connection)|urlopen)\s*\(",
            Violation::NetworkAccess,
        ),
        rule(
            r"(?m)^\s*(?:import|from)\s+(subprocess|multiprocessing|ctypes|pty|cffi|signal)\b",
            Violation::ProcessSpawn,
        ),
        rule(
            r"\bos\.(system|popen|fork\w*|exec\w*|spawn\w*|kill|startfile)\b",
            Violation::ProcessSpawn,
        ),
        rule(
            r"(?m)^\s*from\s+os\s+import\s+.*\b(system|popen|fork|exec\w*|spawn\w*|kill)\b",
            Violation::ProcessSpawn,
        ),
        rule(
            r#"(?:open|save_table|save_text|to_csv|savefig|remove|makedirs|listdir)\s*\([^)]*?['"]((?:/|~|\.\./)[^'"]*)['"]"#,
            Violation::FilesystemEscape,
        ),
        rule(
            r#"['"]([^'"]*/\.\./[^'"]*)['"]"#,
            Violation::FilesystemEscape,
        ),
        rule(
            r"\b(shutil\.\w+|os\.chdir|os\.rename|os\.rmdir)\b",
            Violation::FilesystemEscape,
        ),
        rule(
            r"\b(eval|exec|compile|__import__)\s*\(",
            Violation::DynamicExecution,
        ),
    ]
});

/// Static denylist scan. Comments are ignored.
pub fn scan_denylist(source: &str) -> Vec<Violation> {
    let cleaned: String = source
        .lines()
        .map(|l| match l.find('#') {
            // a `#` inside a string keeps the line whole
            Some(i) if !l[..i].contains(['\'', '"']) => &l[..i],
            _ => l,
        })
        .collect::<Vec<_>>()
        .join("\n");
    let mut out = Vec::new();
    for rule in DENYLIST.iter() {
        for c in rule.re.captures_iter(&cleaned) {
            let hit = c
                .get(1)
                .or_else(|| c.get(0))
                .map(|m| m.as_str().to_string())
                .unwrap_or_default();
            let v = (rule.make)(format!("'{hit}' is not allowed"));
            if !out.contains(&v) {
                out.push(v);
            }
        }
    }
    out
}

/// Denylist scan plus a kernel dry-parse. An empty list means the cell may
/// run.
pub fn verify(
    cell: &CodeCell,
    kernel: &mut dyn Executor,
    session_id: &str,
) -> Result<Vec<Violation>, KernelError> {
    let mut violations = scan_denylist(&cell.source);
    let parsed = kernel.dry_parse(
        session_id,
        &format!("{}-parse", cell.cell_id()),
        &cell.source,
    )?;
    if let Some(ex) = parsed.exception {
        let msg = ex.lines().last().unwrap_or_default();
        violations.push(Violation::SyntaxError(
            msg.strip_prefix("SyntaxError: ").unwrap_or(msg).to_string(),
        ));
    }
    Ok(violations)
}

fn violations_text(v: &[Violation]) -> String {
    let mut s = String::from("verification failed:");
    for x in v {
        s.push_str(&format!("\n- {x}"));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub cell: CodeCell,
    /// Verification or execution failure; `None` for the attempt that worked.
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CgSuccess {
    pub cell: CodeCell,
    pub result: ExecutionResult,
    pub attempts: Vec<AttemptRecord>,
}

#[derive(Debug)]
pub struct CgFailure {
    pub error: CodegenError,
    pub attempts: Vec<AttemptRecord>,
}

impl std::fmt::Display for CgFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

pub struct CodeGenerator {
    model: Arc<dyn LanguageModel>,
    params: ChatParams,
    registry: PluginRegistry,
}

impl CodeGenerator {
    pub fn new(model: Arc<dyn LanguageModel>, registry: PluginRegistry) -> Self {
        Self {
            model,
            params: ChatParams::default(),
            registry,
        }
    }

    pub fn with_params(mut self, params: ChatParams) -> Self {
        self.params = params;
        self
    }

    pub fn registry(&self) -> &PluginRegistry {
        &self.registry
    }

    fn common_vars(&self, q: &CgQuery) -> (String, String, String) {
        let instructions = fill(INSTRUCTIONS, &[("handle", &q.data_handle)]);
        let constraints = q
            .constraints
            .as_ref()
            .map(|c| format!("Constraints: {c}\n"))
            .unwrap_or_default();
        (instructions, self.registry.catalog_prompt(), constraints)
    }

    pub fn generate_prompt(&self, q: &CgQuery) -> String {
        let (instructions, catalog, constraints) = self.common_vars(q);
        fill(
            GENERATE,
            &[
                ("instructions", instructions.trim_end()),
                ("demos", DEMOS.trim_end()),
                ("catalog", &catalog),
                ("context", q.context.trim_end()),
                ("task", q.task_description.trim()),
                ("constraints", &constraints),
            ],
        )
    }

    pub fn repair_prompt(&self, q: &CgQuery, prior: &CodeCell, failure: &str) -> String {
        let (instructions, catalog, constraints) = self.common_vars(q);
        let attempt = prior.attempt.to_string();
        fill(
            REPAIR,
            &[
                ("instructions", instructions.trim_end()),
                ("catalog", &catalog),
                ("context", q.context.trim_end()),
                ("task", q.task_description.trim()),
                ("constraints", &constraints),
                ("attempt", &attempt),
                ("source", &prior.source),
                ("failure", failure),
            ],
        )
    }

    /// One generation call, plus a re-ask when the reply has no code block
    /// and `reask_left` still allows one.
    fn complete_cell(
        &self,
        q: &CgQuery,
        prompt: String,
        attempt: u32,
        reask_left: &mut bool,
    ) -> Result<CodeCell, CodegenError> {
        let request = ChatRequest::user(prompt.clone()).with_params(self.params.clone());
        let reply = self.model.chat(&request)?;
        let (source, request) = match extract_code(&reply) {
            Some(s) => (s, request),
            None if !*reask_left => return Err(CodegenError::NoCodeBlock),
            None => {
                *reask_left = false;
                log::debug!("query {}: no code block, asking again", q.id);
                let again = ChatRequest::new(vec![
                    ChatMessage::user(prompt),
                    ChatMessage::assistant(reply),
                    ChatMessage::user(REASK.trim_end()),
                ])
                .with_params(self.params.clone());
                let reply = self.model.chat(&again)?;
                (
                    extract_code(&reply).ok_or(CodegenError::NoCodeBlock)?,
                    again,
                )
            }
        };
        let fingerprint = CassetteRequest::Chat(request).fingerprint();
        Ok(CodeCell {
            source,
            attempt,
            provenance: Provenance {
                query_id: q.id.clone(),
                fingerprint,
            },
        })
    }

    pub fn generate(&self, q: &CgQuery) -> Result<CodeCell, CodegenError> {
        self.complete_cell(q, self.generate_prompt(q), 1, &mut true)
    }

    pub fn repair(
        &self,
        q: &CgQuery,
        prior: &CodeCell,
        failure: &str,
    ) -> Result<CodeCell, CodegenError> {
        self.repair_with(q, prior, failure, &mut true)
    }

    fn repair_with(
        &self,
        q: &CgQuery,
        prior: &CodeCell,
        failure: &str,
        reask_left: &mut bool,
    ) -> Result<CodeCell, CodegenError> {
        if prior.attempt >= MAX_ATTEMPTS {
            return Err(CodegenError::AttemptsExhausted {
                attempts: prior.attempt,
                last_failure: failure.into(),
            });
        }
        self.complete_cell(
            q,
            self.repair_prompt(q, prior, failure),
            prior.attempt + 1,
            reask_left,
        )
    }

    /// Generates, verifies and executes a cell, repairing from each failure
    /// until a cell succeeds or the attempts run out. A query costs at most
    /// [`MAX_ATTEMPTS`] generation calls plus one re-ask.
    pub fn run(
        &self,
        q: &CgQuery,
        kernel: &mut dyn Executor,
        session_id: &str,
    ) -> Result<CgSuccess, CgFailure> {
        let mut attempts: Vec<AttemptRecord> = Vec::new();
        let mut reask_left = true;
        let fail =
            |error: CodegenError, attempts: Vec<AttemptRecord>| Err(CgFailure { error, attempts });
        let mut cell = match self.complete_cell(q, self.generate_prompt(q), 1, &mut reask_left) {
            Ok(c) => c,
            Err(e) => return fail(e, attempts),
        };
        loop {
            let failure = match verify(&cell, kernel, session_id) {
                Err(e) => return fail(e.into(), attempts),
                Ok(v) if !v.is_empty() => violations_text(&v),
                Ok(_) => match kernel.execute(session_id, &cell.cell_id(), &cell.source) {
                    Err(e) => return fail(e.into(), attempts),
                    Ok(result) if result.is_ok() => {
                        attempts.push(AttemptRecord {
                            cell: cell.clone(),
                            failure: None,
                        });
                        return Ok(CgSuccess {
                            cell,
                            result,
                            attempts,
                        });
                    }
                    Ok(result) => result.failure_text().unwrap_or_default(),
                },
            };
            log::debug!("query {} attempt {} failed: {failure}", q.id, cell.attempt);
            attempts.push(AttemptRecord {
                cell: cell.clone(),
                failure: Some(failure.clone()),
            });
            cell = match self.repair_with(q, &cell, &failure, &mut reask_left) {
                Ok(c) => c,
                Err(e) => return fail(e, attempts),
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fences_are_joined_in_order() {
        let text = "Thought: x\n```python\nimport math\n```\nthen\n```\nmath.sqrt(4)\n```";
        assert_eq!(extract_code(text).unwrap(), "import math\nmath.sqrt(4)");
        assert_eq!(extract_code("no code here"), None);
        assert_eq!(extract_code("```python\n\n```"), None);
    }

    #[test]
    fn denylist_catches_each_family() {
        let kinds = |s: &str| {
            scan_denylist(s)
                .into_iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
        };
        assert!(kinds("import socket")[0].starts_with("NetworkAccess"));
        assert!(kinds("from urllib.request import urlopen")[0].starts_with("NetworkAccess"));
        assert!(kinds("import os\nos.system('ls')")[0].starts_with("ProcessSpawn"));
        assert!(kinds("save_text('x', '/etc/cron.d/x')")[0].starts_with("FilesystemEscape"));
        assert!(kinds("open('out/../../x', 'w')")[0].starts_with("FilesystemEscape"));
        assert!(kinds("eval('1')")[0].starts_with("DynamicExecution"));
        assert!(kinds("t = topic_counts(df)\nsave_table(t, 'out/t.csv')  # not /etc").is_empty());
        assert!(kinds("# import socket\nx = 1").is_empty());
    }

    #[test]
    fn catalog_lists_signatures() {
        let r = PluginRegistry::with_builtins();
        let c = r.catalog_prompt();
        assert!(c.contains("issue_river(table: DataFrame, topic_column: str = \"topics\", time_column: str = \"timestamp\", top_n: int = 7"));
        assert!(c.contains("word_cloud("));
        assert_eq!(
            PluginRegistry::new().catalog_prompt(),
            "No plugins available."
        );
        let mut r = r;
        assert!(
            matches!(r.register(PluginDescriptor::word_cloud()), Err(CodegenError::DuplicatePlugin(n)) if n == "word_cloud")
        );
    }
}
