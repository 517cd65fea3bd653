//! The recorded demonstration sessions and the scripted gateway they were
//! recorded against. Replays need only the cassettes and this module's
//! deterministic snapshot.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use feedlens_core::llm::mock::ScriptedModel;
use feedlens_core::store::{Filter, Format, StoreError};
use feedlens_core::synth::review_store;
use feedlens_core::LanguageModel;

use crate::codegen::{CodeGenerator, PluginRegistry};
use crate::kernel::stub::StubKernel;
use crate::kernel::InitSpec;
use crate::planner::Planner;
use crate::questions::QuestionKind;
use crate::session::{Agent, AgentResponse, ArtifactRegistry, Session};

pub const DEMO_RECORDS: usize = 200;
pub const DEMO_SEED: u64 = 7;
/// Secret used for artifact URLs in recorded sessions.
pub const DEMO_SECRET: &[u8] = b"feedlens-demo";

#[derive(Debug, Clone, Copy)]
pub struct ReplayCase {
    pub name: &'static str,
    pub session_id: &'static str,
    pub kind: QuestionKind,
    pub question: &'static str,
}

pub const REPLAY_CASES: [ReplayCase; 3] = [
    ReplayCase {
        name: "analysis",
        session_id: "demo-analysis",
        kind: QuestionKind::Analysis,
        question: "Which topic appears most frequently?",
    },
    ReplayCase {
        name: "figure",
        session_id: "demo-figure",
        kind: QuestionKind::Figure,
        question: "Draw an issue river of the top 5 topics.",
    },
    ReplayCase {
        name: "suggestion",
        session_id: "demo-suggestion",
        kind: QuestionKind::Suggestion,
        question: "What do users who complain about crashes suggest we improve?",
    },
];

/// Exports the synthetic review corpus to `dir/snapshot.csv` and returns the
/// kernel spec (workspace `dir/workspace`) and the schema text.
pub fn demo_snapshot(dir: &Path) -> Result<(InitSpec, String), StoreError> {
    let store = review_store(DEMO_RECORDS, DEMO_SEED)?;
    let snapshot = dir.join("snapshot.csv");
    store.export_to_path(&Filter::All, Format::Csv, &snapshot)?;
    let spec = InitSpec::new(snapshot, dir.join("workspace"))
        .with_plugins(PluginRegistry::with_builtins().manifest());
    Ok((spec, store.schema_summary().render()))
}

/// Where the recorded cassettes ship in the source tree.
pub fn bundled_cassettes() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/cassettes")
}

/// Asks a case's question in a fresh session over the demo snapshot in
/// `dir`, with the stub kernel. Returns the response and the session's
/// workspace.
pub fn run_case(
    model: Arc<dyn LanguageModel>,
    case: &ReplayCase,
    dir: &Path,
) -> Result<(AgentResponse, PathBuf), Box<dyn std::error::Error + Send + Sync>> {
    let agent = Agent::new(
        Planner::new(model.clone()),
        CodeGenerator::new(model, PluginRegistry::with_builtins()),
    );
    let (spec, schema) = demo_snapshot(dir)?;
    let workspace = spec.workspace.clone();
    let registry = Arc::new(ArtifactRegistry::new(DEMO_SECRET));
    let mut session = Session::new(
        case.session_id,
        spec,
        schema,
        Box::new(StubKernel::new()),
        registry,
    );
    let response = agent.ask(&mut session, case.question)?;
    session.close();
    Ok((response, workspace))
}

/// The byte form expected files are compared in.
pub fn render_response(response: &AgentResponse) -> String {
    serde_json::to_string_pretty(response).expect("responses serialize") + "\n"
}

fn fenced(lang: &str, body: &str) -> String {
    format!("```{lang}\n{body}\n```")
}

/// The development gateway the cassettes were recorded against. Rules are
/// keyed on phrases that only one prompt of one session contains.
pub fn development_gateway() -> ScriptedModel {
    ScriptedModel::new(16)
        // judge and summary prompts quote step descriptions, so they go first
        .rule("Decide whether", "satisfied")
        .rule(
            "Which topic appears most frequently?\n\n## Results",
            "crash is the most frequent topic with 52 of 200 records, ahead of performance (41) and login (37). The counts for all seven topics are in topic_counts.csv.",
        )
        .rule(
            "Draw an issue river of the top 5 topics.\n\n## Results",
            "issue_river.svg shows daily mentions of the five most frequent topics over the 60 days from April to May.",
        )
        .rule(
            "suggest we improve?\n\n## Results",
            "52 records mention crashes. Few of them raise another topic: battery, notifications, performance and ui \
appear twice each and login once (crash_cooccurring_topics.csv). Sample texts describe crashes when opening the camera \
and switching tabs.\nSuggestions:\n1. Reproduce and fix the camera and tab-switch crashes first.\n\
2. Tell users when a crash fix ships; one reply already thanks the team for one.\n\
3. Watch battery and performance reports alongside crashes, since they appear together.",
        )
        .rule("Review this analysis plan", fenced("json", "[0, 1]"))
        // code generation, by task
        .rule(
            "## Task\nCount records per topic",
            format!(
                "Thought: topic_counts counts each listed topic; save the table and report the leader.\n{}",
                fenced(
                    "python",
                    "counts = topic_counts(df)\nsave_table(counts, \"topic_counts.csv\", caption=\"Records per topic\")\nprint(\"most frequent:\", counts[\"topic\"][0])\ncounts"
                )
            ),
        )
        .rule(
            "## Task\nDraw an issue river",
            format!(
                "Thought: the issue_river plugin draws the figure.\n{}",
                fenced("python", "issue_river(df, topic_column=\"topics\", time_column=\"timestamp\", top_n=5, bucket=\"day\")")
            ),
        )
        .rule(
            "## Task\nSelect records that list the crash topic",
            format!(
                "Thought: filter on the topics column, then count the remaining topics and keep a few texts.\n{}",
                fenced(
                    "python",
                    "crash = filter_rows(df, \"topics\", \"crash\")\nprint(\"crash records:\", len(crash))\nco = topic_counts(crash)\nsample_texts(crash, n=3)"
                )
            ),
        )
        .rule(
            "## Task\nSave the co-occurring topic counts",
            format!(
                "Thought: the counts exist from the earlier cell.\n{}",
                fenced("python", "save_table(co, \"crash_cooccurring_topics.csv\", caption=\"Topics mentioned with crash\")\nco")
            ),
        )
        // planning, by question
        .rule(
            "## Question\nWhich topic appears most frequently?",
            fenced(
                "json",
                r#"[{"description": "Count records per topic, save the counts as a table and report the most frequent topic", "depends_on": [], "mergeable": false}]"#,
            ),
        )
        .rule(
            "## Question\nDraw an issue river of the top 5 topics.",
            fenced(
                "json",
                r#"[{"description": "Draw an issue river of the 5 most frequent topics per day with the issue_river plugin", "depends_on": [], "mergeable": false}]"#,
            ),
        )
        .rule(
            "## Question\nWhat do users who complain about crashes suggest we improve?",
            fenced(
                "json",
                r#"[{"description": "Select records that list the crash topic", "depends_on": [], "mergeable": true},
 {"description": "Collect sample texts of those records and count their other topics", "depends_on": [0], "mergeable": true},
 {"description": "Save the co-occurring topic counts as a table", "depends_on": [1], "mergeable": false}]"#,
            ),
        )
}
