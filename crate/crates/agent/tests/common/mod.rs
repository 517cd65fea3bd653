#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use feedlens_agent::kernel::stub::StubKernel;
use feedlens_agent::kernel::InitSpec;
use feedlens_agent::{Agent, ArtifactRegistry, CodeGenerator, Planner, PluginRegistry, Session};
use feedlens_core::store::{Filter, Format};
use feedlens_core::synth::review_store;
use feedlens_core::LanguageModel;

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub spec: InitSpec,
    pub schema: String,
    pub registry: Arc<ArtifactRegistry>,
}

/// 200 synthetic reviews exported as the session snapshot.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let store = review_store(200, 7).unwrap();
    let snapshot = dir.path().join("snapshot.csv");
    store
        .export_to_path(&Filter::All, Format::Csv, &snapshot)
        .unwrap();
    let spec = InitSpec::new(snapshot, dir.path().join("workspace"))
        .with_plugins(PluginRegistry::with_builtins().manifest());
    Fixture {
        schema: store.schema_summary().render(),
        spec,
        registry: Arc::new(ArtifactRegistry::new(b"test".to_vec())),
        dir,
    }
}

impl Fixture {
    pub fn session(&self, id: &str) -> Session {
        Session::new(
            id,
            self.spec.clone(),
            self.schema.clone(),
            Box::new(StubKernel::new()),
            self.registry.clone(),
        )
    }

    pub fn workspace(&self) -> &Path {
        &self.spec.workspace
    }
}

pub fn agent(model: Arc<dyn LanguageModel>) -> Agent {
    Agent::new(
        Planner::new(model.clone()),
        CodeGenerator::new(model, PluginRegistry::with_builtins()),
    )
}

pub fn plan_json(steps: &[&str]) -> String {
    let items: Vec<String> = steps
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let deps = if i == 0 {
                String::new()
            } else {
                (i - 1).to_string()
            };
            format!("{{\"description\": \"{d}\", \"depends_on\": [{deps}], \"mergeable\": false}}")
        })
        .collect();
    format!("Plan:\n```json\n[{}]\n```", items.join(", "))
}

pub fn code(src: &str) -> String {
    format!("Thought: use the helpers.\n```python\n{src}\n```")
}
