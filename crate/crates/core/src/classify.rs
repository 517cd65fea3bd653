//! Retrieval-augmented few-shot classification.
//!
//! Labeled feedback is embedded into a demonstration pool. To classify a
//! record, its `k` nearest labeled neighbours are retrieved and rendered as
//! demonstrations between the dimension's instruction and the target; the
//! completion is parsed back into one label from the closed label set.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{IndexBuilder, IndexError, IndexSnapshot, Payload};
use crate::llm::{ChatParams, ChatRequest, LanguageModel, LlmError};
use crate::store::OTHERS_TOPIC;
use crate::text::{normalize_phrase, normalize_text, whole_phrase_matches};

/// Shots used for the simpler app-store style corpora.
pub const SHOTS_SIMPLE: usize = 10;
/// Shots used for forum and search-feedback style corpora.
pub const SHOTS_RICH: usize = 30;
pub const DEFAULT_TEST_FRACTION: f64 = 0.3;
pub const DEFAULT_FOLD_TOP_N: usize = 10;
const EMBED_BATCH: usize = 128;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("no labeled demonstrations available for k = {0}")]
    EmptyPool(usize),
    #[error("could not parse a label from completion {0:?}")]
    UnparseableLabel(String),
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Serializable form of a dimension, as found in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionSpec {
    pub name: String,
    pub labels: Vec<String>,
    /// Optional template. `{labels}`, `{demos}` and `{target}` are
    /// substituted; when the slots are absent demos and target are appended.
    #[serde(default)]
    pub instruction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dimension {
    name: String,
    labels: Vec<String>,
    template: String,
}

impl Dimension {
    pub fn new(
        name: &str,
        labels: &[String],
        template: Option<&str>,
    ) -> Result<Self, ClassifyError> {
        if name.trim().is_empty() {
            return Err(ClassifyError::InvalidDimension("empty name".into()));
        }
        let mut seen = BTreeSet::new();
        let mut normalized = Vec::new();
        for l in labels {
            let n = normalize_phrase(l);
            if n.is_empty() {
                return Err(ClassifyError::InvalidDimension(format!(
                    "{name}: empty label"
                )));
            }
            if !seen.insert(n.clone()) {
                return Err(ClassifyError::InvalidDimension(format!(
                    "{name}: duplicate label {n:?}"
                )));
            }
            normalized.push(n);
        }
        if normalized.is_empty() {
            return Err(ClassifyError::InvalidDimension(format!(
                "{name}: empty label set"
            )));
        }
        let template = match template {
            Some(t) => t.to_string(),
            None => default_instruction(name),
        };
        match (template.find("{demos}"), template.find("{target}")) {
            (Some(d), Some(t)) if d > t => {
                return Err(ClassifyError::InvalidDimension(format!(
                    "{name}: {{demos}} must precede {{target}}"
                )))
            }
            (Some(_), None) | (None, Some(_)) => {
                return Err(ClassifyError::InvalidDimension(format!(
                    "{name}: template needs both {{demos}} and {{target}} or neither"
                )))
            }
            _ => {}
        }
        Ok(Self {
            name: name.to_string(),
            labels: normalized,
            template,
        })
    }

    pub fn from_spec(spec: &DimensionSpec) -> Result<Self, ClassifyError> {
        Self::new(&spec.name, &spec.labels, spec.instruction.as_deref())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.iter().any(|l| *l == normalize_phrase(label))
    }

    /// Same instruction over a different label set.
    pub fn with_labels(&self, labels: &[String]) -> Result<Self, ClassifyError> {
        Self::new(&self.name, labels, Some(&self.template))
    }
}

fn default_instruction(name: &str) -> String {
    format!(
        "You are analysing verbatim user feedback about software products. Each piece of feedback \
         is written by an end user and may be short, informal or multilingual.\n\
         Guidelines: read the feedback carefully and judge it only along the \"{name}\" dimension. \
         Use the labeled examples as a reference for how similar feedback was categorised.\n\
         Objective: answer with exactly one label from this list: {{labels}}."
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub id: String,
    pub text: String,
    pub label: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptBundle {
    pub instruction: String,
    /// Ascending similarity: the most similar demonstration sits next to the
    /// target.
    pub demonstrations: Vec<Demonstration>,
    pub target: String,
    pub rendered: String,
}

fn render_demo(text: &str, label: &str) -> String {
    format!("Feedback: {}\nLabel: {label}", one_line(text))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn collapse_blank_lines(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut newlines = 0;
    for c in s.chars() {
        if c == '\n' {
            newlines += 1;
            if newlines <= 2 {
                out.push(c);
            }
        } else {
            newlines = 0;
            out.push(c);
        }
    }
    out.trim().to_string()
}

/// Renders instruction, demonstrations and target in that order.
pub fn render_prompt(
    dimension: &Dimension,
    demos: &[Demonstration],
    target_text: &str,
) -> PromptBundle {
    let labels = dimension.labels.join(", ");
    let template = dimension.template.replace("{labels}", &labels);
    let demo_block = if demos.is_empty() {
        String::new()
    } else {
        let body: Vec<String> = demos
            .iter()
            .map(|d| render_demo(&d.text, &d.label))
            .collect();
        format!("Examples:\n\n{}", body.join("\n\n"))
    };
    let target_block = format!(
        "Feedback to classify:\nFeedback: {}\nLabel:",
        one_line(target_text)
    );
    let (instruction, rendered) = match template.find("{demos}") {
        Some(at) => {
            let instruction = template[..at].trim().to_string();
            let filled = template
                .replace("{demos}", &demo_block)
                .replace("{target}", &target_block);
            (instruction, collapse_blank_lines(&filled))
        }
        None => {
            let instruction = template.trim().to_string();
            let parts: Vec<&str> = [
                instruction.as_str(),
                demo_block.as_str(),
                target_block.as_str(),
            ]
            .into_iter()
            .filter(|p| !p.is_empty())
            .collect();
            (instruction.clone(), parts.join("\n\n"))
        }
    };
    PromptBundle {
        instruction,
        demonstrations: demos.to_vec(),
        target: target_text.to_string(),
        rendered,
    }
}

/// Returns the label whose normalized form occurs earliest in the
/// normalized completion as a whole phrase; at equal positions the longer
/// label wins.
pub fn parse_label(completion: &str, labels: &[String]) -> Result<String, ClassifyError> {
    let hay = normalize_text(completion);
    let mut best: Option<(usize, usize, &String)> = None;
    for label in labels {
        let needle = normalize_phrase(label);
        if let Some(&pos) = whole_phrase_matches(&hay, &needle).first() {
            let better = match best {
                None => true,
                Some((bp, blen, _)) => pos < bp || (pos == bp && needle.len() > blen),
            };
            if better {
                best = Some((pos, needle.len(), label));
            }
        }
    }
    best.map(|(_, _, l)| normalize_phrase(l))
        .ok_or_else(|| ClassifyError::UnparseableLabel(completion.to_string()))
}

/// A labeled item used for demonstrations or evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub text: String,
    pub label: String,
}

/// Embedded labeled feedback, searchable by cosine similarity.
#[derive(Debug, Clone)]
pub struct DemoPool {
    snapshot: IndexSnapshot,
}

impl DemoPool {
    pub fn empty() -> Self {
        Self {
            snapshot: IndexSnapshot::empty(),
        }
    }

    pub fn build<M: LanguageModel + ?Sized>(
        model: &M,
        examples: &[LabeledExample],
    ) -> Result<Self, ClassifyError> {
        let mut builder = IndexBuilder::new();
        for chunk in examples.chunks(EMBED_BATCH) {
            let texts: Vec<String> = chunk.iter().map(|e| e.text.clone()).collect();
            let vectors = model.embed(&texts)?;
            for (ex, v) in chunk.iter().zip(vectors) {
                let payload = Payload {
                    text: ex.text.clone(),
                    label: Some(normalize_phrase(&ex.label)),
                    topics: vec![],
                };
                builder.add(ex.id.clone(), v, payload)?;
            }
        }
        Ok(Self {
            snapshot: builder.finalize(),
        })
    }

    pub fn from_snapshot(snapshot: IndexSnapshot) -> Self {
        Self { snapshot }
    }

    pub fn snapshot(&self) -> &IndexSnapshot {
        &self.snapshot
    }

    pub fn len(&self) -> usize {
        self.snapshot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshot.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationResult {
    pub id: String,
    pub label: String,
    pub raw_completion: String,
    pub demos_used: Vec<Demonstration>,
    /// Chat calls spent: 1, or 2 when the re-ask was needed.
    pub calls: usize,
}

pub struct Classifier<'a, M: ?Sized> {
    model: &'a M,
    pool: &'a DemoPool,
    params: ChatParams,
}

impl<'a, M: LanguageModel + ?Sized> Classifier<'a, M> {
    pub fn new(model: &'a M, pool: &'a DemoPool) -> Self {
        Self {
            model,
            pool,
            params: ChatParams::default(),
        }
    }

    pub fn with_params(mut self, params: ChatParams) -> Self {
        self.params = params;
        self
    }

    /// Nearest `k` pool entries to `text`, most similar last. The record's
    /// own id is never used as its demonstration.
    pub fn retrieve(
        &self,
        id: &str,
        text: &str,
        k: usize,
    ) -> Result<Vec<Demonstration>, ClassifyError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        if self.pool.is_empty() {
            return Err(ClassifyError::EmptyPool(k));
        }
        let query = self.model.embed_one(text)?;
        let snap = self.pool.snapshot();
        let hits = snap.top_k_filtered(&query, k, |e| e.id != id)?;
        let mut demos: Vec<Demonstration> = hits
            .into_iter()
            .map(|h| {
                let e = snap.get(&h.id).expect("hit comes from the snapshot");
                Demonstration {
                    id: h.id,
                    text: e.payload.text.clone(),
                    label: e.payload.label.clone().unwrap_or_default(),
                    similarity: h.score,
                }
            })
            .collect();
        demos.reverse();
        Ok(demos)
    }

    pub fn build_prompt(
        &self,
        id: &str,
        text: &str,
        dimension: &Dimension,
        k: usize,
    ) -> Result<PromptBundle, ClassifyError> {
        let demos = self.retrieve(id, text, k)?;
        Ok(render_prompt(dimension, &demos, text))
    }

    pub fn classify(
        &self,
        id: &str,
        text: &str,
        dimension: &Dimension,
        k: usize,
    ) -> Result<ClassificationResult, ClassifyError> {
        let bundle = self.build_prompt(id, text, dimension, k)?;
        let request = ChatRequest::user(bundle.rendered.clone()).with_params(self.params.clone());
        let first = self.model.chat(&request)?;
        if let Ok(label) = parse_label(&first, dimension.labels()) {
            return Ok(ClassificationResult {
                id: id.into(),
                label,
                raw_completion: first,
                demos_used: bundle.demonstrations,
                calls: 1,
            });
        }
        let reask = format!(
            "{}\n\nAnswer with exactly one label from: {}.",
            bundle.rendered,
            dimension.labels().join(", ")
        );
        let second = self
            .model
            .chat(&ChatRequest::user(reask).with_params(self.params.clone()))?;
        let label = parse_label(&second, dimension.labels())?;
        Ok(ClassificationResult {
            id: id.into(),
            label,
            raw_completion: second,
            demos_used: bundle.demonstrations,
            calls: 2,
        })
    }
}

/// Keeps the `top_n` most frequent labels (ties by label) and maps every
/// other label to "others". Returns the rewritten examples and the new label
/// set, frequency-ordered with "others" last.
pub fn fold_labels(
    examples: &[LabeledExample],
    top_n: usize,
) -> (Vec<LabeledExample>, Vec<String>) {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in examples {
        *counts.entry(normalize_phrase(&e.label)).or_default() += 1;
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let kept: Vec<String> = ranked.iter().take(top_n).map(|(l, _)| l.clone()).collect();
    let keep: BTreeSet<&String> = kept.iter().collect();
    let folded_any = ranked.len() > kept.len();
    let out = examples
        .iter()
        .map(|e| {
            let l = normalize_phrase(&e.label);
            LabeledExample {
                label: if keep.contains(&l) {
                    l
                } else {
                    OTHERS_TOPIC.to_string()
                },
                ..e.clone()
            }
        })
        .collect();
    let mut labels = kept.clone();
    if folded_any && !labels.iter().any(|l| l == OTHERS_TOPIC) {
        labels.push(OTHERS_TOPIC.to_string());
    }
    (out, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub seed: u64,
    pub test_fraction: f64,
    /// Fold the label set to its `n` most frequent labels plus "others".
    pub fold_top_n: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: SHOTS_SIMPLE,
            seed: 0,
            test_fraction: DEFAULT_TEST_FRACTION,
            fold_top_n: Some(DEFAULT_FOLD_TOP_N),
        }
    }
}

/// Deterministic train/test split. Examples are ordered by id before a
/// seeded shuffle, so input order does not matter.
pub fn split(
    examples: &[LabeledExample],
    test_fraction: f64,
    seed: u64,
) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    let mut all = examples.to_vec();
    all.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    let n_test = ((all.len() as f64) * test_fraction).round() as usize;
    let train = all.split_off(n_test.min(all.len()));
    (train, all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub gold: String,
    pub predicted: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub dimension: String,
    pub k: usize,
    pub seed: u64,
    pub labels: Vec<String>,
    pub train_size: usize,
    pub test_size: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Completions that stayed unparseable after the re-ask; counted wrong.
    pub unparseable: usize,
    /// gold -> predicted -> count
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
    pub predictions: Vec<Prediction>,
}

pub const UNPARSEABLE: &str = "<unparseable>";

/// Split, build the demo pool from the training side, classify the test
/// side and score accuracy.
pub fn evaluate<M: LanguageModel + ?Sized>(
    model: &M,
    examples: &[LabeledExample],
    dimension: &Dimension,
    config: &EvalConfig,
) -> Result<AccuracyReport, ClassifyError> {
    let (data, dimension) = match config.fold_top_n {
        Some(n) => {
            let (folded, labels) = fold_labels(examples, n);
            (folded, dimension.with_labels(&labels)?)
        }
        None => (examples.to_vec(), dimension.clone()),
    };
    let (train, test) = split(&data, config.test_fraction, config.seed);
    let pool = DemoPool::build(model, &train)?;
    let classifier = Classifier::new(model, &pool);

    let mut predictions = Vec::with_capacity(test.len());
    let mut unparseable = 0;
    for ex in &test {
        let predicted = match classifier.classify(&ex.id, &ex.text, &dimension, config.k) {
            Ok(r) => r.label,
            Err(ClassifyError::UnparseableLabel(raw)) => {
                warn!("record {}: unparseable completion {raw:?}", ex.id);
                unparseable += 1;
                UNPARSEABLE.to_string()
            }
            Err(e) => return Err(e),
        };
        predictions.push(Prediction {
            id: ex.id.clone(),
            gold: normalize_phrase(&ex.label),
            predicted,
        });
    }
    let correct = predictions.iter().filter(|p| p.gold == p.predicted).count();
    let mut confusion: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for p in &predictions {
        *confusion
            .entry(p.gold.clone())
            .or_default()
            .entry(p.predicted.clone())
            .or_default() += 1;
    }
    Ok(AccuracyReport {
        dimension: dimension.name().to_string(),
        k: config.k,
        seed: config.seed,
        labels: dimension.labels().to_vec(),
        train_size: train.len(),
        test_size: test.len(),
        correct,
        accuracy: if test.is_empty() {
            0.0
        } else {
            correct as f64 / test.len() as f64
        },
        unparseable,
        confusion,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::mock::ScriptedModel;

    fn labels(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn informativeness() -> Dimension {
        Dimension::new(
            "informativeness",
            &labels(&["informative", "non-informative"]),
            None,
        )
        .unwrap()
    }

    #[test]
    fn parse_exact_and_decorated() {
        let set = informativeness().labels().to_vec();
        assert_eq!(parse_label("informative", &set).unwrap(), "informative");
        assert_eq!(
            parse_label("Label: Non-informative.", &set).unwrap(),
            "non-informative"
        );
        assert_eq!(
            parse_label("informative ... non-informative", &set).unwrap(),
            "informative"
        );
        assert_eq!(
            parse_label("non-informative, not informative", &set).unwrap(),
            "non-informative"
        );
        assert!(matches!(
            parse_label("banana", &set),
            Err(ClassifyError::UnparseableLabel(_))
        ));
    }

    #[test]
    fn longest_label_wins_at_same_position() {
        let set = labels(&["bug", "bug report"]);
        assert_eq!(
            parse_label("Bug report about login", &set).unwrap(),
            "bug report"
        );
        assert_eq!(parse_label("bug", &set).unwrap(), "bug");
    }

    #[test]
    fn dimension_validation() {
        assert!(Dimension::new("d", &labels(&["A", "a "]), None).is_err());
        assert!(Dimension::new("d", &[], None).is_err());
        assert!(Dimension::new("d", &labels(&["a"]), Some("{target} then {demos}")).is_err());
        assert!(Dimension::new("d", &labels(&["a"]), Some("only {demos}")).is_err());
        assert!(
            Dimension::new("d", &labels(&["a"]), Some("I: {labels}\n{demos}\n{target}")).is_ok()
        );
    }

    #[test]
    fn zero_shot_has_no_demo_block() {
        let model = ScriptedModel::new(8);
        let pool = DemoPool::empty();
        let c = Classifier::new(&model, &pool);
        let b = c
            .build_prompt("t", "the app keeps crashing", &informativeness(), 0)
            .unwrap();
        assert!(b.demonstrations.is_empty());
        assert!(!b.rendered.contains("Examples:"));
        assert!(b.rendered.starts_with(&b.instruction));
        assert!(b
            .rendered
            .ends_with("Feedback: the app keeps crashing\nLabel:"));
        assert!(matches!(
            c.build_prompt("t", "x", &informativeness(), 3),
            Err(ClassifyError::EmptyPool(3))
        ));
    }

    #[test]
    fn slot_template_zero_shot_collapses() {
        let d = Dimension::new(
            "s",
            &labels(&["x", "y"]),
            Some("Pick one of {labels}.\n\n{demos}\n\n{target}\n"),
        )
        .unwrap();
        let b = render_prompt(&d, &[], "hello");
        assert_eq!(b.instruction, "Pick one of x, y.");
        assert_eq!(
            b.rendered,
            "Pick one of x, y.\n\nFeedback to classify:\nFeedback: hello\nLabel:"
        );
    }

    #[test]
    fn reask_then_error() {
        let model = ScriptedModel::new(8).fallback("banana");
        let pool = DemoPool::empty();
        let c = Classifier::new(&model, &pool);
        let err = c.classify("t", "x", &informativeness(), 0).unwrap_err();
        assert!(matches!(err, ClassifyError::UnparseableLabel(_)));
        assert_eq!(model.chat_count(), 2);
        let calls = model.calls();
        assert!(calls[1].messages[0]
            .content
            .ends_with("Answer with exactly one label from: informative, non-informative."));
    }

    #[test]
    fn reask_recovers() {
        let model = ScriptedModel::new(8)
            .rule("Answer with exactly one label", "non-informative")
            .fallback("banana");
        let pool = DemoPool::empty();
        let r = Classifier::new(&model, &pool)
            .classify("t", "x", &informativeness(), 0)
            .unwrap();
        assert_eq!(r.label, "non-informative");
        assert_eq!(r.calls, 2);
    }

    #[test]
    fn fold_top_n() {
        let ex: Vec<LabeledExample> = [("a", 5), ("b", 3), ("c", 3), ("d", 1)]
            .iter()
            .flat_map(|(l, n)| {
                (0..*n).map(move |i| LabeledExample {
                    id: format!("{l}{i}"),
                    text: "t".into(),
                    label: l.to_string(),
                })
            })
            .collect();
        let (folded, set) = fold_labels(&ex, 2);
        assert_eq!(set, ["a", "b", "others"]);
        assert_eq!(folded.iter().filter(|e| e.label == "others").count(), 4);
        let (_, unchanged) = fold_labels(&ex, 10);
        assert_eq!(unchanged, ["a", "b", "c", "d"]);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ex: Vec<LabeledExample> = (0..10)
            .map(|i| LabeledExample {
                id: format!("e{i}"),
                text: "t".into(),
                label: "x".into(),
            })
            .collect();
        let (train, test) = split(&ex, 0.3, 7);
        assert_eq!((train.len(), test.len()), (7, 3));
        let mut reversed = ex.clone();
        reversed.reverse();
        assert_eq!(split(&reversed, 0.3, 7), (train, test));
    }
}
