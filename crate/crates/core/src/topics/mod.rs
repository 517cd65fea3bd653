//! Two-round abstractive topic modeling.
//!
//! Round one walks the feedback in posting order and asks the model for one
//! or more short topic phrases per item; every new phrase joins the topic
//! list shown to the model for the next item. A reviewer then filters the
//! list, the survivors are clustered and each cluster is summarized into a
//! higher-level phrase. Round two reruns assignment with the refined list and
//! extra demonstrations retrieved from round-one results.

pub mod assign;
pub mod cluster;
pub mod metrics;
pub mod quality;
pub mod review;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::IndexError;
use crate::llm::LlmError;
use crate::text::{normalize_phrase, truncate_words};

pub use assign::{
    assign_topics, parse_topics, run_round_one, run_round_two, AssignOutcome, Assignment,
    PhraseEmbeddings, RoundOutcome,
};
pub use cluster::{
    cluster_topics, hac_average, refine_topics, summarize_cluster, Dendrogram, MergeStep,
    TopicCluster,
};
pub use metrics::{coherence, npmi, others_rate, top_keywords, CoherenceReport, TopicCoherence};
pub use quality::{
    ConstantScorer, EmbeddingCosineScorer, ExtraDemoIndex, RetrievedDemo, TopicScorer,
};
pub use review::{apply_review, review_candidates, Decision, ReviewOutcome, ReviewSession};

pub const MAX_PHRASE_WORDS: usize = 8;
pub const DEFAULT_DEDUPE_THRESHOLD: f64 = 0.90;
pub const DEFAULT_CLUSTER_THRESHOLD: f64 = 0.25;

#[derive(Debug, Error)]
pub enum TopicError {
    #[error("model produced no topic for record {0}")]
    EmptyTopicOutput(String),
    #[error("review is missing decisions for: {}", .0.join(", "))]
    IncompleteReview(Vec<String>),
    #[error("topic {topic:?} cannot move from {from:?} to {to:?}")]
    InvalidTransition {
        topic: String,
        from: Status,
        to: Status,
    },
    #[error("empty topic phrase")]
    EmptyPhrase,
    #[error("invalid topic config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Predefined,
    Emergent,
    ClusterSummary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Candidate,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicPhrase {
    pub normalized: String,
    pub display: String,
    pub origin: Origin,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_seen: Option<String>,
    #[serde(default)]
    pub count: usize,
}

impl TopicPhrase {
    /// Phrases longer than eight words are cut to their first eight.
    pub fn new(display: &str, origin: Origin) -> Result<Self, TopicError> {
        let display = truncate_words(display.trim(), MAX_PHRASE_WORDS);
        let normalized = normalize_phrase(&display);
        if normalized.is_empty() {
            return Err(TopicError::EmptyPhrase);
        }
        Ok(Self {
            normalized,
            display,
            origin,
            status: Status::Candidate,
            first_seen: None,
            count: 0,
        })
    }

    fn transition(&mut self, to: Status) -> Result<(), TopicError> {
        if self.status != Status::Candidate || to == Status::Candidate {
            return Err(TopicError::InvalidTransition {
                topic: self.normalized.clone(),
                from: self.status,
                to,
            });
        }
        self.status = to;
        Ok(())
    }

    pub fn accept(&mut self) -> Result<(), TopicError> {
        self.transition(Status::Accepted)
    }

    pub fn reject(&mut self) -> Result<(), TopicError> {
        self.transition(Status::Rejected)
    }
}

/// Ordered, duplicate-free (by normalized form) list of topics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<TopicPhrase>", into = "Vec<TopicPhrase>")]
pub struct TopicList {
    items: Vec<TopicPhrase>,
    index: HashMap<String, usize>,
}

impl From<Vec<TopicPhrase>> for TopicList {
    fn from(items: Vec<TopicPhrase>) -> Self {
        let mut list = TopicList::default();
        for t in items {
            list.insert(t);
        }
        list
    }
}

impl From<TopicList> for Vec<TopicPhrase> {
    fn from(list: TopicList) -> Self {
        list.items
    }
}

impl TopicList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_phrases(phrases: &[String], origin: Origin) -> Result<Self, TopicError> {
        let mut list = Self::new();
        for p in phrases {
            list.insert(TopicPhrase::new(p, origin)?);
        }
        Ok(list)
    }

    /// Returns false (and leaves the list unchanged) for a duplicate.
    pub fn insert(&mut self, phrase: TopicPhrase) -> bool {
        if self.index.contains_key(&phrase.normalized) {
            return false;
        }
        self.index
            .insert(phrase.normalized.clone(), self.items.len());
        self.items.push(phrase);
        true
    }

    pub fn contains(&self, normalized: &str) -> bool {
        self.index.contains_key(normalized)
    }

    pub fn get(&self, normalized: &str) -> Option<&TopicPhrase> {
        self.index.get(normalized).map(|&i| &self.items[i])
    }

    pub fn get_mut(&mut self, normalized: &str) -> Option<&mut TopicPhrase> {
        self.index.get(normalized).map(|&i| &mut self.items[i])
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TopicPhrase> {
        self.items.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.items.iter().map(|t| t.normalized.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicDemo {
    pub feedback: String,
    pub topics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TopicConfig {
    pub task_description: String,
    pub topic_requirement: String,
    pub predefined_topics: Vec<String>,
    pub fixed_demos: Vec<TopicDemo>,
    pub max_topics_per_record: usize,
    pub n_extra_demos: usize,
    pub quality_threshold: f64,
    pub dedupe_threshold: f64,
    pub cluster_threshold: f64,
    pub refinement_iterations: usize,
}

impl Default for TopicConfig {
    fn default() -> Self {
        Self {
            task_description: "The following items are verbatim user feedback about software products. \
                               Summarize each item into short, human-readable topic phrases that capture \
                               what the user is talking about."
                .into(),
            topic_requirement: "Topics should name the product aspect or issue type (for example a feature \
                                request, a bug, a performance problem), use at most a few words and avoid \
                                copying long spans of the feedback."
                .into(),
            predefined_topics: Vec::new(),
            fixed_demos: Vec::new(),
            max_topics_per_record: 3,
            n_extra_demos: 5,
            quality_threshold: 0.3,
            dedupe_threshold: DEFAULT_DEDUPE_THRESHOLD,
            cluster_threshold: DEFAULT_CLUSTER_THRESHOLD,
            refinement_iterations: 1,
        }
    }
}

impl TopicConfig {
    pub fn validate(&self) -> Result<(), TopicError> {
        if self.max_topics_per_record == 0 {
            return Err(TopicError::InvalidConfig(
                "max_topics_per_record must be >= 1".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.predefined_topics {
            let n = normalize_phrase(p);
            if n.is_empty() || !seen.insert(n) {
                return Err(TopicError::InvalidConfig(format!(
                    "duplicate or empty predefined topic {p:?}"
                )));
            }
        }
        Ok(())
    }

    /// Same settings with a new predefined list (used to seed round two).
    pub fn refined(&self, topics: &[TopicPhrase]) -> Self {
        Self {
            predefined_topics: topics.iter().map(|t| t.display.clone()).collect(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phrase_caps_words_and_normalizes() {
        let t = TopicPhrase::new(
            "  One two three four five six seven eight nine ten ",
            Origin::Emergent,
        )
        .unwrap();
        assert_eq!(t.display, "One two three four five six seven eight");
        assert_eq!(t.normalized, "one two three four five six seven eight");
        assert!(matches!(
            TopicPhrase::new("  ", Origin::Emergent),
            Err(TopicError::EmptyPhrase)
        ));
    }

    #[test]
    fn status_transitions() {
        let mut t = TopicPhrase::new("bug", Origin::Predefined).unwrap();
        t.accept().unwrap();
        assert!(t.reject().is_err());
        let mut u = TopicPhrase::new("ui", Origin::Predefined).unwrap();
        u.reject().unwrap();
        assert!(u.accept().is_err());
    }

    #[test]
    fn list_dedupes_on_normalized() {
        let mut l = TopicList::new();
        assert!(l.insert(TopicPhrase::new("Feature Request", Origin::Predefined).unwrap()));
        assert!(!l.insert(TopicPhrase::new("feature request.", Origin::Emergent).unwrap()));
        assert_eq!(l.len(), 1);
        let json = serde_json::to_string(&l).unwrap();
        let back: TopicList = serde_json::from_str(&json).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn config_validation() {
        let mut c = TopicConfig::default();
        c.validate().unwrap();
        c.predefined_topics = vec!["bug".into(), "Bug".into()];
        assert!(c.validate().is_err());
        c.predefined_topics.clear();
        c.max_topics_per_record = 0;
        assert!(c.validate().is_err());
    }
}
