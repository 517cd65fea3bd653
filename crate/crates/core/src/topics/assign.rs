//! Progressive topic assignment (rounds one and two).

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::quality::{ExtraDemoIndex, RetrievedDemo};
use super::{Origin, TopicConfig, TopicDemo, TopicError, TopicList, TopicPhrase, MAX_PHRASE_WORDS};
use crate::index::{cosine, EmbeddingVector};
use crate::llm::{ChatParams, ChatRequest, LanguageModel};
use crate::store::{FeedbackRecord, OTHERS_TOPIC};
use crate::text::{normalize_phrase, truncate_words};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub id: String,
    /// Normalized topic phrases, canonicalized against the topic list.
    pub topics: Vec<String>,
}

impl Assignment {
    pub fn is_others(&self) -> bool {
        self.topics.len() == 1 && self.topics[0] == OTHERS_TOPIC
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignOutcome {
    pub topics: Vec<String>,
    /// Phrases not yet on the list, in output order.
    pub novel: Vec<String>,
    pub raw_completion: String,
    pub calls: usize,
}

/// Embedding cache for topic phrases so each phrase is embedded once.
#[derive(Debug, Default)]
pub struct PhraseEmbeddings {
    cache: HashMap<String, EmbeddingVector>,
}

impl PhraseEmbeddings {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure<M: LanguageModel + ?Sized>(
        &mut self,
        model: &M,
        phrases: &[String],
    ) -> Result<(), TopicError> {
        let mut missing: Vec<String> = phrases
            .iter()
            .filter(|p| !self.cache.contains_key(*p))
            .cloned()
            .collect();
        missing.dedup();
        if missing.is_empty() {
            return Ok(());
        }
        let vectors = model.embed(&missing)?;
        for (p, v) in missing.into_iter().zip(vectors) {
            self.cache.insert(p, v);
        }
        Ok(())
    }

    fn get(&self, phrase: &str) -> &EmbeddingVector {
        &self.cache[phrase]
    }
}

pub fn render_topic_prompt(
    config: &TopicConfig,
    topics: &TopicList,
    extra_demos: &[RetrievedDemo],
    target: &str,
) -> String {
    let mut s = String::new();
    s.push_str(config.task_description.trim());
    s.push_str("\n\nTopic requirement: ");
    s.push_str(config.topic_requirement.trim());
    s.push_str(
        "\n\nPredefined topics (reuse one when it fits, otherwise propose a new concise topic):\n",
    );
    if topics.is_empty() {
        s.push_str("(none yet)\n");
    } else {
        for t in topics.iter() {
            s.push_str("- ");
            s.push_str(&t.display);
            s.push('\n');
        }
    }
    s.push_str(&format!(
        "\nGive between 1 and {} topics for the feedback, separated by \";\". Answer \"{OTHERS_TOPIC}\" only if no topic applies.\n",
        config.max_topics_per_record
    ));
    let demos: Vec<TopicDemo> = config
        .fixed_demos
        .iter()
        .cloned()
        .chain(extra_demos.iter().map(|d| TopicDemo {
            feedback: d.feedback.clone(),
            topics: d.topics.clone(),
        }))
        .collect();
    if !demos.is_empty() {
        s.push_str("\nExamples:\n");
        for d in &demos {
            s.push_str(&format!(
                "\nFeedback: {}\nTopics: {}\n",
                one_line(&d.feedback),
                d.topics.join("; ")
            ));
        }
    }
    s.push_str(&format!("\nFeedback: {}\nTopics:", one_line(target)));
    s
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits a completion on ";" and line breaks into normalized phrases,
/// dropping list markers, quotes and a leading "Topics:" label.
pub fn parse_topics(completion: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for piece in completion.split([';', '\n']) {
        let mut p = piece.trim();
        for prefix in ["topics:", "topic:"] {
            if p.len() >= prefix.len() && p[..prefix.len()].eq_ignore_ascii_case(prefix) {
                p = p[prefix.len()..].trim();
            }
        }
        let p = p.trim_start_matches(|c: char| {
            c == '-' || c == '*' || c == '•' || c.is_ascii_digit() || c == '.' || c == ')'
        });
        let p = p.trim().trim_matches(|c| c == '"' || c == '\'' || c == '`');
        let n = normalize_phrase(&truncate_words(p, MAX_PHRASE_WORDS));
        if !n.is_empty() && !out.contains(&n) {
            out.push(n);
        }
    }
    out
}

/// Asks for the topics of one feedback item and canonicalizes them against
/// `topics`: an exact normalized match, or else the most similar listed
/// phrase with cosine at least `config.dedupe_threshold`.
pub fn assign_topics<M: LanguageModel + ?Sized>(
    model: &M,
    params: &ChatParams,
    record: &FeedbackRecord,
    topics: &TopicList,
    config: &TopicConfig,
    extra_demos: &[RetrievedDemo],
    embeddings: &mut PhraseEmbeddings,
) -> Result<AssignOutcome, TopicError> {
    let prompt = render_topic_prompt(config, topics, extra_demos, &record.text);
    let mut raw = model.chat(&ChatRequest::user(prompt.clone()).with_params(params.clone()))?;
    let mut calls = 1;
    let mut phrases = parse_topics(&raw);
    if phrases.is_empty() {
        let reask = format!(
            "{prompt}\n\nAnswer with at least one topic phrase; separate several with \";\"."
        );
        raw = model.chat(&ChatRequest::user(reask).with_params(params.clone()))?;
        calls += 1;
        phrases = parse_topics(&raw);
    }
    if phrases.is_empty() {
        return Err(TopicError::EmptyTopicOutput(record.id.clone()));
    }

    let mut resolved: Vec<String> = Vec::new();
    let mut novel = Vec::new();
    let unmatched: Vec<String> = phrases
        .iter()
        .filter(|p| *p != OTHERS_TOPIC && !topics.contains(p))
        .cloned()
        .collect();
    if !unmatched.is_empty() && !topics.is_empty() {
        let mut all = topics.names();
        all.extend(unmatched.iter().cloned());
        embeddings.ensure(model, &all)?;
    }
    for p in phrases {
        let canonical = if p == OTHERS_TOPIC || topics.contains(&p) {
            p
        } else {
            let v = (!topics.is_empty()).then(|| embeddings.get(&p).clone());
            let mut best: Option<(f64, String)> = None;
            if let Some(v) = v {
                for t in topics.iter() {
                    let s = cosine(&v, embeddings.get(&t.normalized))?;
                    if s >= config.dedupe_threshold && best.as_ref().is_none_or(|(b, _)| s > *b) {
                        best = Some((s, t.normalized.clone()));
                    }
                }
            }
            match best {
                Some((_, existing)) => existing,
                None => {
                    if !novel.contains(&p) {
                        novel.push(p.clone());
                    }
                    p
                }
            }
        };
        if !resolved.contains(&canonical) {
            resolved.push(canonical);
        }
    }
    if resolved.len() > 1 {
        resolved.retain(|t| t != OTHERS_TOPIC);
    }
    resolved.truncate(config.max_topics_per_record);
    novel.retain(|n| resolved.contains(n));
    Ok(AssignOutcome {
        topics: resolved,
        novel,
        raw_completion: raw,
        calls,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundOutcome {
    pub assignments: Vec<Assignment>,
    pub topics: TopicList,
    /// Topic-list size after each processed record.
    pub list_sizes: Vec<usize>,
    pub errors: Vec<(String, String)>,
    pub calls: usize,
}

fn run_round<M: LanguageModel + ?Sized>(
    model: &M,
    params: &ChatParams,
    records: &[FeedbackRecord],
    config: &TopicConfig,
    extra: Option<(&ExtraDemoIndex, usize, f64)>,
    empty_is_others: bool,
    mut progress: impl FnMut(usize, usize) -> bool,
) -> Result<RoundOutcome, TopicError> {
    config.validate()?;
    let mut ordered: Vec<&FeedbackRecord> = records.iter().collect();
    ordered.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id)));

    let mut topics = TopicList::from_phrases(&config.predefined_topics, Origin::Predefined)?;
    let mut embeddings = PhraseEmbeddings::new();
    let mut out = RoundOutcome {
        assignments: Vec::new(),
        topics: TopicList::new(),
        list_sizes: Vec::with_capacity(ordered.len()),
        errors: Vec::new(),
        calls: 0,
    };
    for (i, record) in ordered.iter().enumerate() {
        if !progress(i, ordered.len()) {
            break;
        }
        let demos = match extra {
            Some((index, n, threshold)) => {
                index.retrieve(model, &record.id, &record.text, n, threshold)?
            }
            None => Vec::new(),
        };
        match assign_topics(
            model,
            params,
            record,
            &topics,
            config,
            &demos,
            &mut embeddings,
        ) {
            Ok(o) => {
                out.calls += o.calls;
                for n in &o.novel {
                    let mut t = TopicPhrase::new(n, Origin::Emergent)?;
                    t.first_seen = Some(record.id.clone());
                    topics.insert(t);
                }
                for t in &o.topics {
                    if let Some(entry) = topics.get_mut(t) {
                        entry.count += 1;
                    }
                }
                out.assignments.push(Assignment {
                    id: record.id.clone(),
                    topics: o.topics,
                });
            }
            Err(TopicError::EmptyTopicOutput(id)) if empty_is_others => {
                out.calls += 2;
                out.assignments.push(Assignment {
                    id,
                    topics: vec![OTHERS_TOPIC.to_string()],
                });
            }
            Err(e @ TopicError::EmptyTopicOutput(_)) => {
                out.calls += 2;
                warn!("record {}: {e}", record.id);
                out.errors.push((record.id.clone(), e.to_string()));
            }
            Err(e) => {
                warn!("record {}: {e}", record.id);
                out.errors.push((record.id.clone(), e.to_string()));
            }
        }
        out.list_sizes.push(topics.len());
    }
    out.topics = topics;
    Ok(out)
}

/// First round: records are processed in posting order and every new
/// phrase joins the list for subsequent records. Per-record failures are
/// collected and the run continues.
pub fn run_round_one<M: LanguageModel + ?Sized>(
    model: &M,
    params: &ChatParams,
    records: &[FeedbackRecord],
    config: &TopicConfig,
    progress: impl FnMut(usize, usize) -> bool,
) -> Result<RoundOutcome, TopicError> {
    run_round(model, params, records, config, None, false, progress)
}

/// Second round over the refined list. Each prompt gets up to
/// `config.n_extra_demos` retrieved round-one examples after the fixed
/// demonstrations. Items for which the model gives no topic are assigned
/// "others". The list stays open to new phrases.
pub fn run_round_two<M: LanguageModel + ?Sized>(
    model: &M,
    params: &ChatParams,
    records: &[FeedbackRecord],
    refined: &TopicConfig,
    extra: Option<&ExtraDemoIndex>,
    progress: impl FnMut(usize, usize) -> bool,
) -> Result<RoundOutcome, TopicError> {
    let extra = extra.map(|e| (e, refined.n_extra_demos, refined.quality_threshold));
    run_round(model, params, records, refined, extra, true, progress)
}
