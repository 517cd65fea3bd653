//! Round-one topic quality scoring and retrieval of extra demonstrations.

use std::collections::HashMap;

use serde::Serialize;

use super::assign::Assignment;
use super::TopicError;
use crate::index::{cosine, IndexBuilder, IndexSnapshot, Payload};
use crate::llm::LanguageModel;
use crate::store::FeedbackRecord;

/// Scores how well a topic phrase summarizes a piece of feedback; higher is
/// better.
pub trait TopicScorer: Send + Sync {
    fn score(&self, phrase: &str, feedback: &str) -> Result<f64, TopicError>;

    fn score_many(&self, pairs: &[(String, String)]) -> Result<Vec<f64>, TopicError> {
        pairs.iter().map(|(p, f)| self.score(p, f)).collect()
    }
}

/// Cosine between the embeddings of the phrase and the feedback. Stands in
/// for a generation-likelihood scorer, which needs a hosted seq2seq model.
pub struct EmbeddingCosineScorer<M>(pub M);

impl<M: LanguageModel> TopicScorer for EmbeddingCosineScorer<M> {
    fn score(&self, phrase: &str, feedback: &str) -> Result<f64, TopicError> {
        let v = self.0.embed(&[phrase.to_string(), feedback.to_string()])?;
        Ok(cosine(&v[0], &v[1])?)
    }

    fn score_many(&self, pairs: &[(String, String)]) -> Result<Vec<f64>, TopicError> {
        let texts: Vec<String> = pairs
            .iter()
            .flat_map(|(p, f)| [p.clone(), f.clone()])
            .collect();
        let v = self.0.embed(&texts)?;
        v.chunks(2).map(|c| Ok(cosine(&c[0], &c[1])?)).collect()
    }
}

pub struct ConstantScorer(pub f64);

impl TopicScorer for ConstantScorer {
    fn score(&self, _: &str, _: &str) -> Result<f64, TopicError> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievedDemo {
    pub id: String,
    pub feedback: String,
    pub topics: Vec<String>,
    pub similarity: f64,
    pub quality: f64,
}

/// Round-one results embedded by feedback text, each with a quality score.
/// Items whose only topic is "others" are not indexed.
#[derive(Debug, Clone)]
pub struct ExtraDemoIndex {
    snapshot: IndexSnapshot,
    quality: HashMap<String, f64>,
}

impl ExtraDemoIndex {
    pub fn build<M: LanguageModel + ?Sized>(
        model: &M,
        scorer: &dyn TopicScorer,
        records: &[FeedbackRecord],
        assignments: &[Assignment],
    ) -> Result<Self, TopicError> {
        let by_id: HashMap<&str, &FeedbackRecord> =
            records.iter().map(|r| (r.id.as_str(), r)).collect();
        let usable: Vec<(&Assignment, &FeedbackRecord)> = assignments
            .iter()
            .filter(|a| !a.topics.is_empty() && !a.is_others())
            .filter_map(|a| by_id.get(a.id.as_str()).map(|r| (a, *r)))
            .collect();
        let pairs: Vec<(String, String)> = usable
            .iter()
            .map(|(a, r)| (a.topics.join("; "), r.text.clone()))
            .collect();
        let scores = scorer.score_many(&pairs)?;
        let texts: Vec<String> = usable.iter().map(|(_, r)| r.text.clone()).collect();
        let vectors = if texts.is_empty() {
            Vec::new()
        } else {
            model.embed(&texts)?
        };

        let mut builder = IndexBuilder::new();
        let mut quality = HashMap::new();
        for (((a, r), v), q) in usable.into_iter().zip(vectors).zip(scores) {
            builder.add(
                &a.id,
                v,
                Payload {
                    text: r.text.clone(),
                    label: None,
                    topics: a.topics.clone(),
                },
            )?;
            quality.insert(a.id.clone(), q);
        }
        Ok(Self {
            snapshot: builder.finalize(),
            quality,
        })
    }

    pub fn len(&self) -> usize {
        self.snapshot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshot.is_empty()
    }

    pub fn quality(&self, id: &str) -> Option<f64> {
        self.quality.get(id).copied()
    }

    pub fn snapshot(&self) -> &IndexSnapshot {
        &self.snapshot
    }

    /// Up to `n` entries with quality at least `threshold`, most similar to
    /// `text`, excluding `target_id` itself. Returned in ascending order of
    /// similarity so the closest example sits next to the target.
    pub fn retrieve<M: LanguageModel + ?Sized>(
        &self,
        model: &M,
        target_id: &str,
        text: &str,
        n: usize,
        threshold: f64,
    ) -> Result<Vec<RetrievedDemo>, TopicError> {
        if n == 0 || self.snapshot.is_empty() {
            return Ok(Vec::new());
        }
        let query = model.embed_one(text)?;
        let hits = self.snapshot.top_k_filtered(&query, n, |e| {
            e.id != target_id && self.quality.get(&e.id).is_some_and(|&q| q >= threshold)
        })?;
        let mut out: Vec<RetrievedDemo> = hits
            .into_iter()
            .map(|h| {
                let e = self.snapshot.get(&h.id).expect("hit from snapshot");
                RetrievedDemo {
                    feedback: e.payload.text.clone(),
                    topics: e.payload.topics.clone(),
                    similarity: h.score,
                    quality: self.quality[&h.id],
                    id: h.id,
                }
            })
            .collect();
        out.reverse();
        Ok(out)
    }
}
