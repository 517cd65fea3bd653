//! Topic evaluation: keyword NPMI coherence and the share of "others".

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::warn;
use serde::Serialize;

use super::assign::Assignment;
use crate::store::{FeedbackRecord, OTHERS_TOPIC};
use crate::text::{is_stopword, tokenize};

pub const TOP_KEYWORDS: usize = 10;

/// Fraction of assignments whose only topic is "others"; 0 for no input.
pub fn others_rate(assignments: &[Assignment]) -> f64 {
    if assignments.is_empty() {
        return 0.0;
    }
    assignments.iter().filter(|a| a.is_others()).count() as f64 / assignments.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicCoherence {
    pub topic: String,
    pub support: usize,
    pub keywords: Vec<String>,
    pub npmi: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CoherenceReport {
    pub topics: Vec<TopicCoherence>,
    /// Topics left out, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl CoherenceReport {
    pub fn mean(&self) -> Option<f64> {
        (!self.topics.is_empty())
            .then(|| self.topics.iter().map(|t| t.npmi).sum::<f64>() / self.topics.len() as f64)
    }

    pub fn get(&self, topic: &str) -> Option<&TopicCoherence> {
        self.topics.iter().find(|t| t.topic == topic)
    }

    pub fn write_csv(&self, w: impl std::io::Write) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["topic", "support", "npmi", "keywords"])?;
        for t in &self.topics {
            out.write_record([
                t.topic.clone(),
                t.support.to_string(),
                format!("{:.6}", t.npmi),
                t.keywords.join(" "),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn content_terms(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| !is_stopword(t))
        .collect()
}

/// Highest term-frequency words across `texts`, ties alphabetical.
pub fn top_keywords<'a>(texts: impl IntoIterator<Item = &'a str>, n: usize) -> Vec<String> {
    let mut tf: BTreeMap<String, usize> = BTreeMap::new();
    for t in texts {
        for term in content_terms(t) {
            *tf.entry(term).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = tf.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.into_iter().take(n).map(|(w, _)| w).collect()
}

/// Normalized PMI from document counts. Pairs that never co-occur score -1;
/// pairs present in every document score 1.
pub fn npmi(n_docs: usize, d_i: usize, d_j: usize, d_ij: usize) -> f64 {
    if d_ij == 0 {
        return -1.0;
    }
    let n = n_docs as f64;
    let p_ij = d_ij as f64 / n;
    if d_ij == n_docs {
        return 1.0;
    }
    let (p_i, p_j) = (d_i as f64 / n, d_j as f64 / n);
    (p_ij / (p_i * p_j)).ln() / -p_ij.ln()
}

/// Mean pairwise NPMI of each topic's top keywords. Keywords come from the
/// topic's supporting records; co-occurrence is counted over documents of
/// the whole corpus. "others" is not scored.
pub fn coherence(assignments: &[Assignment], corpus: &[FeedbackRecord]) -> CoherenceReport {
    let docs: Vec<BTreeSet<String>> = corpus
        .iter()
        .map(|r| content_terms(&r.text).into_iter().collect())
        .collect();
    let text_of: HashMap<&str, &str> = corpus
        .iter()
        .map(|r| (r.id.as_str(), r.text.as_str()))
        .collect();

    let mut support: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for a in assignments {
        for t in &a.topics {
            if t != OTHERS_TOPIC {
                support.entry(t.as_str()).or_default().push(a.id.as_str());
            }
        }
    }

    let mut report = CoherenceReport::default();
    for (topic, ids) in support {
        let texts: Vec<&str> = ids
            .iter()
            .filter_map(|id| text_of.get(id).copied())
            .collect();
        if texts.is_empty() {
            warn!("topic {topic:?} has no supporting record in the corpus; skipped");
            report
                .skipped
                .push((topic.to_string(), "no supporting record".into()));
            continue;
        }
        let keywords = top_keywords(texts.iter().copied(), TOP_KEYWORDS);
        if keywords.len() < 2 {
            warn!("topic {topic:?} has fewer than two keywords; skipped");
            report
                .skipped
                .push((topic.to_string(), "fewer than two keywords".into()));
            continue;
        }
        let df = |w: &str| docs.iter().filter(|d| d.contains(w)).count();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..keywords.len() {
            for j in (i + 1)..keywords.len() {
                let both = docs
                    .iter()
                    .filter(|d| d.contains(&keywords[i]) && d.contains(&keywords[j]))
                    .count();
                total += npmi(docs.len(), df(&keywords[i]), df(&keywords[j]), both);
                pairs += 1;
            }
        }
        report.topics.push(TopicCoherence {
            topic: topic.to_string(),
            support: texts.len(),
            keywords,
            npmi: total / pairs as f64,
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Utc;

    fn a(id: &str, topics: &[&str]) -> Assignment {
        Assignment {
            id: id.into(),
            topics: topics.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn others_rate_bounds() {
        assert_eq!(others_rate(&[]), 0.0);
        assert_eq!(others_rate(&[a("1", &["bug"])]), 0.0);
        assert_eq!(
            others_rate(&[a("1", &["others"]), a("2", &["others"])]),
            1.0
        );
        // mixed with a real topic does not count
        assert_eq!(others_rate(&[a("1", &["others", "bug"])]), 0.0);
    }

    #[test]
    fn always_cooccurring_is_one() {
        assert_eq!(npmi(4, 2, 2, 2), 1.0);
        assert_eq!(npmi(4, 4, 4, 4), 1.0);
        assert_eq!(npmi(4, 2, 2, 0), -1.0);
    }

    #[test]
    fn keywords_ranked_by_tf_then_alpha() {
        let k = top_keywords(["the crash crash login", "login sync"], 3);
        assert_eq!(k, ["crash", "login", "sync"]);
    }

    #[test]
    fn topic_with_missing_records_is_skipped() {
        let corpus = vec![FeedbackRecord::new("1", "crash login", Utc::now())];
        let r = coherence(&[a("1", &["bug"]), a("9", &["ghost"])], &corpus);
        assert_eq!(r.topics.len(), 1);
        assert_eq!(r.skipped[0].0, "ghost");
        assert_eq!(r.get("bug").unwrap().npmi, 1.0);
    }
}
