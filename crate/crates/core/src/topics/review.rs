//! Reviewer decisions over round-one candidate topics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::assign::Assignment;
use super::{Status, TopicError, TopicList, TopicPhrase};
use crate::store::OTHERS_TOPIC;
use crate::text::normalize_phrase;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
    Rename(String),
}

impl FromStr for Decision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "accept" => Ok(Decision::Accept),
            "reject" => Ok(Decision::Reject),
            other => match other.strip_prefix("rename:") {
                Some(new) if !new.trim().is_empty() => Ok(Decision::Rename(new.trim().to_string())),
                _ => Err(format!(
                    "unknown decision {s:?}; expected accept, reject or rename:<phrase>"
                )),
            },
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Accept => f.write_str("accept"),
            Decision::Reject => f.write_str("reject"),
            Decision::Rename(new) => write!(f, "rename:{new}"),
        }
    }
}

impl Serialize for Decision {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Decision {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub candidates: Vec<TopicPhrase>,
}

/// Snapshot of the candidate list for a reviewer. "others" is never offered.
pub fn review_candidates(list: &TopicList) -> ReviewSession {
    ReviewSession {
        candidates: list
            .iter()
            .filter(|t| t.normalized != OTHERS_TOPIC)
            .cloned()
            .collect(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewOutcome {
    /// Accepted and renamed topics in candidate order, marked accepted.
    pub accepted: Vec<TopicPhrase>,
    pub rejected: Vec<TopicPhrase>,
    /// Normalized old phrase to normalized new phrase.
    pub renames: BTreeMap<String, String>,
}

impl ReviewOutcome {
    /// Rewrites assignments: renamed topics are substituted and rejected
    /// ones dropped. A record left without topics becomes "others".
    pub fn rewrite(&self, assignments: &mut [Assignment]) {
        let rejected: Vec<&str> = self
            .rejected
            .iter()
            .map(|t| t.normalized.as_str())
            .collect();
        for a in assignments {
            let mut topics = Vec::with_capacity(a.topics.len());
            for t in &a.topics {
                if rejected.contains(&t.as_str()) {
                    continue;
                }
                let t = self.renames.get(t).cloned().unwrap_or_else(|| t.clone());
                if !topics.contains(&t) {
                    topics.push(t);
                }
            }
            if topics.is_empty() {
                topics.push(OTHERS_TOPIC.to_string());
            }
            a.topics = topics;
        }
    }
}

/// Every candidate needs a decision; keys are matched after normalization.
/// A rename onto a phrase that is already accepted folds the two together.
pub fn apply_review(
    session: &ReviewSession,
    decisions: &BTreeMap<String, Decision>,
) -> Result<ReviewOutcome, TopicError> {
    let normalized: BTreeMap<String, &Decision> = decisions
        .iter()
        .map(|(k, v)| (normalize_phrase(k), v))
        .collect();
    let missing: Vec<String> = session
        .candidates
        .iter()
        .filter(|c| !normalized.contains_key(&c.normalized))
        .map(|c| c.normalized.clone())
        .collect();
    if !missing.is_empty() {
        return Err(TopicError::IncompleteReview(missing));
    }
    for k in normalized.keys() {
        if !session.candidates.iter().any(|c| &c.normalized == k) {
            warn!("review decision for unknown topic {k:?} ignored");
        }
    }

    let mut out = ReviewOutcome::default();
    let mut accepted = TopicList::new();
    for c in &session.candidates {
        let mut phrase = c.clone();
        phrase.status = Status::Candidate;
        match normalized[&c.normalized] {
            Decision::Accept => {}
            Decision::Reject => {
                phrase.reject()?;
                info!("topic {:?} rejected", c.normalized);
                out.rejected.push(phrase);
                continue;
            }
            Decision::Rename(new) => {
                let mut renamed = TopicPhrase::new(new, c.origin)?;
                renamed.count = c.count;
                renamed.first_seen = c.first_seen.clone();
                if renamed.normalized != c.normalized {
                    out.renames
                        .insert(c.normalized.clone(), renamed.normalized.clone());
                }
                phrase = renamed;
            }
        }
        phrase.accept()?;
        if let Some(existing) = accepted.get_mut(&phrase.normalized) {
            existing.count += phrase.count;
        } else {
            accepted.insert(phrase);
        }
    }
    out.accepted = accepted.into();
    Ok(out)
}
