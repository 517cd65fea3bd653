//! Agglomerative clustering of reviewed topics and cluster summarization.

use serde::Serialize;

use super::{Origin, TopicError, TopicPhrase, MAX_PHRASE_WORDS};
use crate::index::{cosine, EmbeddingVector, IndexError};
use crate::llm::{ChatParams, ChatRequest, LanguageModel};
use crate::text::truncate_words;

/// One agglomeration step; clusters are named by their member indices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeStep {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dendrogram {
    /// Final clusters, each sorted ascending, ordered by smallest member.
    pub clusters: Vec<Vec<usize>>,
    pub merges: Vec<MergeStep>,
}

/// Average-linkage agglomeration over cosine distance (1 - cosine).
///
/// The closest pair of clusters is merged while its distance is strictly
/// below `threshold`, so a threshold of 0 never merges. Equal distances go
/// to the pair with the lowest smallest-member indices.
pub fn hac_average(vectors: &[EmbeddingVector], threshold: f64) -> Result<Dendrogram, IndexError> {
    let n = vectors.len();
    let mut dist = vec![vec![0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = 1.0 - cosine(&vectors[i], &vectors[j])?;
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    // Slot s holds the cluster whose smallest member is s.
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut merges = Vec::new();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in (i + 1)..n {
                if members[j].is_none() {
                    continue;
                }
                if best.is_none_or(|(_, _, d)| dist[i][j] < d) {
                    best = Some((i, j, dist[i][j]));
                }
            }
        }
        let Some((a, b, d)) = best else { break };
        if d >= threshold {
            break;
        }
        let right = members[b].take().expect("active slot");
        let left = members[a].clone().expect("active slot");
        let (na, nb) = (left.len() as f64, right.len() as f64);
        for k in 0..n {
            if k == a || members[k].is_none() {
                continue;
            }
            let v = (na * dist[a][k] + nb * dist[b][k]) / (na + nb);
            dist[a][k] = v;
            dist[k][a] = v;
        }
        let mut merged = left.clone();
        merged.extend(&right);
        merged.sort_unstable();
        members[a] = Some(merged);
        merges.push(MergeStep {
            left,
            right,
            distance: d,
        });
    }
    Ok(Dendrogram {
        clusters: members.into_iter().flatten().collect(),
        merges,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicCluster {
    pub members: Vec<TopicPhrase>,
    pub centroid: EmbeddingVector,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<TopicPhrase>,
}

/// Clusters phrases by the embeddings of their normalized text. Output order
/// follows the smallest input index in each cluster.
pub fn cluster_topics<M: LanguageModel + ?Sized>(
    model: &M,
    topics: &[TopicPhrase],
    threshold: f64,
) -> Result<Vec<TopicCluster>, TopicError> {
    if topics.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<String> = topics.iter().map(|t| t.normalized.clone()).collect();
    let vectors = model.embed(&texts)?;
    let tree = hac_average(&vectors, threshold)?;
    Ok(tree
        .clusters
        .into_iter()
        .map(|idx| TopicCluster {
            members: idx.iter().map(|&i| topics[i].clone()).collect(),
            centroid: EmbeddingVector::mean(idx.iter().map(|&i| &vectors[i]))
                .expect("non-empty cluster"),
            summary: None,
        })
        .collect())
}

pub fn summary_prompt(cluster: &TopicCluster) -> String {
    let mut s = String::from(
        "The following topic phrases were extracted from user feedback and describe closely related issues.\n\
         Summarize them into one high-level topic phrase of at most 8 words. Reply with the phrase only.\n\n",
    );
    for m in &cluster.members {
        s.push_str("- ");
        s.push_str(&m.display);
        s.push('\n');
    }
    s.push_str("\nPhrase:");
    s
}

fn parse_summary(completion: &str) -> Option<String> {
    let line = completion.lines().map(str::trim).find(|l| !l.is_empty())?;
    let line = line
        .strip_prefix("Phrase:")
        .or_else(|| line.strip_prefix("phrase:"))
        .unwrap_or(line)
        .trim()
        .trim_matches(|c| c == '"' || c == '\'' || c == '`')
        .trim();
    (!line.is_empty()).then(|| truncate_words(line, MAX_PHRASE_WORDS))
}

/// One phrase for the whole cluster. A singleton keeps its phrase without a
/// model call; otherwise exactly one call is made, and an empty reply falls
/// back to the member seen most often.
pub fn summarize_cluster<M: LanguageModel + ?Sized>(
    model: &M,
    params: &ChatParams,
    cluster: &TopicCluster,
) -> Result<TopicPhrase, TopicError> {
    let count: usize = cluster.members.iter().map(|m| m.count).sum();
    let first_seen = cluster.members.iter().find_map(|m| m.first_seen.clone());
    let display = if let [only] = cluster.members.as_slice() {
        only.display.clone()
    } else {
        let reply =
            model.chat(&ChatRequest::user(summary_prompt(cluster)).with_params(params.clone()))?;
        match parse_summary(&reply) {
            Some(p) => p,
            None => {
                let top = cluster
                    .members
                    .iter()
                    .rev()
                    .max_by_key(|m| m.count)
                    .ok_or(TopicError::EmptyPhrase)?;
                top.display.clone()
            }
        }
    };
    let mut phrase = TopicPhrase::new(&display, Origin::ClusterSummary)?;
    phrase.count = count;
    phrase.first_seen = first_seen;
    Ok(phrase)
}

/// Clusters the accepted topics and summarizes each cluster. Returns the
/// clusters (with summaries filled in) and the duplicate-free summary list
/// that seeds the next round.
pub fn refine_topics<M: LanguageModel + ?Sized>(
    model: &M,
    params: &ChatParams,
    accepted: &[TopicPhrase],
    threshold: f64,
) -> Result<(Vec<TopicCluster>, Vec<TopicPhrase>), TopicError> {
    let mut clusters = cluster_topics(model, accepted, threshold)?;
    let mut list = super::TopicList::new();
    for c in &mut clusters {
        let s = summarize_cluster(model, params, c)?;
        if let Some(existing) = list.get_mut(&s.normalized) {
            existing.count += s.count;
        } else {
            list.insert(s.clone());
        }
        c.summary = Some(s);
    }
    Ok((clusters, list.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::mock::ScriptedModel;

    fn v(x: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec()).unwrap()
    }

    fn phrase(s: &str) -> TopicPhrase {
        TopicPhrase::new(s, Origin::Emergent).unwrap()
    }

    #[test]
    fn identical_vectors_merge() {
        let t = hac_average(&[v(&[1.0, 0.0]), v(&[1.0, 0.0])], 0.25).unwrap();
        assert_eq!(t.clusters, vec![vec![0, 1]]);
    }

    #[test]
    fn zero_threshold_keeps_singletons() {
        let t = hac_average(&[v(&[1.0, 0.0]), v(&[1.0, 0.0]), v(&[0.0, 1.0])], 0.0).unwrap();
        assert_eq!(t.clusters, vec![vec![0], vec![1], vec![2]]);
        assert!(t.merges.is_empty());
    }

    #[test]
    fn ties_take_lowest_pair() {
        // three mutually orthogonal pairs at equal distance: (0,1) goes first
        let t = hac_average(
            &[
                v(&[1.0, 0.0, 0.0]),
                v(&[0.0, 1.0, 0.0]),
                v(&[0.0, 0.0, 1.0]),
            ],
            1.5,
        )
        .unwrap();
        assert_eq!(t.merges[0].left, vec![0]);
        assert_eq!(t.merges[0].right, vec![1]);
        assert_eq!(t.clusters, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn singleton_needs_no_call() {
        let model = ScriptedModel::new(8);
        let c = TopicCluster {
            members: vec![phrase("spell checking feature")],
            centroid: v(&[1.0]),
            summary: None,
        };
        let s = summarize_cluster(&model, &ChatParams::default(), &c).unwrap();
        assert_eq!(s.display, "spell checking feature");
        assert_eq!(s.origin, Origin::ClusterSummary);
        assert_eq!(model.chat_count(), 0);
    }

    #[test]
    fn pair_uses_one_call() {
        let model = ScriptedModel::new(8).fallback("crash");
        let c = TopicCluster {
            members: vec![
                phrase("crash on startup"),
                phrase("app crashes"),
                phrase("crashing"),
            ],
            centroid: v(&[1.0]),
            summary: None,
        };
        let s = summarize_cluster(&model, &ChatParams::default(), &c).unwrap();
        assert_eq!(s.normalized, "crash");
        assert_eq!(model.chat_count(), 1);
    }

    #[test]
    fn empty_summary_falls_back_to_most_frequent() {
        let model = ScriptedModel::new(8).fallback("  ");
        let mut a = phrase("crash on startup");
        a.count = 2;
        let mut b = phrase("app crashes");
        b.count = 5;
        let c = TopicCluster {
            members: vec![a, b],
            centroid: v(&[1.0]),
            summary: None,
        };
        let s = summarize_cluster(&model, &ChatParams::default(), &c).unwrap();
        assert_eq!(s.display, "app crashes");
        assert_eq!(s.count, 7);
    }

    #[test]
    fn cluster_topics_partitions() {
        let model = ScriptedModel::new(32);
        let topics: Vec<_> = ["login bug", "bug login", "dark mode", "pricing"]
            .into_iter()
            .map(phrase)
            .collect();
        let clusters = cluster_topics(&model, &topics, 0.25).unwrap();
        let mut all: Vec<String> = clusters
            .iter()
            .flat_map(|c| c.members.iter().map(|m| m.normalized.clone()))
            .collect();
        all.sort();
        assert_eq!(all, ["bug login", "dark mode", "login bug", "pricing"]);
        assert_eq!(clusters[0].members.len(), 2);
    }
}
