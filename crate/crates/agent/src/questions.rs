//! The evaluation question set: 90 questions over three feedback datasets,
//! each typed as analysis, figure or suggestion and graded by difficulty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

const CORPUS: &str = include_str!("../fixtures/qa_corpus.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionKind {
    Analysis,
    Figure,
    Suggestion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

/// Mean reviewer scores on the 1 to 5 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub comprehensiveness: f64,
    pub correctness: f64,
    pub readability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaQuestion {
    pub dataset: String,
    pub question: String,
    pub difficulty: Difficulty,
    pub kind: QuestionKind,
    pub scores: Scores,
}

/// The bundled question set, in table order.
pub fn corpus() -> Vec<QaQuestion> {
    serde_json::from_str(CORPUS).expect("bundled question corpus is valid")
}

/// The properties a difficulty grade is derived from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyFactors {
    pub steps: u32,
    pub filters: u32,
    pub plots_figure: bool,
    /// Needs a filter on something that is not a column, such as weekdays.
    pub out_of_scope_filter: bool,
    pub open_ended: bool,
}

/// Factor weights and grade cut-offs. The defaults weigh every factor
/// equally; tune them in config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rubric {
    pub step_weight: f64,
    pub filter_weight: f64,
    pub figure_weight: f64,
    pub out_of_scope_weight: f64,
    pub open_ended_weight: f64,
    /// Scores below this are easy.
    pub medium_from: f64,
    /// Scores at or above this are hard.
    pub hard_from: f64,
}

impl Default for Rubric {
    fn default() -> Self {
        Self {
            step_weight: 1.0,
            filter_weight: 1.0,
            figure_weight: 1.0,
            out_of_scope_weight: 1.0,
            open_ended_weight: 1.0,
            medium_from: 2.0,
            hard_from: 4.0,
        }
    }
}

impl Rubric {
    /// A single step costs nothing; each extra step adds its weight.
    pub fn score(&self, f: &DifficultyFactors) -> f64 {
        let flag = |b: bool, w: f64| if b { w } else { 0.0 };
        self.step_weight * f.steps.saturating_sub(1) as f64
            + self.filter_weight * f.filters as f64
            + flag(f.plots_figure, self.figure_weight)
            + flag(f.out_of_scope_filter, self.out_of_scope_weight)
            + flag(f.open_ended, self.open_ended_weight)
    }

    pub fn grade(&self, f: &DifficultyFactors) -> Difficulty {
        let s = self.score(f);
        if s >= self.hard_from {
            Difficulty::Hard
        } else if s >= self.medium_from {
            Difficulty::Medium
        } else {
            Difficulty::Easy
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub comprehensiveness: f64,
    pub correctness: f64,
    pub readability: f64,
}

fn summarize<'a, K: Ord>(
    qs: impl IntoIterator<Item = &'a QaQuestion>,
    key: impl Fn(&QaQuestion) -> K,
) -> BTreeMap<K, ScoreSummary> {
    let mut out: BTreeMap<K, ScoreSummary> = BTreeMap::new();
    for q in qs {
        let s = out.entry(key(q)).or_default();
        s.count += 1;
        s.comprehensiveness += q.scores.comprehensiveness;
        s.correctness += q.scores.correctness;
        s.readability += q.scores.readability;
    }
    for s in out.values_mut() {
        let n = s.count as f64;
        s.comprehensiveness /= n;
        s.correctness /= n;
        s.readability /= n;
    }
    out
}

/// Mean scores per question type.
pub fn by_kind<'a>(
    qs: impl IntoIterator<Item = &'a QaQuestion>,
) -> BTreeMap<QuestionKind, ScoreSummary> {
    summarize(qs, |q| q.kind)
}

/// Mean scores per difficulty.
pub fn by_difficulty<'a>(
    qs: impl IntoIterator<Item = &'a QaQuestion>,
) -> BTreeMap<Difficulty, ScoreSummary> {
    summarize(qs, |q| q.difficulty)
}
