use std::collections::HashMap;

use chrono::{Duration, TimeZone, Utc};
use feedlens_core::index::cosine;
use feedlens_core::llm::mock::ScriptedModel;
use feedlens_core::topics::quality::TopicScorer;
use feedlens_core::topics::{
    coherence, hac_average, others_rate, run_round_one, Assignment, ExtraDemoIndex, TopicConfig,
    TopicError,
};
use feedlens_core::{ChatParams, EmbeddingVector, FeedbackRecord, LanguageModel};

fn unit(deg: f64) -> EmbeddingVector {
    let r = deg.to_radians();
    EmbeddingVector::new(vec![r.cos() as f32, r.sin() as f32]).unwrap()
}

fn dist(a: f64, b: f64) -> f64 {
    1.0 - (a - b).to_radians().cos()
}

#[test]
fn six_point_average_linkage_trace() {
    let angles = [0.0, 12.0, 30.0, 90.0, 97.0, 125.0];
    let vectors: Vec<_> = angles.iter().map(|&a| unit(a)).collect();
    let tree = hac_average(&vectors, 0.25).unwrap();

    // Hand trace. Pairwise distances are 1 - cos of the angle gap.
    //  1. {3},{4}: gap 7 degrees, the closest pair.
    //  2. {0},{1}: gap 12 degrees (next best 1-2 at 18, {3,4}-5 averages 35 and 28).
    //  3. {0,1},{2}: mean of gaps 30 and 18 = 0.0915, below {3,4}-5 = 0.1489.
    //  4. {3,4},{5}: mean of gaps 35 and 28.
    //  Then the two groups are at least 60 degrees apart pairwise, above 0.25.
    let expected = [
        (vec![3], vec![4], dist(90.0, 97.0)),
        (vec![0], vec![1], dist(0.0, 12.0)),
        (
            vec![0, 1],
            vec![2],
            (dist(0.0, 30.0) + dist(12.0, 30.0)) / 2.0,
        ),
        (
            vec![3, 4],
            vec![5],
            (dist(90.0, 125.0) + dist(97.0, 125.0)) / 2.0,
        ),
    ];
    assert_eq!(tree.merges.len(), expected.len());
    for (step, (l, r, d)) in tree.merges.iter().zip(&expected) {
        assert_eq!((&step.left, &step.right), (l, r));
        assert!((step.distance - d).abs() < 1e-6, "{} vs {d}", step.distance);
    }
    assert_eq!(tree.clusters, vec![vec![0, 1, 2], vec![3, 4, 5]]);

    // With no threshold the last merge joins the groups at the mean of all
    // nine cross distances.
    let full = hac_average(&vectors, 2.0).unwrap();
    let last = full.merges.last().unwrap();
    let mut cross = 0.0;
    for a in &angles[..3] {
        for b in &angles[3..] {
            cross += dist(*a, *b);
        }
    }
    assert!((last.distance - cross / 9.0).abs() < 1e-6);
    assert_eq!(full.clusters, vec![vec![0, 1, 2, 3, 4, 5]]);
}

#[test]
fn clustering_is_byte_identical_across_runs() {
    let vectors: Vec<_> = (0..30).map(|i| unit((i * 37 % 180) as f64)).collect();
    let a = serde_json::to_string(&hac_average(&vectors, 0.25).unwrap()).unwrap();
    let b = serde_json::to_string(&hac_average(&vectors, 0.25).unwrap()).unwrap();
    assert_eq!(a, b);
}

fn record(id: &str, text: &str, hour: i64) -> FeedbackRecord {
    FeedbackRecord::new(
        id,
        text,
        Utc.with_ymd_and_hms(2024, 3, 1, 0, 0, 0).unwrap() + Duration::hours(hour),
    )
}

#[test]
fn round_one_equals_sequential_union() {
    let vocab = [
        "login",
        "crash",
        "dark mode",
        "pricing",
        "sync",
        "battery",
        "ads",
        "search",
        "export",
        "widget",
    ];
    let predefined = vec!["Feature request".to_string(), "bug".to_string()];
    let mut model = ScriptedModel::new(64);
    let mut scripted: Vec<(i64, String, Vec<String>)> = Vec::new();
    for i in 0..20i64 {
        // posting order differs from id order
        let hour = (i * 7) % 20;
        let a = vocab[(i as usize * 3) % vocab.len()];
        let b = vocab[(i as usize * 5 + 1) % vocab.len()];
        let reply = if i % 4 == 0 {
            format!("Bug; {a}")
        } else {
            format!("{a}; {b}")
        };
        model = model.rule(&format!("Feedback: text {i:02}\nTopics:"), reply.clone());
        scripted.push((
            hour,
            format!("r{i:02}"),
            reply.split(';').map(|s| s.trim().to_lowercase()).collect(),
        ));
    }
    let records: Vec<_> = (0..20i64)
        .map(|i| record(&format!("r{i:02}"), &format!("text {i:02}"), (i * 7) % 20))
        .collect();
    let cfg = TopicConfig {
        predefined_topics: predefined.clone(),
        ..TopicConfig::default()
    };
    let out = run_round_one(&model, &ChatParams::default(), &records, &cfg, |_, _| true).unwrap();

    // Oracle: walk in posting order and append unseen phrases.
    scripted.sort();
    let mut list: Vec<String> = predefined.iter().map(|s| s.to_lowercase()).collect();
    let mut sizes = Vec::new();
    for (_, _, phrases) in &scripted {
        for p in phrases {
            if !list.contains(p) {
                list.push(p.clone());
            }
        }
        sizes.push(list.len());
    }
    assert_eq!(out.topics.names(), list);
    assert_eq!(out.list_sizes, sizes);
    assert!(out.list_sizes.windows(2).all(|w| w[0] <= w[1]));
    for a in &out.assignments {
        assert!(a.topics.iter().all(|t| out.topics.contains(t)));
    }
}

#[test]
fn round_one_collects_errors_and_continues() {
    let model = ScriptedModel::new(16)
        .rule("Feedback: good\nTopics:", "praise")
        .fallback("");
    let records = vec![record("a", "silent", 0), record("b", "good", 1)];
    let out = run_round_one(
        &model,
        &ChatParams::default(),
        &records,
        &TopicConfig::default(),
        |_, _| true,
    )
    .unwrap();
    assert_eq!(out.errors.len(), 1);
    assert_eq!(out.errors[0].0, "a");
    assert_eq!(out.assignments.len(), 1);
    assert_eq!(out.list_sizes, [0, 1]);
}

#[test]
fn others_rate_cases() {
    let make = |others: usize, n: usize| -> Vec<Assignment> {
        (0..n)
            .map(|i| Assignment {
                id: i.to_string(),
                topics: vec![if i < others { "others" } else { "bug" }.to_string()],
            })
            .collect()
    };
    assert_eq!(others_rate(&make(0, 100)), 0.0);
    assert_eq!(others_rate(&make(7, 100)), 0.07);
    assert_eq!(others_rate(&make(100, 100)), 1.0);
}

#[test]
fn four_document_npmi() {
    let corpus = vec![
        record("d1", "battery drain", 0),
        record("d2", "Battery drain, charger", 1),
        record("d3", "battery screen", 2),
        record("d4", "screen flicker", 3),
    ];
    let asg = vec![
        Assignment {
            id: "d1".into(),
            topics: vec!["power".into()],
        },
        Assignment {
            id: "d2".into(),
            topics: vec!["power".into()],
        },
        Assignment {
            id: "d3".into(),
            topics: vec!["display".into()],
        },
        Assignment {
            id: "d4".into(),
            topics: vec!["display".into(), "others".into()],
        },
    ];
    let report = coherence(&asg, &corpus);

    // power: keywords battery(tf 2), drain(2), charger(1).
    // Document counts over 4: battery 3, drain 2, charger 1;
    // battery+drain 2, battery+charger 1, drain+charger 1.
    let ln = f64::ln;
    let power = (ln(0.5 / (0.75 * 0.5)) / -ln(0.5)
        + ln(0.25 / (0.75 * 0.25)) / -ln(0.25)
        + ln(0.25 / (0.5 * 0.25)) / -ln(0.25))
        / 3.0;
    // display: keywords screen(2), battery(1), flicker(1).
    // screen 2, battery 3, flicker 1; screen+battery 1, screen+flicker 1,
    // battery+flicker 0 (scores -1).
    let display =
        (ln(0.25 / (0.5 * 0.75)) / -ln(0.25) + ln(0.25 / (0.5 * 0.25)) / -ln(0.25) - 1.0) / 3.0;

    let p = report.get("power").unwrap();
    assert_eq!(p.keywords, ["battery", "drain", "charger"]);
    assert!((p.npmi - power).abs() < 1e-9, "{} vs {power}", p.npmi);
    let d = report.get("display").unwrap();
    assert_eq!(d.keywords, ["screen", "battery", "flicker"]);
    assert!((d.npmi - display).abs() < 1e-9, "{} vs {display}", d.npmi);
    assert!(report.get("others").is_none());
}

/// Quality looked up from a fixed table keyed by the joined topics.
struct TableScorer(HashMap<String, f64>);

impl TopicScorer for TableScorer {
    fn score(&self, phrase: &str, _: &str) -> Result<f64, TopicError> {
        Ok(self.0[phrase])
    }
}

#[test]
fn extra_demos_match_filtered_scan() {
    let model = ScriptedModel::new(48);
    let texts = [
        "login fails after update",
        "cannot login with password",
        "login page slow",
        "dark mode please",
        "dark theme missing",
        "app crashes on login",
        "crash when saving",
        "pricing too high",
        "subscription price",
        "login button broken",
    ];
    let records: Vec<_> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| record(&format!("e{i}"), t, i as i64))
        .collect();
    let topics = [
        "login",
        "login",
        "performance",
        "dark mode",
        "dark mode",
        "crash",
        "crash",
        "pricing",
        "others",
        "ui",
    ];
    let quality = [0.9, 0.2, 0.8, 0.7, 0.6, 0.5, 0.95, 0.4, 0.99, 0.3];
    let assignments: Vec<_> = topics
        .iter()
        .enumerate()
        .map(|(i, t)| Assignment {
            id: format!("e{i}"),
            topics: vec![t.to_string()],
        })
        .collect();
    let table: HashMap<String, f64> = topics
        .iter()
        .zip(quality)
        .map(|(t, q)| (t.to_string(), q))
        .fold(HashMap::new(), |mut m, (t, q)| {
            // equal topics carry equal quality in this fixture
            m.entry(t).or_insert(q);
            m
        });
    let index =
        ExtraDemoIndex::build(&model, &TableScorer(table.clone()), &records, &assignments).unwrap();
    assert_eq!(index.len(), 9, "the others-only item is not indexed");

    let target = "login screen keeps failing";
    let threshold = 0.5;
    let got = index
        .retrieve(&model, "target", target, 3, threshold)
        .unwrap();

    // Oracle: exhaustive scan over eligible items.
    let q = model.embed_one(target).unwrap();
    let mut eligible: Vec<(f64, String)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        if topics[i] == "others" || table[topics[i]] < threshold {
            continue;
        }
        let s = cosine(&q, &model.embed_one(&r.text).unwrap()).unwrap();
        eligible.push((s, r.id.clone()));
    }
    eligible.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let mut want: Vec<String> = eligible.iter().take(3).map(|(_, id)| id.clone()).collect();
    want.reverse();
    assert_eq!(got.iter().map(|d| d.id.clone()).collect::<Vec<_>>(), want);
    assert!(got.iter().all(|d| d.quality >= threshold));
    let weakest = got.first().unwrap().similarity;
    assert!(eligible.iter().skip(3).all(|(s, _)| *s <= weakest));
}
