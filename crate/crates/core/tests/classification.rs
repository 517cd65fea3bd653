use std::path::PathBuf;

use feedlens_core::classify::{
    evaluate, split, Classifier, DemoPool, Dimension, EvalConfig, LabeledExample, SHOTS_RICH,
    SHOTS_SIMPLE,
};
use feedlens_core::llm::mock::ScriptedModel;
use feedlens_core::synth::labeled_corpus;
use feedlens_core::{EmbeddingVector, IndexBuilder, LanguageModel, Payload};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// Exhaustive scan: descending cosine, ties by id.
fn brute_force(entries: &[(String, Vec<f32>)], q: &[f32], k: usize) -> Vec<String> {
    let norm = |v: &[f32]| v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, &String)> = entries
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v
                .iter()
                .zip(q)
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            ((dot / (norm(v) * norm(q))).clamp(-1.0, 1.0), id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored
        .into_iter()
        .take(k)
        .map(|(_, id)| id.clone())
        .collect()
}

#[test]
fn fifty_entries_top5_matches_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dim = 24;
    let entries: Vec<(String, Vec<f32>)> = (0..50)
        .map(|i| {
            (
                format!("e{i:02}"),
                (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            )
        })
        .collect();
    let mut b = IndexBuilder::new();
    for (id, v) in &entries {
        b.add(
            id,
            EmbeddingVector::new(v.clone()).unwrap(),
            Payload::default(),
        )
        .unwrap();
    }
    let snap = b.finalize();
    for _ in 0..20 {
        let q: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let got: Vec<String> = snap
            .top_k(&EmbeddingVector::new(q.clone()).unwrap(), 5)
            .unwrap()
            .into_iter()
            .map(|h| h.id)
            .collect();
        assert_eq!(got, brute_force(&entries, &q, 5));
    }
}

fn binary_pool() -> Vec<LabeledExample> {
    labeled_corpus(&strings(&["informative", "non-informative"]), &[35, 25], 5)
}

fn dimension() -> Dimension {
    Dimension::new(
        "informativeness",
        &strings(&["informative", "non-informative"]),
        None,
    )
    .unwrap()
}

#[test]
fn demos_are_top_k_of_the_pool_most_similar_last() {
    let model = ScriptedModel::new(64);
    let pool_items = binary_pool();
    let pool = DemoPool::build(&model, &pool_items).unwrap();
    let classifier = Classifier::new(&model, &pool);
    let target = "informativealpha informativebeta crash after update";
    let demos = classifier.retrieve("target", target, SHOTS_SIMPLE).unwrap();

    let vectors: Vec<(String, Vec<f32>)> = pool_items
        .iter()
        .map(|e| {
            (
                e.id.clone(),
                model.embed_one(&e.text).unwrap().values().to_vec(),
            )
        })
        .collect();
    let q = model.embed_one(target).unwrap();
    let mut want = brute_force(&vectors, q.values(), SHOTS_SIMPLE);
    want.reverse();
    assert_eq!(demos.iter().map(|d| d.id.clone()).collect::<Vec<_>>(), want);
    assert!(demos.windows(2).all(|w| w[0].similarity <= w[1].similarity));
}

fn golden_path(k: usize) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("tests/golden/prompt_k{k}.txt"))
}

#[test]
fn prompts_match_golden_files() {
    let model = ScriptedModel::new(64);
    let pool = DemoPool::build(&model, &binary_pool()).unwrap();
    let classifier = Classifier::new(&model, &pool);
    let target = "The informativealpha screen freezes when I open settings";
    for k in [0, SHOTS_SIMPLE, SHOTS_RICH] {
        let bundle = classifier
            .build_prompt("target", target, &dimension(), k)
            .unwrap();
        assert_eq!(bundle.demonstrations.len(), k);
        let r = &bundle.rendered;
        let instr_end = r.find(&bundle.instruction).unwrap() + bundle.instruction.len();
        let target_at = r.rfind("Feedback to classify:").unwrap();
        for d in &bundle.demonstrations {
            let at = r.find(&d.text).unwrap();
            assert!(instr_end <= at && at < target_at);
        }
        let path = golden_path(k);
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            std::fs::write(&path, r).unwrap();
        }
        let golden = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            r,
            &golden,
            "prompt for k={k} differs from {}",
            path.display()
        );
    }
}

#[test]
fn nine_of_ten_correct() {
    // 34 examples give a 10-item test side
    let items = labeled_corpus(&strings(&["informative", "non-informative"]), &[20, 14], 2);
    let (_, test) = split(&items, 0.3, 9);
    assert_eq!(test.len(), 10);
    let mut model = ScriptedModel::new(32);
    for (i, ex) in test.iter().enumerate() {
        let wrong = if ex.label == "informative" {
            "non-informative"
        } else {
            "informative"
        };
        let answer = if i == 0 { wrong } else { ex.label.as_str() };
        model = model.rule(
            &format!("Feedback to classify:\nFeedback: {}\n", ex.text),
            answer,
        );
    }
    let cfg = EvalConfig {
        k: 4,
        seed: 9,
        test_fraction: 0.3,
        fold_top_n: None,
    };
    let report = evaluate(&model, &items, &dimension(), &cfg).unwrap();
    assert_eq!(
        (report.train_size, report.test_size, report.correct),
        (24, 10, 9)
    );
    assert_eq!(report.accuracy, 0.9);
}

#[test]
fn split_is_seeded_and_input_order_free() {
    let items = binary_pool();
    let (tr1, te1) = split(&items, 0.3, 1);
    let mut reversed = items.clone();
    reversed.reverse();
    let (tr2, te2) = split(&reversed, 0.3, 1);
    assert_eq!((&tr1, &te1), (&tr2, &te2));
    assert_eq!((tr1.len(), te1.len()), (42, 18));
    let (_, te3) = split(&items, 0.3, 2);
    assert_ne!(te1, te3);
}
