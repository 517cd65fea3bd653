use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use feedlens_agent::demo::{bundled_cassettes, DEMO_RECORDS, DEMO_SEED, REPLAY_CASES};
use feedlens_core::llm::cassette::Recorder;
use feedlens_core::llm::mock::ScriptedModel;
use feedlens_core::llm::DEFAULT_EMBED_MODEL;
use feedlens_core::store::RecordStore;
use feedlens_core::synth::review_samples;
use feedlens_server::cli::{run, EXIT_DOMAIN, EXIT_OK, EXIT_USAGE};
use feedlens_server::{App, Config};

fn feedlens(config: &Path, args: &[&str]) -> (i32, String, String) {
    let mut argv = vec![
        "feedlens".to_string(),
        "--config".into(),
        config.display().to_string(),
    ];
    argv.extend(args.iter().map(|s| s.to_string()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

/// The review corpus persisted the way the demo builds it in memory.
fn persist_reviews(path: &Path, n: usize, seed: u64) {
    let samples = review_samples(n, seed);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let store = RecordStore::open(path).unwrap();
    store
        .declare_dimension(
            "sentiment",
            &["negative".into(), "neutral".into(), "positive".into()],
        )
        .unwrap();
    store
        .insert_records(samples.iter().map(|s| s.record.clone()).collect())
        .unwrap();
    let labels: Vec<(String, String)> = samples
        .iter()
        .map(|s| (s.record.id.clone(), s.sentiment.clone()))
        .collect();
    store.annotate_many(&labels, "sentiment").unwrap();
    let topics: Vec<(String, Vec<String>)> = samples
        .iter()
        .map(|s| (s.record.id.clone(), s.topics.clone()))
        .collect();
    store.set_topics_many(&topics, 2).unwrap();
}

fn write_config(dir: &Path, gateway: &str) -> std::path::PathBuf {
    let path = dir.join("feedlens.toml");
    std::fs::write(
        &path,
        format!(
            "[server]\ndata_dir = \"data\"\nartifact_secret = \"cli\"\n\n[gateway]\n{gateway}\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let (code, _, err) = feedlens(&config, &["frobnicate"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("frobnicate"), "{err}");
    assert_eq!(feedlens(&config, &["classify"]).0, EXIT_USAGE);
    assert_eq!(feedlens(&config, &["ask", "--one-shot"]).0, EXIT_USAGE);
    let (code, out, _) = feedlens(&config, &["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("topics"));
}

#[test]
fn domain_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let (code, _, err) = feedlens(&config, &["classify", "--dimension", "nope"]);
    assert_eq!(code, EXIT_DOMAIN);
    assert!(err.contains("nope"), "{err}");
    assert_eq!(feedlens(&config, &["topics", "candidates"]).0, EXIT_DOMAIN);
    assert_eq!(feedlens(&config, &["ingest", "missing.csv"]).0, EXIT_DOMAIN);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[server]\nworkers = 0\n").unwrap();
    assert_eq!(feedlens(&bad, &["eval", "topics"]).0, EXIT_DOMAIN);
    std::fs::write(&bad, "[server]\nnot_a_key = 1\n").unwrap();
    assert_eq!(feedlens(&bad, &["eval", "topics"]).0, EXIT_DOMAIN);
}

#[test]
fn ingest_then_eval_topics() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let file = dir.path().join("feedback.jsonl");
    std::fs::write(
        &file,
        "{\"id\":\"a\",\"text\":\"app crashes\",\"timestamp\":\"2024-05-01T10:00:00Z\"}\n{\"id\":\"b\",\"text\":\"great\",\"timestamp\":\"2024-05-01T11:00:00Z\"}\n",
    )
    .unwrap();
    let (code, out, err) = feedlens(&config, &["ingest", file.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(
        serde_json::from_str::<serde_json::Value>(&out).unwrap()["accepted"],
        2
    );
    // the store log survives the process
    assert_eq!(
        RecordStore::open(dir.path().join("data/store.jsonl"))
            .unwrap()
            .len(),
        2
    );
    let (code, out, _) = feedlens(&config, &["eval", "topics"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(
        serde_json::from_str::<serde_json::Value>(&out).unwrap()["records"],
        0
    );
}

#[test]
fn one_shot_ask_under_replay_prints_answer_and_artifact_paths() {
    let dir = tempfile::tempdir().unwrap();
    persist_reviews(
        &dir.path().join("data/store.jsonl"),
        DEMO_RECORDS,
        DEMO_SEED,
    );
    let gateway = format!(
        "backend = \"replay\"\ncassettes = \"{}\"",
        bundled_cassettes().display()
    );
    let config = write_config(dir.path(), &gateway);
    let case = &REPLAY_CASES[0];
    let expected: serde_json::Value = serde_json::from_slice(
        &std::fs::read(bundled_cassettes().join(format!("{}.expected.json", case.name))).unwrap(),
    )
    .unwrap();

    let (code, out, err) = feedlens(&config, &["ask", "--one-shot", case.question]);
    assert_eq!(code, EXIT_OK, "{err}");
    let mut lines = out.lines();
    assert_eq!(lines.next().unwrap(), expected["text"].as_str().unwrap());
    let artifact = lines.next().unwrap();
    let path = artifact
        .strip_prefix("artifact: ")
        .unwrap()
        .split(" (")
        .next()
        .unwrap();
    assert!(path.ends_with("topic_counts.csv"), "{artifact}");
    assert!(Path::new(path).is_file());
    assert!(std::fs::read_to_string(path)
        .unwrap()
        .starts_with("topic,count"));

    // a question the cassette never saw is a gateway miss
    let (code, _, err) = feedlens(&config, &["ask", "--one-shot", "What is the weather?"]);
    assert_eq!(code, EXIT_DOMAIN, "{err}");
}

#[test]
fn eval_classify_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let store_path = dir.path().join("data/store.jsonl");
    persist_reviews(&store_path, 80, 4);
    let cassette = dir.path().join("eval.jsonl");

    // Record once against a scripted gateway that knows every record.
    {
        let mut scripted = ScriptedModel::new(32).fallback("neutral");
        for s in review_samples(80, 4).iter().step_by(2) {
            scripted = scripted.rule(
                &format!("Feedback to classify:\nFeedback: {}\n", s.record.text),
                s.sentiment.clone(),
            );
        }
        let recorder = Recorder::new(scripted, &cassette, DEFAULT_EMBED_MODEL).unwrap();
        let mut c = Config::default();
        c.server.data_dir = dir.path().join("data");
        let app = App::with_parts(
            c,
            Arc::new(recorder),
            RecordStore::open(&store_path).unwrap(),
        )
        .unwrap();
        let id = app
            .start_eval_classify("sentiment", Some(4), Some(7))
            .unwrap();
        assert_eq!(
            format!("{:?}", app.wait_job(&id).unwrap().state),
            "Succeeded"
        );
        app.shutdown();
    }

    let gateway = format!(
        "backend = \"replay\"\ncassettes = \"{}\"",
        cassette.display()
    );
    let config = write_config(dir.path(), &gateway);
    let args = [
        "eval",
        "classify",
        "--dimension",
        "sentiment",
        "--k",
        "4",
        "--seed",
        "7",
    ];
    let (code, first, err) = feedlens(&config, &args);
    assert_eq!(code, EXIT_OK, "{err}");
    let (_, second, _) = feedlens(&config, &args);
    assert_eq!(first, second);
    let report: serde_json::Value = serde_json::from_str(&first).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!(acc > 0.0 && acc < 1.0, "{report}");
    // another seed draws another split the cassette never saw
    let (code, _, _) = feedlens(
        &config,
        &[
            "eval",
            "classify",
            "--dimension",
            "sentiment",
            "--k",
            "4",
            "--seed",
            "8",
        ],
    );
    assert_eq!(code, EXIT_DOMAIN);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_feedlens");
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let status = Command::new(bin)
        .args(["--config", config.to_str().unwrap(), "nonsense"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_USAGE));
    let status = Command::new(bin)
        .args(["--config", config.to_str().unwrap(), "eval", "topics"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_OK));
    let status = Command::new(bin)
        .args([
            "--config",
            config.to_str().unwrap(),
            "eval",
            "classify",
            "--dimension",
            "x",
        ])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_DOMAIN));
}
