use feedlens_server::config::Backend;
use feedlens_server::Config;

#[test]
fn full_file_parses_and_resolves_paths() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feedlens.toml");
    std::fs::write(
        &path,
        r#"
[gateway]
backend = "replay"
cassettes = "cassettes"
chat_model = "m1"
temperature = 0.2

[classify]
k = 30
seed = 7
dimensions = [{ name = "sentiment", labels = ["negative", "neutral", "positive"] }]

[topics]
predefined_topics = ["Feature request"]

[kernel]
command = ["python", "-m", "exec_kernel"]
timeout_secs = 10.0

[server]
port = 9000
token = "t"
data_dir = "data"
"#,
    )
    .unwrap();
    let c = Config::load(&path).unwrap();
    assert_eq!(c.gateway.backend, Backend::Replay);
    assert_eq!(
        c.gateway.cassettes.as_deref(),
        Some(dir.path().join("cassettes").as_path())
    );
    assert_eq!(c.server.data_dir, dir.path().join("data"));
    assert_eq!(c.gateway.chat_params().model, "m1");
    assert_eq!(c.classify.k, 30);
    assert_eq!(c.classify.dimensions[0].labels.len(), 3);
    assert_eq!(c.kernel.command[0], "python");
    assert_eq!(c.server.port, 9000);
}

#[test]
fn defaults_and_rejections() {
    let c = Config::parse("").unwrap();
    assert_eq!(c, Config::default());
    assert_eq!(c.classify.k, 10);
    assert_eq!(c.kernel.max_replans, 3);
    assert!(c.kernel.command.is_empty());

    for bad in [
        "[gateway]\nbackend = \"replay\"\n",
        "[classify]\ntest_fraction = 1.0\n",
        "[server]\nworkers = 0\n",
        "[kernel]\ntimeout_secs = 0.0\n",
        "[server]\nunknown = 1\n",
        "[gateway]\nbackend = \"carrier-pigeon\"\n",
    ] {
        assert!(Config::parse(bad).is_err(), "{bad}");
    }
}
