//! The same protocol checks run against the in-process stub and against the
//! stub served from a child process.

use std::path::{Path, PathBuf};

use feedlens_agent::kernel::process::ProcessKernel;
use feedlens_agent::kernel::stub::StubKernel;
use feedlens_agent::kernel::{
    ArtifactKind, ExecStatus, Executor, InitSpec, KernelError, PluginManifestEntry,
    DEFAULT_QUOTA_BYTES, DEFAULT_TIMEOUT_SECS,
};

const SNAPSHOT: &str = "\
id,text,timestamp,language,source,label.sentiment,topics,topic_round
r1,App crashes on login,2024-03-01T08:00:00Z,en,store,negative,crash; login,2
r2,Love the new dark mode,2024-03-01T09:30:00Z,en,store,positive,ui,2
r3,Crash after the update,2024-03-02T10:00:00Z,en,forum,negative,crash,2
r4,Login takes forever,2024-03-03T11:00:00Z,en,forum,negative,login; performance,2
r5,Fine overall,2024-03-03T12:00:00Z,en,store,neutral,others,2
";

fn plugins() -> Vec<PluginManifestEntry> {
    vec![
        PluginManifestEntry {
            name: "issue_river".into(),
            module: "feedlens.plugins.issue_river".into(),
        },
        PluginManifestEntry {
            name: "word_cloud".into(),
            module: "feedlens.plugins.word_cloud".into(),
        },
    ]
}

fn setup(dir: &Path) -> InitSpec {
    let snap = dir.join("snapshot.csv");
    std::fs::write(&snap, SNAPSHOT).unwrap();
    InitSpec::new(snap, dir.join("ws")).with_plugins(plugins())
}

fn stub() -> StubKernel {
    StubKernel::new()
}

fn process() -> ProcessKernel {
    ProcessKernel::new(env!("CARGO_BIN_EXE_feedlens-stub-kernel"), Vec::new())
}

macro_rules! conformance {
    ($($name:ident),* $(,)?) => {
        mod in_process {
            $(#[test] fn $name() { super::$name(&mut super::stub()); })*
        }
        mod child_process {
            $(#[test] fn $name() { super::$name(&mut super::process()); })*
        }
    };
}

conformance!(
    init_reports_defaults_and_ready,
    missing_snapshot_is_reported,
    unknown_plugin_is_named,
    state_persists_between_cells,
    logs_and_output_are_separate,
    exceptions_carry_a_traceback,
    network_imports_are_violations,
    process_spawning_is_a_violation,
    writes_outside_workspace_are_violations,
    dynamic_execution_is_a_violation,
    tables_and_images_become_artifacts,
    reset_clears_state_but_keeps_artifacts,
    unknown_sessions_are_errors,
    sleeping_past_the_limit_times_out,
    dry_parse_runs_nothing,
    quota_is_enforced,
    helpers_compute_counts,
);

fn tmp() -> (tempfile::TempDir, PathBuf) {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().to_path_buf();
    (d, p)
}

fn init_reports_defaults_and_ready<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    let spec = setup(&dir);
    assert_eq!(spec.timeout_secs, DEFAULT_TIMEOUT_SECS);
    assert_eq!(spec.quota_bytes, DEFAULT_QUOTA_BYTES);
    assert_eq!(k.init("s1", &spec).unwrap(), vec![]);
    assert!(dir.join("ws").is_dir());
    assert!(matches!(
        k.init("s1", &spec),
        Err(KernelError::SessionExists(_))
    ));
}

fn missing_snapshot_is_reported<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    let spec = InitSpec::new(dir.join("nope.csv"), dir.join("ws"));
    assert!(
        matches!(k.init("s1", &spec), Err(KernelError::SnapshotMissing(p)) if p.ends_with("nope.csv"))
    );
}

fn unknown_plugin_is_named<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    let mut spec = setup(&dir);
    spec.plugins.push(PluginManifestEntry {
        name: "sankey".into(),
        module: "acme.sankey".into(),
    });
    match k.init("s1", &spec) {
        Err(KernelError::PluginLoadError { plugin, reason }) => {
            assert_eq!(plugin, "sankey");
            assert!(reason.contains("acme.sankey"), "{reason}");
        }
        other => panic!("expected PluginLoadError, got {other:?}"),
    }
}

fn state_persists_between_cells<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    k.init("s", &setup(&dir)).unwrap();
    assert!(k.execute("s", "c1", "x = len(df)").unwrap().is_ok());
    let r = k.execute("s", "c2", "x * 2").unwrap();
    assert_eq!(r.output, "10");
}

fn logs_and_output_are_separate<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    k.init("s", &setup(&dir)).unwrap();
    let r = k
        .execute("s", "c1", "print('rows', len(df))\nf'{3/4:.1%}'")
        .unwrap();
    assert_eq!(r.logs, "rows 5\n");
    assert_eq!(r.output, "'75.0%'");
}

fn exceptions_carry_a_traceback<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    k.init("s", &setup(&dir)).unwrap();
    let r = k.execute("s", "c1", "a = 1\nb = a / 0").unwrap();
    assert_eq!(r.status, ExecStatus::Error);
    let ex = r.exception.unwrap();
    assert!(ex.starts_with("Traceback (most recent call last):"), "{ex}");
    assert!(ex.contains("line 2"), "{ex}");
    assert!(ex.ends_with("ZeroDivisionError: division by zero"), "{ex}");
    let r = k.execute("s", "c2", "df['missing']").unwrap();
    assert!(r.exception.unwrap().ends_with("KeyError: 'missing'"));
}

fn network_imports_are_violations<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    k.init("s", &setup(&dir)).unwrap();
    for code in [
        "import socket",
        "import urllib.request",
        "from requests import get",
    ] {
        let r = k.execute("s", "c", code).unwrap();
        assert_eq!(r.status, ExecStatus::Violation, "{code}");
        assert!(r.violation.unwrap().starts_with("NetworkAccess"));
        assert!(r.exception.is_none());
    }
}

fn process_spawning_is_a_violation<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    k.init("s", &setup(&dir)).unwrap();
    for code in [
        "import subprocess",
        "import os\nos.system('ls')",
        "from os import popen",
    ] {
        let r = k.execute("s", "c", code).unwrap();
        assert_eq!(r.status, ExecStatus::Violation, "{code}");
        assert!(r.violation.unwrap().starts_with("ProcessSpawn"));
    }
}

fn writes_outside_workspace_are_violations<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    k.init("s", &setup(&dir)).unwrap();
    for code in [
        "open('/tmp/x.txt', 'w')",
        "save_text('hi', '../escape.txt')",
        "open('/etc/passwd')",
    ] {
        let r = k.execute("s", "c", code).unwrap();
        assert_eq!(r.status, ExecStatus::Violation, "{code}");
        assert!(r.violation.unwrap().starts_with("FilesystemEscape"));
    }
    assert!(!dir.join("escape.txt").exists());
    // the snapshot itself may be read
    let snap = dir.join("snapshot.csv");
    let r = k
        .execute(
            "s",
            "c",
            &format!(
                "import pandas as pd\nlen(pd.read_csv('{}'))",
                snap.display()
            ),
        )
        .unwrap();
    assert_eq!(r.output, "5");
}

fn dynamic_execution_is_a_violation<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    k.init("s", &setup(&dir)).unwrap();
    let r = k.execute("s", "c", "eval('1+1')").unwrap();
    assert_eq!(r.status, ExecStatus::Violation);
}

fn tables_and_images_become_artifacts<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    k.init("s", &setup(&dir)).unwrap();
    let r = k
        .execute("s", "c1", "t = topic_counts(df)\nsave_table(t, 'out/topics.csv', caption='Topic counts')\nissue_river(df)")
        .unwrap();
    assert!(r.is_ok(), "{r:?}");
    let kinds: Vec<(ArtifactKind, &str)> = r
        .artifacts
        .iter()
        .map(|a| (a.kind, a.path.as_str()))
        .collect();
    assert_eq!(
        kinds,
        [
            (ArtifactKind::Table, "out/topics.csv"),
            (ArtifactKind::Image, "issue_river.svg")
        ]
    );
    assert_eq!(r.artifacts[0].caption.as_deref(), Some("Topic counts"));
    let csv = std::fs::read_to_string(dir.join("ws/out/topics.csv")).unwrap();
    assert!(csv.starts_with("topic,count\ncrash,2\nlogin,2\n"), "{csv}");
    // a later cell only reports what it touched
    let r = k
        .execute("s", "c2", "word_cloud(df, path='cloud.svg')")
        .unwrap();
    assert_eq!(r.artifacts.len(), 1);
    assert_eq!(r.artifacts[0].path, "cloud.svg");
}

fn reset_clears_state_but_keeps_artifacts<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    k.init("s", &setup(&dir)).unwrap();
    k.execute("s", "c1", "x = 1\nsave_text('note', 'note.txt')")
        .unwrap();
    let listed = k.reset("s").unwrap();
    assert_eq!(
        listed.iter().map(|a| a.path.as_str()).collect::<Vec<_>>(),
        ["note.txt"]
    );
    let r = k.execute("s", "c2", "x").unwrap();
    assert!(r
        .exception
        .unwrap()
        .ends_with("NameError: name 'x' is not defined"));
    assert_eq!(k.execute("s", "c3", "len(df)").unwrap().output, "5");
}

fn unknown_sessions_are_errors<E: Executor>(k: &mut E) {
    assert!(
        matches!(k.execute("ghost", "c", "1"), Err(KernelError::UnknownSession(s)) if s == "ghost")
    );
    assert!(matches!(
        k.reset("ghost"),
        Err(KernelError::UnknownSession(_))
    ));
    let (_d, dir) = tmp();
    k.init("s", &setup(&dir)).unwrap();
    k.shutdown("s").unwrap();
    assert!(matches!(
        k.execute("s", "c", "1"),
        Err(KernelError::UnknownSession(_))
    ));
}

fn sleeping_past_the_limit_times_out<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    k.init("s", &setup(&dir).with_timeout(0.3)).unwrap();
    let r = k
        .execute("s", "c", "import time\nprint('start')\ntime.sleep(5)")
        .unwrap();
    assert_eq!(r.status, ExecStatus::Timeout);
    assert_eq!(r.logs, "start\n");
}

fn dry_parse_runs_nothing<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    k.init("s", &setup(&dir)).unwrap();
    assert!(k.dry_parse("s", "p1", "y = 5").unwrap().is_ok());
    let r = k.execute("s", "c", "y").unwrap();
    assert_eq!(r.status, ExecStatus::Error);
    let r = k.dry_parse("s", "p2", "y = = 5").unwrap();
    assert!(r.exception.unwrap().starts_with("SyntaxError"));
}

fn quota_is_enforced<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    let mut spec = setup(&dir);
    spec.quota_bytes = 100;
    k.init("s", &spec).unwrap();
    assert!(k
        .execute("s", "c1", "save_text('x' * 60, 'a.txt')")
        .unwrap()
        .is_ok());
    let r = k
        .execute("s", "c2", "save_text('x' * 60, 'b.txt')")
        .unwrap();
    assert!(r.exception.unwrap().contains("Disk quota exceeded"));
    assert!(!dir.join("ws/b.txt").exists());
}

fn helpers_compute_counts<E: Executor>(k: &mut E) {
    let (_d, dir) = tmp();
    k.init("s", &setup(&dir)).unwrap();
    let r = k
        .execute("s", "c", "count_by(df, 'label.sentiment')")
        .unwrap();
    assert_eq!(r.output, "   label.sentiment  count\n0         negative      3\n1          neutral      1\n2         positive      1");
    let r = k
        .execute(
            "s",
            "c",
            "len(filter_time(filter_rows(df, 'topics', 'Crash'), start='2024-03-02'))",
        )
        .unwrap();
    assert_eq!(r.output, "1");
    let r = k
        .execute(
            "s",
            "c",
            "m = mean_by(df, 'source', 'label.sentiment')\nm['mean']",
        )
        .unwrap();
    assert_eq!(r.output, "[0.0, -1.0]");
}
