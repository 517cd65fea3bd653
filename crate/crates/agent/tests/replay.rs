use std::sync::Arc;

use feedlens_agent::demo::{bundled_cassettes, render_response, run_case, REPLAY_CASES};
use feedlens_agent::kernel::ArtifactKind;
use feedlens_agent::questions::QuestionKind;
use feedlens_agent::TurnStatus;
use feedlens_core::llm::cassette::{Cassette, Replay};
use feedlens_core::llm::mock::Counting;

#[test]
fn recorded_sessions_replay_byte_for_byte() {
    let kinds: Vec<QuestionKind> = REPLAY_CASES.iter().map(|c| c.kind).collect();
    assert_eq!(
        kinds,
        [
            QuestionKind::Analysis,
            QuestionKind::Figure,
            QuestionKind::Suggestion
        ]
    );
    for case in &REPLAY_CASES {
        let path = bundled_cassettes().join(format!("{}.jsonl", case.name));
        let expected = std::fs::read_to_string(
            bundled_cassettes().join(format!("{}.expected.json", case.name)),
        )
        .unwrap();
        let recorded = Cassette::load(&path).unwrap().len();
        let mut renders = Vec::new();
        for _ in 0..2 {
            let model = Arc::new(Counting::new(Replay::open(&path, "none").unwrap()));
            let dir = tempfile::tempdir().unwrap();
            let (resp, workspace) = run_case(model.clone(), case, dir.path()).unwrap();
            assert_eq!(resp.status, TurnStatus::Answered, "{}", case.name);
            // every recorded exchange is used once
            assert_eq!(model.chat_count(), recorded, "{}", case.name);
            for a in &resp.artifacts {
                assert!(
                    workspace.join(&a.path).is_file(),
                    "{}: {}",
                    case.name,
                    a.path
                );
            }
            renders.push(render_response(&resp));
        }
        assert_eq!(
            renders[0], renders[1],
            "{}: replay is not stable",
            case.name
        );
        assert_eq!(
            renders[0], expected,
            "{}: replay differs from the recording",
            case.name
        );
    }
}

#[test]
fn figure_session_yields_an_image() {
    let case = &REPLAY_CASES[1];
    let model = Arc::new(Replay::open(&bundled_cassettes().join("figure.jsonl"), "none").unwrap());
    let dir = tempfile::tempdir().unwrap();
    let (resp, workspace) = run_case(model, case, dir.path()).unwrap();
    let img = &resp.artifacts[0];
    assert_eq!(img.kind, ArtifactKind::Image);
    let svg = std::fs::read_to_string(workspace.join(&img.path)).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn changed_prompt_misses_the_cassette() {
    let mut case = REPLAY_CASES[0];
    case.question = "Which topic appears least frequently?";
    let model =
        Arc::new(Replay::open(&bundled_cassettes().join("analysis.jsonl"), "none").unwrap());
    let dir = tempfile::tempdir().unwrap();
    let err = run_case(model, &case, dir.path()).unwrap_err();
    assert!(err.to_string().contains("cassette"), "{err}");
}
