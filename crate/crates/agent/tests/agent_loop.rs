mod common;

use std::sync::Arc;

use common::{agent, code, fixture, plan_json};
use feedlens_agent::planner::{Judgement, StepStatus};
use feedlens_agent::session::turn_call_budget;
use feedlens_agent::TurnStatus;
use feedlens_core::llm::mock::ScriptedModel;
use proptest::prelude::*;

const GOOD: &str = "top = topic_counts(df, top_n=3)\nsave_table(top, \"top_topics.csv\", caption=\"Top topics\")\ntop";
const NAME_ERROR: &str = "top = topic_count(df, top_n=3)";

fn last_text(req: &feedlens_core::ChatRequest) -> String {
    req.messages
        .last()
        .map(|m| m.content.clone())
        .unwrap_or_default()
}

#[test]
fn one_repair_then_answer() {
    let model = Arc::new(
        ScriptedModel::new(8)
            .rule("## Failed attempt", code(GOOD))
            .rule("## Task", code(NAME_ERROR))
            .rule(
                "You plan analyses",
                plan_json(&["Count topics and save the three most common"]),
            )
            .rule("Decide whether", "satisfied")
            .rule(
                "Answer the user's question",
                "Crash is the most common topic.",
            ),
    );
    let fx = fixture();
    let mut s = fx.session("loop-a");
    let resp = agent(model.clone())
        .ask(&mut s, "Which topics are most common?")
        .unwrap();

    assert_eq!(resp.status, TurnStatus::Answered);
    assert_eq!(resp.text, "Crash is the most common topic.");
    // plan, generate, repair, judge, summarize; one step means no reflection call
    assert_eq!(model.chat_count(), 5);
    let trace = s.last_trace().unwrap();
    assert_eq!(trace.queries.len(), 1);
    let attempts = &trace.queries[0].1;
    assert_eq!(attempts.len(), 2);
    let failure = attempts[0].failure.clone().expect("first attempt failed");
    assert!(failure.contains("NameError"), "{failure}");

    let repair = model
        .calls()
        .into_iter()
        .map(|r| last_text(&r))
        .find(|t| t.contains("## Failed attempt"))
        .unwrap();
    assert!(
        repair.contains(&failure),
        "repair prompt must quote the failure verbatim"
    );
    assert!(repair.contains(NAME_ERROR));

    assert_eq!(resp.artifacts.len(), 1);
    let a = &resp.artifacts[0];
    assert_eq!(a.path, "top_topics.csv");
    let token = a.url.as_ref().unwrap().strip_prefix("/artifacts/").unwrap();
    let entry = fx.registry.resolve(token).unwrap();
    assert_eq!(entry.session_id, "loop-a");
    assert!(entry.path.starts_with(fx.workspace()));
    assert_eq!(entry.content_type, "text/csv");
    assert!(resp.code_shown.unwrap().contains("topic_counts"));
    assert_eq!(s.history().len(), 1);
}

#[test]
fn exhausted_repairs_trigger_one_replan() {
    let model = Arc::new(
        ScriptedModel::new(8)
            .rule("Decide whether", "satisfied")
            .rule("Answer the user's question", "Done.")
            .rule(
                "## Previous attempt",
                plan_json(&["Count topics via the supported helper"]),
            )
            .rule("via the supported helper", code(GOOD))
            .rule("## Task", code(NAME_ERROR))
            .rule(
                "You plan analyses",
                plan_json(&["Count topics the hard way"]),
            ),
    );
    let fx = fixture();
    let mut s = fx.session("loop-b");
    let resp = agent(model.clone())
        .ask(&mut s, "Which topics are most common?")
        .unwrap();

    assert_eq!(resp.status, TurnStatus::Answered);
    let trace = s.last_trace().unwrap();
    assert_eq!(trace.plans.len(), 2);
    assert_eq!(trace.plans[0].steps[0].status, StepStatus::Failed);
    assert_eq!(trace.plans[1].revision, 1);
    assert_eq!(trace.plans[1].steps[0].status, StepStatus::Done);
    assert_eq!(trace.queries[0].1.len(), 3);
    assert_eq!(trace.queries[1].1.len(), 1);
    assert!(matches!(trace.judgements[1], Judgement::Replan(_)));
    // plan, 3 attempts, replan, generate, judge, summarize
    assert_eq!(model.chat_count(), 8);
    assert_eq!(s.plan().unwrap().revision, 1);
}

#[test]
fn replan_budget_exhaustion_fails_the_turn() {
    let model = Arc::new(
        ScriptedModel::new(8)
            .rule("## Task", code(NAME_ERROR))
            .rule("You plan analyses", plan_json(&["Count topics"]))
            .rule("Answer the user's question", "unused"),
    );
    let fx = fixture();
    let mut s = fx.session("loop-c");
    let a = agent(model.clone());
    let budget = turn_call_budget(a.planner.max_replans, 1);
    let resp = a.ask(&mut s, "Which topics are most common?").unwrap();
    assert_eq!(resp.status, TurnStatus::Failed);
    assert!(resp.text.contains("replan"), "{}", resp.text);
    let trace = s.last_trace().unwrap();
    assert_eq!(trace.plans.len(), a.planner.max_replans as usize + 1);
    assert!(model.chat_count() <= budget);
    assert_eq!(s.history().len(), 1);
}

#[test]
fn clarification_ends_the_turn_early() {
    let model = Arc::new(ScriptedModel::new(8).rule(
        "You plan analyses",
        "```json\n{\"clarify\": \"Which time range do you mean?\"}\n```",
    ));
    let fx = fixture();
    let mut s = fx.session("loop-d");
    let resp = agent(model.clone())
        .ask(&mut s, "How did it change recently?")
        .unwrap();
    assert_eq!(resp.status, TurnStatus::ClarificationNeeded);
    assert_eq!(resp.text, "Which time range do you mean?");
    assert_eq!(model.chat_count(), 1);
}

#[test]
fn judge_can_ask_for_clarification() {
    let model = Arc::new(
        ScriptedModel::new(8)
            .rule("## Task", code(GOOD))
            .rule("You plan analyses", plan_json(&["Count topics"]))
            .rule("Decide whether", "clarify: Per source or overall?"),
    );
    let fx = fixture();
    let mut s = fx.session("loop-e");
    let resp = agent(model)
        .ask(&mut s, "Which topics are most common?")
        .unwrap();
    assert_eq!(resp.status, TurnStatus::ClarificationNeeded);
    assert_eq!(resp.text, "Per source or overall?");
    // the step's output still reaches the user
    assert_eq!(resp.artifacts.len(), 1);
}

#[test]
fn reflection_merges_a_chain() {
    let model = Arc::new(
        ScriptedModel::new(8)
            .rule("Review this analysis plan", "```json\n[0, 1]\n```")
            .rule(
                "## Task",
                code("login = filter_rows(df, \"topics\", \"login\")\nlen(login)"),
            )
            .rule(
                "You plan analyses",
                plan_json(&["Select login records", "Count them", "Save a sample"]),
            )
            .rule("Decide whether", "satisfied")
            .rule("Answer the user's question", "ok"),
    );
    let fx = fixture();
    let mut s = fx.session("loop-f");
    agent(model.clone())
        .ask(&mut s, "How many login complaints are there?")
        .unwrap();
    let plan = s.plan().unwrap();
    assert_eq!(plan.steps.len(), 2);
    assert_eq!(
        plan.steps[0].description,
        "Select login records; then Count them"
    );
    assert_eq!(plan.steps[1].depends_on, vec![0]);
    assert!(plan.is_acyclic());
}

#[test]
fn missing_code_block_twice_fails_the_step() {
    let model = Arc::new(
        ScriptedModel::new(8)
            .rule("## Task", "I would count the topics.")
            .rule("did not contain a code block", "Still no code.")
            .rule("You plan analyses", plan_json(&["Count topics"]))
            .fallback("Still no code."),
    );
    let fx = fixture();
    let mut s = fx.session("loop-g");
    let a = agent(model.clone()).with_max_replans(0);
    let resp = a.ask(&mut s, "Which topics are most common?").unwrap();
    assert_eq!(resp.status, TurnStatus::Failed);
    let trace = s.last_trace().unwrap();
    assert_eq!(trace.plans[0].steps[0].status, StepStatus::Failed);
    assert!(trace.plans[0].steps[0]
        .failure
        .as_deref()
        .unwrap()
        .contains("code block"));
    // plan, generate, one re-ask
    assert_eq!(model.chat_count(), 3);
}

#[test]
fn history_carries_into_the_next_plan() {
    let model = Arc::new(
        ScriptedModel::new(8)
            .rule("## Task", code(GOOD))
            .rule("You plan analyses", plan_json(&["Count topics"]))
            .rule("Decide whether", "satisfied")
            .rule("Answer the user's question", "Crash leads."),
    );
    let fx = fixture();
    let mut s = fx.session("loop-h");
    let a = agent(model.clone());
    a.ask(&mut s, "Which topics are most common?").unwrap();
    a.ask(&mut s, "And the least common?").unwrap();
    assert_eq!(s.history().len(), 2);
    let second_plan = model
        .calls()
        .into_iter()
        .map(|r| last_text(&r))
        .filter(|t| t.starts_with("You plan analyses"))
        .nth(1)
        .unwrap();
    assert!(second_plan.contains("Which topics are most common?"));
    assert!(second_plan.contains("Crash leads."));
}

#[test]
fn closing_revokes_artifact_urls() {
    let model = Arc::new(
        ScriptedModel::new(8)
            .rule("## Task", code(GOOD))
            .rule("You plan analyses", plan_json(&["Count topics"]))
            .rule("Decide whether", "satisfied")
            .rule("Answer the user's question", "ok"),
    );
    let fx = fixture();
    let mut s = fx.session("loop-i");
    let resp = agent(model)
        .ask(&mut s, "Which topics are most common?")
        .unwrap();
    let token = resp.artifacts[0]
        .url
        .as_ref()
        .unwrap()
        .trim_start_matches("/artifacts/")
        .to_string();
    assert!(fx.registry.resolve(&token).is_some());
    assert_ne!(token, fx.registry.token("other-session", "top_topics.csv"));
    s.close();
    assert!(fx.registry.resolve(&token).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Any mix of failing and working replies stays inside the call budget,
    /// and every turn lands in the history exactly once.
    #[test]
    fn turns_are_bounded(
        steps in 1usize..4,
        gen_fail in proptest::collection::vec(any::<bool>(), 1..6),
        judge_ok in any::<bool>(),
        max_replans in 0u32..3,
        turns in 1usize..3,
    ) {
        let names: Vec<String> = (0..steps).map(|i| format!("Step {i}")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let gens: Vec<String> = gen_fail.iter().map(|&f| code(if f { NAME_ERROR } else { GOOD })).collect();
        let model = Arc::new(
            ScriptedModel::new(8)
                .rule("Review this analysis plan", "[]")
                .sequence("## Failed attempt", gens.clone())
                .sequence("## Task", gens)
                .rule("You plan analyses", plan_json(&refs))
                .rule("Decide whether", if judge_ok { "satisfied" } else { "replan: not enough" })
                .rule("Answer the user's question", "ok"),
        );
        let fx = fixture();
        let mut s = fx.session("prop");
        let a = agent(model.clone()).with_max_replans(max_replans);
        let budget = turn_call_budget(max_replans, steps);
        for t in 0..turns {
            let before = model.chat_count();
            let resp = a.ask(&mut s, "Which topics are most common?").unwrap();
            let used = model.chat_count() - before;
            prop_assert!(used <= budget, "turn used {} calls, budget {}", used, budget);
            prop_assert_eq!(s.history().len(), t + 1);
            prop_assert!(resp.status != TurnStatus::ClarificationNeeded);
        }
    }
}
