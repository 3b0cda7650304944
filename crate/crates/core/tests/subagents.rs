mod common;

use std::sync::atomic::Ordering;
use std::sync::Arc;

use serde_json::json;

use common::*;
use modelsmith::digest::content_digest;
use modelsmith::provider::Message;
use modelsmith::subagents::{run_coder, run_designer, run_tuner, ReportStatus, SubAgentKind};
use modelsmith::workspace::{read_manifest, Direction, RepoStatus};

const PLAN: &str = "# Plan\n\nLinear regression on x with an intercept.\n";

fn write(path: &str, content: &str) -> modelsmith::provider::ToolCall {
    call("write", json!({"path": path, "content": content}))
}

fn exec(command: &str) -> modelsmith::provider::ToolCall {
    call("execute", json!({"command": command}))
}

#[test]
fn designer_writes_plan_into_empty_repo() {
    let script = Script::new()
        .turn("designer_1", "Drafting.", vec![write("plan.md", PLAN)])
        .turn("designer_1", "Plan written.", vec![]);
    let h = Harness::new(config(1), &script);
    let report = run_designer(&h.ctx, 1, far());
    assert_eq!(report.status, ReportStatus::Ok, "{}", report.summary);
    assert_eq!(report.provider_calls, 2);
    let plan = std::fs::read(h.repo(1).root().join("plan.md")).unwrap();
    assert_eq!(content_digest(plan), content_digest(PLAN));
    assert_eq!(report.artifacts_touched, vec!["plan.md".to_string()]);
    assert!(h.repo(1).lease_holder().is_none());
}

#[test]
fn designer_revises_plan_after_results() {
    let revised = format!("{PLAN}\n## Revision\n\nValidation rmse worsened to 0.6; add a quadratic term.\n");
    let script = Script::new()
        .turn("designer_1", "Reading results.", vec![call("read", json!({"path": "result/manifest"}))])
        .turn("designer_1", "Revising.", vec![write("plan.md", &revised)])
        .turn("designer_1", "Revised.", vec![]);
    let h = Harness::new(config(1), &script);
    put(h.repo(1), "plan.md", PLAN);
    put(h.repo(1), "result/manifest", &manifest_text("rmse", 0.60, "lower", None));
    let before = content_digest(PLAN);
    let report = run_designer(&h.ctx, 1, far());
    assert_eq!(report.status, ReportStatus::Ok, "{}", report.summary);
    let after = std::fs::read_to_string(h.repo(1).root().join("plan.md")).unwrap();
    assert_ne!(content_digest(&after), before);
    assert!(after.contains("## Revision"));
    // The revision request told the designer about the existing results.
    let first = h.exchanges("designer_1")[0].request().unwrap();
    assert!(first.messages[1].content().contains("## Revision"));
}

#[test]
fn designer_revision_without_section_fails_verification() {
    let script = Script::new()
        .turn("designer_1", "Rewriting.", vec![write("plan.md", "# Plan\n\nSomething else.\n")])
        .turn("designer_1", "Done.", vec![]);
    let h = Harness::new(config(1), &script);
    put(h.repo(1), "plan.md", PLAN);
    put(h.repo(1), "result/manifest", &manifest_text("rmse", 0.60, "lower", None));
    let report = run_designer(&h.ctx, 1, far());
    assert_eq!(report.status, ReportStatus::FailedVerification);
}

#[test]
fn pruned_repo_is_a_missing_prerequisite() {
    let script = Script::new().turn("designer_1", "Should not run.", vec![]);
    let h = Harness::new(config(2), &script);
    h.repo(1).set_status(RepoStatus::Pruned);
    let before = h.tree(1);
    for kind in SubAgentKind::ALL {
        let report = match kind {
            SubAgentKind::Designer => run_designer(&h.ctx, 1, far()),
            SubAgentKind::Coder => run_coder(&h.ctx, 1, far()),
            SubAgentKind::Tuner => run_tuner(&h.ctx, 1, 10.0, far()),
        };
        assert_eq!(report.status, ReportStatus::MissingPrerequisite);
        assert_eq!(report.provider_calls, 0);
    }
    assert_eq!(h.tree(1), before);
    assert!(h.events("exchange").is_empty());
}

#[test]
fn designer_search_results_are_cited() {
    let script = Script::new()
        .turn("designer_1", "Searching.", vec![call("search", json!({"query": "linear regression"}))])
        .turn("designer_1", "Writing.", vec![write("plan.md", PLAN)])
        .turn("designer_1", "Done.", vec![]);
    let mut h = Harness::new(config(1), &script);
    let search = Arc::new(CountingSearch::default());
    h.ctx.search = search.clone();
    let report = run_designer(&h.ctx, 1, far());
    assert_eq!(report.status, ReportStatus::Ok);
    assert_eq!(search.calls.load(Ordering::SeqCst), 1);
    let plan = std::fs::read_to_string(h.repo(1).root().join("plan.md")).unwrap();
    assert!(plan.contains("## References") && plan.contains("https://example.org/ref"));
}

fn coder_files() -> Vec<modelsmith::provider::ToolCall> {
    vec![write("src/train.sh", TRAIN_SH), write("config/value", "4.8\n"), write("config/preds.csv", "id,score\nd,8\ne,10\n")]
}

#[test]
fn coder_first_try_passes() {
    let script = Script::new()
        .turn("coder_1", "Implementing.", coder_files())
        .turn("coder_1", "Smoke test.", vec![exec("sh src/train.sh --smoke")])
        .turn("coder_1", "Verified.", vec![]);
    let h = Harness::new(config(1), &script);
    put(h.repo(1), "plan.md", PLAN);
    let report = run_coder(&h.ctx, 1, far());
    assert_eq!(report.status, ReportStatus::Ok, "{}", report.summary);
    assert_eq!(report.debug_iterations, 1);
    assert!(h.repo(1).code_verified());
    assert!(h.repo(1).smoke_millis().is_some());
    assert_eq!(h.execs("coder_1").len(), 1);
}

#[test]
fn coder_fixes_failing_script() {
    let mut script = Script::new()
        .turn("coder_1", "Implementing.", vec![write("src/train.sh", "echo broken >&2; exit 1\n"), write("config/value", "1\n")])
        .turn("coder_1", "Smoke test.", vec![exec("sh src/train.sh --smoke")]);
    script.push("coder_1", "Fixing.", vec![write("src/train.sh", TRAIN_SH)]);
    script.push("coder_1", "Smoke again.", vec![exec("sh src/train.sh --smoke")]);
    script.push("coder_1", "Fixed.", vec![]);
    let h = Harness::new(config(1), &script);
    put(h.repo(1), "plan.md", PLAN);
    let report = run_coder(&h.ctx, 1, far());
    assert_eq!(report.status, ReportStatus::Ok, "{}", report.summary);
    assert_eq!(report.debug_iterations, 2);
    let execs = h.execs("coder_1");
    assert_eq!(execs.len(), 2);
    assert_eq!(execs[0].body["exit_code"], json!(1));
    assert_eq!(execs[1].body["exit_code"], json!(0));
    // Both results reached the model as observations.
    let exchanges = h.exchanges("coder_1");
    let last = exchanges.last().unwrap().request().unwrap();
    let observed: Vec<&str> = last
        .messages
        .iter()
        .filter_map(|m| match m {
            Message::Observation { tool_name, content, .. } if tool_name == "execute" => Some(content.as_str()),
            _ => None,
        })
        .collect();
    assert_eq!(observed.len(), 2);
    assert!(observed[0].contains("exit code 1") && observed[0].contains("broken"));
    assert!(observed[1].contains("exit code 0"));
}

#[test]
fn coder_stops_at_debug_cap() {
    let mut c = config(1);
    c.limits.debug_attempts = 3;
    let mut script = Script::new().turn("coder_1", "Implementing.", vec![write("src/train.sh", "exit 1\n"), write("config/value", "1\n")]);
    for _ in 0..4 {
        script.push("coder_1", "Trying.", vec![exec("sh src/train.sh --smoke")]);
    }
    script.push("coder_1", "Giving up.", vec![]);
    let h = Harness::new(c, &script);
    put(h.repo(1), "plan.md", PLAN);
    let report = run_coder(&h.ctx, 1, far());
    assert_eq!(report.status, ReportStatus::FailedVerification);
    assert_eq!(report.debug_iterations, 3);
    // The fourth attempt was refused before launch.
    assert_eq!(h.execs("coder_1").len(), 3);
    assert!(!h.repo(1).code_verified());
}

#[test]
fn coder_without_plan_is_missing_prerequisite() {
    let h = Harness::new(config(1), &Script::new());
    let report = run_coder(&h.ctx, 1, far());
    assert_eq!(report.status, ReportStatus::MissingPrerequisite);
}

fn verified_repo(h: &Harness, value: &str) {
    let r = h.repo(1);
    put(r, "plan.md", PLAN);
    put(r, "src/train.sh", TRAIN_SH);
    put(r, "config/value", value);
    put(r, "config/preds.csv", "id,score\nd,8\ne,10\n");
    r.set_code_verified(true);
}

#[test]
fn tuner_single_run() {
    let script = Script::new()
        .turn("tuner_1", "Training.", vec![exec("sh src/train.sh")])
        .turn("tuner_1", "Done.", vec![]);
    let h = Harness::new(config(1), &script);
    verified_repo(&h, "4.8\n");
    let report = run_tuner(&h.ctx, 1, 60.0, far());
    assert_eq!(report.status, ReportStatus::Ok, "{}", report.summary);
    assert_eq!(report.runs_launched, 1);
    let m = read_manifest(h.repo(1)).unwrap();
    assert_eq!((m.metric_name.as_str(), m.metric_value, m.direction), ("rmse", 4.8, Direction::LowerBetter));
    assert_eq!(report.metric.unwrap().value, 4.8);
}

#[test]
fn tuner_keeps_improved_run() {
    let script = Script::new()
        .turn("tuner_1", "Preliminary run.", vec![exec("sh src/train.sh")])
        .turn("tuner_1", "Adjusting config.", vec![write("config/value", "4.1\n")])
        .turn("tuner_1", "Second run.", vec![exec("sh src/train.sh")])
        .turn("tuner_1", "Improved.", vec![]);
    let h = Harness::new(config(1), &script);
    verified_repo(&h, "5.3\n");
    let report = run_tuner(&h.ctx, 1, 60.0, far());
    assert_eq!(report.status, ReportStatus::Ok, "{}", report.summary);
    assert_eq!(report.runs_launched, 2);
    let best = [5.3f64, 4.1].into_iter().fold(f64::INFINITY, f64::min);
    assert_eq!(read_manifest(h.repo(1)).unwrap().metric_value, best);
}

#[test]
fn tuner_may_not_touch_code() {
    let script = Script::new()
        .turn("tuner_1", "Editing code.", vec![write("src/train.sh", "exit 0\n")])
        .turn("tuner_1", "Training.", vec![exec("sh src/train.sh")])
        .turn("tuner_1", "Done.", vec![]);
    let h = Harness::new(config(1), &script);
    verified_repo(&h, "4.8\n");
    let report = run_tuner(&h.ctx, 1, 60.0, far());
    assert_eq!(report.status, ReportStatus::Ok);
    let code = std::fs::read_to_string(h.repo(1).root().join("src/train.sh")).unwrap();
    assert_eq!(code, TRAIN_SH);
}

#[test]
fn tuner_without_code_is_missing_prerequisite() {
    let h = Harness::new(config(1), &Script::new());
    put(h.repo(1), "plan.md", PLAN);
    let report = run_tuner(&h.ctx, 1, 60.0, far());
    assert_eq!(report.status, ReportStatus::MissingPrerequisite);
    assert!(report.summary.contains("MissingCode"));
}

#[test]
fn data_is_read_only_for_subagents() {
    let script = Script::new()
        .turn("coder_1", "Overwriting data.", vec![write("data/train.csv", "id\n")])
        .turn("coder_1", "Done.", vec![]);
    let h = Harness::new(config(1), &script);
    put(h.repo(1), "plan.md", PLAN);
    let before = h.tree(1)["data/train.csv"].clone();
    run_coder(&h.ctx, 1, far());
    assert_eq!(h.tree(1)["data/train.csv"], before);
}

#[test]
fn path_escape_aborts_the_agent() {
    let script = Script::new()
        .turn("designer_1", "Peeking.", vec![call("read", json!({"path": "../repo_2/plan.md"}))])
        .turn("designer_1", "Unreachable.", vec![]);
    let h = Harness::new(config(2), &script);
    let report = run_designer(&h.ctx, 1, far());
    assert_eq!(report.status, ReportStatus::Error);
    assert_eq!(report.provider_calls, 1);
}
