use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chronochat"))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

#[test]
fn progress_matches_worked_example() {
    let out = run(&["progress", "--duration", "2 months", "--elapsed", "6 weeks"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), "3/4 finished\n");
}

#[test]
fn usage_errors_exit_2_and_name_the_flag() {
    let out = run(&["progress", "--duration", "2 mnths", "--elapsed", "6 weeks"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--duration"));

    let out = run(&["self-chat", "--backend", "mock"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--seed"));

    let out = run(&["gen-timeline"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["build-context", "--input", "x.json", "--mode", "sometimes"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--mode"));

    let out = run(&["no-such-verb"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn domain_errors_exit_1() {
    let out = run(&["progress", "--duration", "2 months", "--elapsed", "0 minutes"]);
    assert_eq!(out.status.code(), Some(2), "zero is rejected as a flag value");
    let input = fixture("context_input.json");
    let out = run(&["build-context", "--input", input.to_str().unwrap(), "--mode", "none"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("progress"));
    let out = run(&["estimate-duration", "--event", "juggling", "--backend", "mock"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["stats", "/definitely/missing.chrono.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn split_schedule_driver_license() {
    let schedule = fixture("driver_license_schedule.json");
    let out = run(&["split-schedule", "--schedule", schedule.to_str().unwrap(), "--elapsed", "2 weeks"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let finished = v["finished"].as_array().unwrap();
    assert_eq!(finished.len(), 1);
    assert_eq!(finished[0]["description"], "learning rules");
    assert_eq!(v["todo"].as_array().unwrap().len(), 4);
}

#[test]
fn build_context_reproduces_golden_block() {
    let input = fixture("context_input.json");
    let out = run(&["build-context", "--input", input.to_str().unwrap(), "--mode", "progress"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), std::fs::read_to_string(fixture("context_block.txt")).unwrap());
}

#[test]
fn llm_verbs_with_mock_backend() {
    let history = fixture("extraction_history.txt");
    let out = run(&["extract-events", "--history", history.to_str().unwrap(), "--backend", "mock"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        stdout(&out),
        "B: executing a social media marketing (about 3 months)\nA: something is not mentioned\n"
    );

    let out = run(&["estimate-duration", "--event", "getting a driver license"]);
    assert_eq!(stdout(&out), "2 months\n");

    let out = run(&["gen-schedule", "--event", "getting a driver license", "--duration", "2 months"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let steps: Vec<serde_json::Value> = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(steps.len(), 5);
    assert_eq!(steps[0]["description"], "learning rules");
}

#[test]
fn timeline_then_advance() {
    let dir = tempfile::tempdir().unwrap();
    let tl = dir.path().join("timelines.json");
    let out = run(&["gen-timeline", "--seed", "3", "--out", tl.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let again = run(&["gen-timeline", "--seed", "3"]);
    assert_eq!(stdout(&again), std::fs::read_to_string(&tl).unwrap());

    let out = run(&["advance", "--timeline", tl.to_str().unwrap(), "--speaker", "1", "--gap", "3 weeks"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["clock"]["elapsed"], "3 weeks");
    assert!(v["updates"]["new_events"].is_array());
    let out = run(&["advance", "--timeline", tl.to_str().unwrap(), "--speaker", "2", "--gap", "3 weeks"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn self_chat_is_reproducible_and_feeds_stats() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.chrono.jsonl");
    let b = dir.path().join("b.chrono.jsonl");
    let dump = dir.path().join("plan.json");
    let args = |p: &PathBuf| {
        vec![
            "self-chat".to_string(),
            "--backend".into(),
            "mock".into(),
            "--seed".into(),
            "7".into(),
            "--count".into(),
            "4".into(),
            "--out".into(),
            p.to_str().unwrap().into(),
        ]
    };
    let out = bin().args(args(&a)).args(["--dump-timeline", dump.to_str().unwrap()]).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let out = bin().args(args(&b)).args(["--parallel", "3"]).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let plans: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(&dump).unwrap()).unwrap();
    assert_eq!(plans.len(), 4);
    assert_eq!(plans[0]["shared_gaps"].as_array().unwrap().len(), 2);

    let out = run(&["import", a.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), "4 conversations, 0 invalid lines\n");
    let out = run(&["stats", a.to_str().unwrap(), "--json"]);
    let stats: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(stats["total"]["dialogues"], 4);
}

#[test]
fn import_reports_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.chrono.jsonl");
    std::fs::write(&path, "{\"id\": \"x\"}\nnot json\n").unwrap();
    let out = run(&["import", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 1"));
    assert!(stderr(&out).contains("line 2"));
}

#[test]
fn import_external_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let record = serde_json::json!({
        "previous_dialogs": [
            { "dialog": [ { "text": "hi" }, { "text": "hello" } ] },
            { "dialog": [ { "text": "back again" }, { "text": "welcome" } ], "time_num": 3, "time_unit": "days" }
        ],
        "dialog": [ { "text": "last one" }, { "text": "bye" } ],
        "time_num": 2,
        "time_unit": "weeks"
    });
    std::fs::write(dir.path().join("train.jsonl"), format!("{record}\n")).unwrap();
    let out_path = dir.path().join("out.chrono.jsonl");
    let out = run(&["import", "--from-gapchat", dir.path().to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = run(&["stats", out_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("total"));
}

#[test]
fn eval_reports_scores() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("judgments.jsonl");
    let mut lines = Vec::new();
    for (i, q) in (1..=12u8).enumerate() {
        for annotator in ["w1", "w2", "w3"] {
            lines.push(
                serde_json::json!({
                    "task_id": format!("t{i}"),
                    "annotator_id": annotator,
                    "question_id": q,
                    "choice": "left",
                    "justification": "it remembered the schedule of the exam well",
                    "work_seconds": 250.0,
                    "left_model": "timed",
                    "right_model": "plain",
                    "gap_bucket": "weeks"
                })
                .to_string(),
            );
        }
    }
    std::fs::write(&path, lines.join("\n")).unwrap();
    let out = run(&["eval", "--judgments", path.to_str().unwrap(), "--model", "timed", "--baseline", "plain", "--json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(report["model"], "timed");
    assert!(report["retained"].as_u64().unwrap() > 0);
    assert!(report["filtered"].as_u64().unwrap() >= 3, "question 12 is dropped");
    let out = run(&["eval", "--judgments", path.to_str().unwrap(), "--model", "timed", "--baseline", "plain", "--buckets"]);
    assert!(out.status.success(), "{}", stderr(&out));
}
