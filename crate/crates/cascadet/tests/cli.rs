use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn golden() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/golden")
}

fn cascadet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cascadet"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn golden_run_matches_expected_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = cascadet(&["run", "--config", s(&golden().join("run.toml")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["report.json", "report.txt", "metrics.csv"] {
        let got = fs::read(out.join(name)).unwrap();
        let want = fs::read(golden().join("expected").join(name)).unwrap();
        assert!(got == want, "{name} differs from the expected copy");
    }
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout, fs::read_to_string(out.join("report.txt")).unwrap());
    for name in ["audit.jsonl", "latency.json", "latency.csv"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn worker_count_does_not_change_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = golden().join("run.toml");
    let mut reports = Vec::new();
    for workers in ["1", "4"] {
        let out = tmp.path().join(workers);
        let o = cascadet(&["run", "--config", s(&cfg), "--workers", workers, "--out", s(&out)]);
        assert_eq!(code(&o), 0);
        reports.push(fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn missing_dataset_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cascadet(&["run", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 1);
    let o = cascadet(&["run", "--dataset", s(&tmp.path().join("absent.json")), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.json"));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&cascadet(&["frobnicate"])), 1);
    assert_eq!(code(&cascadet(&["run", "--workers", "many"])), 1);
    assert_eq!(code(&cascadet(&["--help"])), 0);
    assert_eq!(code(&cascadet(&["--version"])), 0);
}

/// Copies the golden fixture into `dir`.
fn copy_fixture(dir: &Path) {
    for name in ["frames.jsonl", "manifest.json", "degraded.json", "detector.jsonl", "verifier.jsonl", "run.toml"] {
        fs::copy(golden().join(name), dir.join(name)).unwrap();
    }
}

#[test]
fn detector_failure_on_one_frame_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    copy_fixture(tmp.path());
    let det = fs::read_to_string(tmp.path().join("detector.jsonl")).unwrap();
    let det: String = det
        .lines()
        .map(|l| {
            if l.contains("\"frame_id\":\"f03\"") {
                "{\"frame_id\":\"f03\",\"error\":\"detector crashed\"}".to_string()
            } else {
                l.to_string()
            }
        })
        .map(|l| l + "\n")
        .collect();
    fs::write(tmp.path().join("detector.jsonl"), det).unwrap();

    let out = tmp.path().join("out");
    let o = cascadet(&["run", "--config", s(&tmp.path().join("run.toml")), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["frames"], 19);
    assert_eq!(report["failed_frames"][0]["frame_id"], "f03");
    let audit = fs::read_to_string(out.join("audit.jsonl")).unwrap();
    let third: Value = serde_json::from_str(audit.lines().nth(3).unwrap()).unwrap();
    assert_eq!(third["failure"]["frame_id"], "f03");
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("failed frame f03"));
}

#[test]
fn corrupted_annotations_fail_the_checksum() {
    let tmp = tempfile::tempdir().unwrap();
    copy_fixture(tmp.path());
    let frames = tmp.path().join("frames.jsonl");
    let text = fs::read_to_string(&frames).unwrap().replacen("640.0", "641.0", 1);
    fs::write(&frames, text).unwrap();
    let o = cascadet(&["run", "--config", s(&tmp.path().join("run.toml")), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("checksum mismatch"), "{}", String::from_utf8_lossy(&o.stderr));
}

const SCORE_FRAMES: &str = r#"{"frame_id":"s1","image_width":1000,"image_height":1000,"condition":"clean","ground_truths":[{"x1":100,"y1":100,"x2":300,"y2":300}]}
{"frame_id":"s2","image_width":1000,"image_height":1000,"condition":"degraded","degradation_tags":["dim"],"ground_truths":[{"x1":100,"y1":100,"x2":200,"y2":200},{"x1":500,"y1":500,"x2":600,"y2":600}]}
{"frame_id":"s3","image_width":1000,"image_height":1000,"condition":"clean","ground_truths":[]}
"#;

fn score_setup(dir: &Path, extra: &str) -> PathBuf {
    fs::write(dir.join("frames.jsonl"), SCORE_FRAMES).unwrap();
    let cfg = dir.join("score.toml");
    fs::write(&cfg, format!("dataset = \"frames.jsonl\"\nout = \"out\"\n{extra}")).unwrap();
    cfg
}

fn line(frame: &str, raw: &str) -> String {
    serde_json::json!({ "frame_id": frame, "raw_response": raw }).to_string() + "\n"
}

#[test]
fn score_means_match_hand_computation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = score_setup(tmp.path(), "");
    let responses = tmp.path().join("responses.jsonl");
    let text = [
        // Exact box at 0.9: 0.6·1 + 0.3·0.9 + 0.1·1 = 0.97.
        line("s1", "<think>clear</think><answer>[{'Position': [100, 100, 300, 300], 'Confidence': 0.9}]</answer>"),
        // Half of the first polyp, second missed: r_iou 0.5, r_conf 0.8 − 2·1,
        // total 0.3 − 0.36 + 0.1 = 0.04.
        line("s2", "<think>one</think><answer>[{\"Position\": [100, 100, 200, 150], \"Confidence\": 0.8}]</answer>"),
        // Unparseable with nothing to find: all terms 0.
        line("s3", "nothing to see"),
        line("s9", "<think></think><answer>No Objects</answer>"),
        "not json\n".to_string(),
    ]
    .concat();
    fs::write(&responses, text).unwrap();

    let o = cascadet(&["score", "--config", s(&cfg), "--responses", s(&responses)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/score_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["records"], 5);
    assert_eq!(summary["unscored"], 2);
    let overall = &summary["overall"];
    assert_eq!(overall["count"], 3);
    let close = |v: &Value, want: f64| (v.as_f64().unwrap() - want).abs() < 1e-12;
    assert!(close(&overall["r_iou"], 0.5), "{overall}");
    assert!(close(&overall["r_conf"], (0.9 - 1.2) / 3.0), "{overall}");
    assert!(close(&overall["r_format"], 2.0 / 3.0), "{overall}");
    assert!(close(&overall["r_total"], (0.97 + 0.04) / 3.0), "{overall}");
    assert!(close(&summary["per_condition"]["degraded"]["r_total"], 0.04));
    assert!(close(&summary["per_tag"]["dim"]["r_conf"], -1.2));

    let rewards = fs::read_to_string(tmp.path().join("out/rewards.jsonl")).unwrap();
    assert_eq!(rewards.lines().count(), 6);
    assert!(rewards.lines().next().unwrap().contains("\"provenance\""));
}

#[test]
fn fractional_penalty_is_selectable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = score_setup(tmp.path(), "[rewards]\nfn_penalty = \"fractional\"\n");
    let responses = tmp.path().join("r.jsonl");
    fs::write(
        &responses,
        line("s2", "<think>one</think><answer>[{'Position': [100, 100, 200, 150], 'Confidence': 0.8}]</answer>"),
    )
    .unwrap();
    let o = cascadet(&["score", "--config", s(&cfg), "--responses", s(&responses)]);
    assert_eq!(code(&o), 0);
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/score_summary.json")).unwrap()).unwrap();
    // One of two missed: 0.8 − 2·0.5.
    assert!((summary["overall"]["r_conf"].as_f64().unwrap() + 0.2).abs() < 1e-12);
}

#[test]
fn empty_response_file_scores_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = score_setup(tmp.path(), "");
    let responses = tmp.path().join("empty.jsonl");
    fs::write(&responses, "").unwrap();
    let o = cascadet(&["score", "--config", s(&cfg), "--responses", s(&responses)]);
    assert_eq!(code(&o), 0);
    let rewards = fs::read_to_string(tmp.path().join("out/rewards.jsonl")).unwrap();
    assert_eq!(rewards.lines().count(), 1, "only the provenance header");
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("out/score_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["records"], 0);
    assert_eq!(summary["overall"]["count"], 0);
}

#[test]
fn reward_weights_must_sum_to_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = score_setup(tmp.path(), "[rewards]\nalpha = 0.7\n");
    let responses = tmp.path().join("empty.jsonl");
    fs::write(&responses, "").unwrap();
    let o = cascadet(&["score", "--config", s(&cfg), "--responses", s(&responses)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_rejects_single_sample_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("t.toml");
    fs::write(&cfg, "[train]\ngroup_size = 1\n").unwrap();
    let o = cascadet(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(code(&o), 1);
    assert!(!tmp.path().join("out/checkpoint.txt").exists());
}

#[test]
fn train_then_resume_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("t.toml");
    fs::write(&cfg, "seed = 3\n[train]\nsteps = 6\ninputs = 8\nheldout = 4\n").unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&cascadet(&["train", "--config", s(&cfg), "--out", s(&a)])), 0);
    let o = cascadet(&["train", "--config", s(&cfg), "--out", s(&b), "--resume", s(&a.join("checkpoint.txt"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_str(&fs::read_to_string(b.join("train_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["first_step"], 6);
    assert_eq!(summary["steps_run"], 6);
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "not a checkpoint").unwrap();
    assert_eq!(code(&cascadet(&["train", "--config", s(&cfg), "--out", s(&b), "--resume", s(&bad)])), 1);
}

#[test]
fn ablate_writes_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ablate");
    let o = cascadet(&[
        "ablate",
        "--config",
        s(&golden().join("run.toml")),
        "--dataset",
        s(&golden().join("degraded.json")),
        "--backend",
        "oracle",
        "--variant",
        "fixed",
        "--variant",
        "adaptive",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("fixed") && table.contains("adaptive") && table.contains("+58.3"), "{table}");
    for f in ["ablation.json", "ablation.txt", "ablation.csv", "fixed/report.json", "adaptive/report.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert_eq!(code(&cascadet(&["ablate", "--variant", "fixed", "--variant", "bogus"])), 1);
}
