use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::{Rgb, RgbImage};
use serde_json::Value;
use tempfile::TempDir;
use zoomtrace::toolbox::{iou, BBox};
use zoomtrace_cli::commands::*;
use zoomtrace_cli::{CliError, RunConfig};

fn write_png(dir: &Path, name: &str) {
    let img = RgbImage::from_fn(100, 80, |x, y| Rgb([(x * 2) as u8, (y * 3) as u8, 40]));
    img.save(dir.join(name)).unwrap();
}

/// Four samples with images next to the dataset, plus one whose image is missing.
fn fixture() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..4 {
        write_png(dir.path(), &format!("s{i}.png"));
    }
    let lines = [
        r#"{"id": "s0", "image_path": "s0.png", "question": "What color is the sign?", "answer": "red", "gt_bboxes": [[10, 10, 60, 60]], "source": "visual_search"}"#,
        r#"{"id": "s1", "image_path": "s1.png", "question": "What is written?", "answer": "stop", "gt_bboxes": [[0, 0, 50, 40], [40, 30, 90, 70]], "source": "visual_search"}"#,
        r#"{"id": "s2", "image_path": "s2.png", "question": "Which bar is tallest?", "answer": "B", "source": "chart"}"#,
        r#"{"id": "s3", "image_path": "s3.png", "question": "How many cups?", "answer": "3", "source": "reasoning"}"#,
        r#"{"id": "gone", "image_path": "missing.png", "question": "Anything?", "answer": "no", "source": "chart"}"#,
    ];
    let path = dir.path().join("data.jsonl");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    (dir, path)
}

fn config(out: &Path, toml_extra: &str) -> RunConfig {
    let text = format!(
        "seed = 3\noutput_dir = {:?}\n[group]\nsize = 4\nprompts_per_batch = 3\n[rollout]\nmax_concurrency = 2\n{toml_extra}",
        out.display().to_string()
    );
    let cfg = RunConfig::from_toml(&text).unwrap();
    cfg.validate().unwrap();
    cfg
}

const ZOOM_MOCK: &str = "[policy.mock]\naccuracy = 0.5\nzoom_boxes = [[10.0, 10.0, 60.0, 60.0]]\n";

#[test]
fn rollout_writes_grouped_trajectories_and_metrics() {
    let (dir, data) = fixture();
    let out = dir.path().join("out");
    let m = cmd_rollout(&config(&out, ZOOM_MOCK), &data).unwrap();
    assert_eq!((m.samples, m.groups, m.trajectories), (5, 4, 16));
    assert_eq!(m.errors.len(), 1);
    assert_eq!(m.errors[0].id, "gone");
    assert_eq!(m.mean_tool_calls, 1.0);
    assert_eq!(m.transport_failures, 0);

    // Best IoU of the single zoom box against each sample's boxes, recomputed here.
    let z = BBox::new(10.0, 10.0, 60.0, 60.0);
    let s1 = iou(&z, &BBox::new(0.0, 0.0, 50.0, 40.0)).max(iou(&z, &BBox::new(40.0, 30.0, 90.0, 70.0)));
    assert_eq!(m.iou_calls, 8);
    assert!((m.mean_iou.unwrap() - (1.0 + s1) / 2.0).abs() < 1e-12);

    let text = fs::read_to_string(out.join(TRAJECTORIES_FILE)).unwrap();
    let rows: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 16);
    let metrics: Value = serde_json::from_str(&fs::read_to_string(out.join(ROLLOUT_METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(metrics["trajectories"], 16);
}

#[test]
fn eval_reports_per_sample_rows() {
    let (dir, data) = fixture();
    let out = dir.path().join("out");
    let cfg = config(&out, "[policy.mock]\naccuracy = 1.0\nzoom_boxes = [[10.0, 10.0, 60.0, 60.0]]\n");
    let m = cmd_eval(&cfg, &data).unwrap();
    assert_eq!((m.samples, m.trajectories, m.accuracy), (5, 4, 1.0));
    let text = fs::read_to_string(out.join(EVAL_RESULTS_FILE)).unwrap();
    let rows: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0]["id"], "s0");
    assert_eq!(rows[0]["iou"], 1.0);
    assert_eq!(rows[2]["iou"], Value::Null);
    assert!(out.join(EVAL_METRICS_FILE).exists());
}

#[test]
fn curate_handles_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty.jsonl");
    fs::write(&data, "\n").unwrap();
    let out = dir.path().join("out");
    let s = cmd_curate(&config(&out, ""), &data, 0).unwrap();
    assert_eq!((s.input, s.kept, s.deferred), (0, 0, 0));
    assert_eq!(fs::read_to_string(out.join(CURATED_FILE)).unwrap(), "");
    assert_eq!(fs::read_to_string(out.join(AUDIT_FILE)).unwrap(), "");
}

#[test]
fn curate_drops_by_reason_and_keeps_the_rest() {
    let (dir, data) = fixture();
    let extra = r#"{"id": "nobox", "image_path": "s0.png", "question": "Where is the cat?", "answer": "left", "source": "visual_search"}"#;
    let mut text = fs::read_to_string(&data).unwrap();
    text.push_str(extra);
    text.push('\n');
    fs::write(&data, text).unwrap();
    let truth = dir.path().join("truth.json");
    fs::write(&truth, r#"{"s3": "4"}"#).unwrap();
    let out = dir.path().join("out");
    let cfg = config(
        &out,
        &format!(
            "[verifier]\ntruth_file = {:?}\n[policy.mock.samples.s0]\nanswer = \"red\"\naccuracy = 1.0\n\
             [policy.mock.samples.s1]\nanswer = \"stop\"\naccuracy = 0.5\ncrop_accuracy = 1.0\n\
             [policy.mock.samples.s2]\nanswer = \"B\"\naccuracy = 0.0\n\
             [policy.mock.samples.s3]\nanswer = \"3\"\naccuracy = 0.5\n\
             [policy.mock.samples.nobox]\nanswer = \"left\"\naccuracy = 0.5\n",
            truth.display().to_string()
        ),
    );
    let s = cmd_curate(&cfg, &data, 0).unwrap();
    assert_eq!(s.input, 6);
    let dropped: Vec<(&str, usize)> = s.dropped.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    assert_eq!(
        dropped,
        [("bad_label", 1), ("image_unavailable", 1), ("missing_gt_box", 1), ("too_easy", 1), ("too_hard", 1)]
    );
    assert_eq!(s.kept, 1);
    let kept = fs::read_to_string(out.join(CURATED_FILE)).unwrap();
    assert!(kept.contains("\"s1\""));
    let audit = fs::read_to_string(out.join(AUDIT_FILE)).unwrap();
    assert!(audit.lines().any(|l| l.contains("\"nobox\"") && l.contains("drop:missing_gt_box")));
}

#[test]
fn ablate_is_reproducible_and_rejects_short_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let cfg = config(&out, "[toy]\nsteps = 200\nbatch_prompts = 4\n");
        let report = cmd_ablate(&cfg).unwrap();
        assert_eq!(report.modes.len(), 3);
        fs::read(out.join("ablation_conditional.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let rows = String::from_utf8(a).unwrap();
    assert_eq!(rows.lines().count(), 201);
    assert!(rows.starts_with("step,tool_rate,mean_tool_calls,accuracy,mean_reward,response_len,region_hit_rate"));

    let short = config(&dir.path().join("c"), "[toy]\nsteps = 50\n");
    assert!(matches!(cmd_ablate(&short), Err(CliError::Config(_))));
}

fn bin(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_zoomtrace"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes_follow_failure_class() {
    let (dir, data) = fixture();
    let d = data.to_str().unwrap();
    let ok = bin(&["validate-config", "--seed", "7"], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("seed = 7"));

    fs::write(dir.path().join("bad.toml"), "[group]\nsize = 1\n").unwrap();
    assert_eq!(bin(&["--config", "bad.toml", "validate-config"], dir.path()).status.code(), Some(2));
    assert_eq!(bin(&["rollout", "nowhere.jsonl"], dir.path()).status.code(), Some(3));

    fs::write(
        dir.path().join("remote.toml"),
        "[endpoint]\nurl = \"http://127.0.0.1:9/v1/chat/completions\"\nmax_retries = 0\ntimeout_ms = 500\nbackoff_base_ms = 1\nbackoff_max_ms = 1\n[group]\nsize = 2\n",
    )
    .unwrap();
    let remote = bin(&["--config", "remote.toml", "--policy", "remote", "eval", d], dir.path());
    assert_eq!(remote.status.code(), Some(4), "{}", String::from_utf8_lossy(&remote.stderr));

    let good = bin(&["--group-size", "2", "--output-dir", "run", "rollout", d], dir.path());
    assert_eq!(good.status.code(), Some(0));
    assert!(dir.path().join("run").join(TRAJECTORIES_FILE).exists());
}
