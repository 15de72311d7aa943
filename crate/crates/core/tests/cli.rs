use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn advisor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advisor"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn tiny_config(dir: &Path) -> String {
    let text = format!(
        r#"seed = 3
output_dir = "{}"

[environment]
domain = "review_length"
train_tasks = 24
eval_tasks = 8

[train]
epochs = 2
tasks_per_batch = 8
eval_every = 2
checkpoint_every = 3

[student]
student_id = "sim-a"
compliance = 1.0
length_noise_sigma = 0.05
"#,
        dir.join("run").display()
    );
    write(dir, "tiny.toml", &text)
}

#[test]
fn malformed_config_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "seed = 1\n\n[grpo]\nclip_epsilon = \"wide\"\n");
    let o = advisor(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("bad.toml"), "{err}");
    assert!(err.contains("line 4"), "{err}");

    let o = advisor(&["train", "--config", &dir.path().join("missing.toml").display().to_string()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_run_directory_and_eval_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = advisor(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["config.json", "run.json", "metrics.jsonl", "eval_report.json", "checkpoints/final.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    // 24 tasks / 8 per batch * 2 epochs
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert!(run.join("checkpoints/update-000003.json").is_file());

    let ckpt = run.join("checkpoints/final.json").display().to_string();
    let report = dir.path().join("eval.json");
    let o = advisor(&["eval", "--checkpoint", &ckpt, "--config", &cfg, "--greedy", "--report", &report.display().to_string()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("over 8 tasks"), "{}", stdout(&o));
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(rep.get("mean_reward").and_then(|v| v.as_f64()).is_some(), "{rep}");
}

#[test]
fn chrf_identical_files_score_100_and_empty_lines_score_0() {
    let dir = tempfile::tempdir().unwrap();
    let r = write(dir.path(), "ref.txt", "the cat sat\non the mat\n");
    let o = advisor(&["chrf", &r, &r]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean\t100.0000"), "{}", stdout(&o));

    let h = write(dir.path(), "hyp.txt", "the cat sat\n\n");
    let o = advisor(&["chrf", &h, &r]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("1\t100.0000"), "{out}");
    assert!(out.contains("2\t0.0000"), "{out}");
    assert!(out.contains("mean\t50.0000"), "{out}");
}

#[test]
fn chrf_line_count_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    let r = write(dir.path(), "ref.txt", "a\nb\n");
    let h = write(dir.path(), "hyp.txt", "a\n");
    let o = advisor(&["chrf", &h, &r]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains('1') && stderr(&o).contains('2'), "{}", stderr(&o));
}

#[test]
fn chrf_fixture_matches_hand_computed_scores() {
    let dir = tempfile::tempdir().unwrap();
    // order 1 and beta 1 keep the expected values checkable by hand:
    // "ab" vs "abc": P = 1, R = 2/3, F = 80
    let h = write(dir.path(), "h.txt", "ab\nxyz\nabc\n");
    let r = write(dir.path(), "r.txt", "abc\nabc\nabc\n");
    let o = advisor(&["chrf", &h, &r, "--order", "1", "--beta", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("1\t80.0000"), "{out}");
    assert!(out.contains("2\t0.0000"), "{out}");
    assert!(out.contains("3\t100.0000"), "{out}");
    assert!(out.contains("mean\t60.0000"), "{out}");
}
