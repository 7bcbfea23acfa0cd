//! End-to-end CLI checks against the built binary: exit codes, file
//! outputs, idempotence and the environment-variable cache override.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cisper")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env_remove("CISPER_CACHE_DIR")
        .output()
        .expect("binary runs")
}

/// Writes a small three-split corpus and a toy config; returns the config
/// path.
fn setup_workspace(dir: &Path) -> PathBuf {
    let themes = [
        ("good", ["the garden blooms nicely", "sunny days feel wonderful", "petals drift softly"]),
        ("bad", ["the storm rages outside", "cold sleet keeps falling", "ice covers everything"]),
    ];
    let write_split = |file: &str, count: usize| {
        let mut lines = String::new();
        for c in 0..count {
            let (label, texts) = &themes[c % 2];
            for (i, text) in texts.iter().enumerate() {
                lines.push_str(&format!(
                    "{{\"conversation_id\":\"{file}-{c}\",\"index\":{i},\"speaker\":\"s\",\"text\":\"{text}\",\"emotion\":\"{label}\"}}\n"
                ));
            }
        }
        fs::write(dir.join(file), lines).unwrap();
    };
    write_split("train.jsonl", 4);
    write_split("val.jsonl", 2);
    write_split("test.jsonl", 2);

    let config_path = dir.join("run.toml");
    fs::write(
        &config_path,
        r#"adapter = "generic-jsonl"
train_path = "train.jsonl"
val_path = "val.jsonl"
test_path = "test.jsonl"
out_dir = "out"
d_u = 8
d_c = 8
d_t = 8
n_e = 1
n_p = 1
encoder_heads = 2
lm_heads = 2
lm_layers = 1
vocab_size = 48
max_seq_len = 24
max_conversation_len = 8
learning_rate = 5e-3
batch_size = 12
epochs = 8
early_stop_patience = 0
seed = 1
"#,
    )
    .unwrap();
    config_path
}

#[test]
fn help_exits_zero_and_lists_config_keys() {
    let output = Command::new(bin()).arg("--help").output().unwrap();
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("learning_rate"), "help should list config keys");
    assert!(text.contains("weight_decay"));
    assert!(text.contains("--set"));
}

#[test]
fn stats_prints_counts_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    setup_workspace(dir.path());
    let output = run_in(dir.path(), &["stats", "--config", "run.toml"]);
    assert!(output.status.success());
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("train"), "{text}");
    assert!(text.contains("12"), "4 conversations x 3 utterances: {text}");

    let first = fs::read(dir.path().join("out/stats.json")).unwrap();
    let meta_first = fs::read(dir.path().join("out/run_meta.json")).unwrap();
    let output = run_in(dir.path(), &["stats", "--config", "run.toml"]);
    assert!(output.status.success());
    assert_eq!(first, fs::read(dir.path().join("out/stats.json")).unwrap());
    assert_eq!(meta_first, fs::read(dir.path().join("out/run_meta.json")).unwrap());
}

#[test]
fn invalid_learning_rate_exits_one_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    setup_workspace(dir.path());
    let output = run_in(
        dir.path(),
        &["train", "--config", "run.toml", "--set", "learning_rate=-1"],
    );
    assert_eq!(output.status.code(), Some(1));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    setup_workspace(dir.path());
    let output = run_in(
        dir.path(),
        &["stats", "--config", "run.toml", "--set", "learnign_rate=0.01"],
    );
    assert_eq!(output.status.code(), Some(1));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("learnign_rate"), "{err}");
}

#[test]
fn train_eval_round_trip_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    setup_workspace(dir.path());
    let output = run_in(dir.path(), &["train", "--config", "run.toml"]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(dir.path().join("out/model.ckpt").exists());
    assert!(dir.path().join("out/train_log.jsonl").exists());

    let output = run_in(dir.path(), &["eval", "--config", "run.toml"]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("weighted-F1"), "{text}");
    assert!(dir.path().join("out/eval_report.json").exists());

    // seeded re-run reproduces the training log byte for byte
    let log = fs::read(dir.path().join("out/train_log.jsonl")).unwrap();
    let output = run_in(dir.path(), &["train", "--config", "run.toml"]);
    assert!(output.status.success());
    assert_eq!(log, fs::read(dir.path().join("out/train_log.jsonl")).unwrap());
}

#[test]
fn sweep_writes_a_three_row_table() {
    let dir = tempfile::tempdir().unwrap();
    setup_workspace(dir.path());
    let output = run_in(
        dir.path(),
        &["sweep", "--config", "run.toml", "--values", "1,2,3", "--set", "epochs=2"],
    );
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4, "header + 3 rows: {csv}");
    assert!(rows[1].starts_with("1,4,"));
    assert!(rows[2].starts_with("2,8,"));
    assert!(rows[3].starts_with("3,12,"));
    assert!(dir.path().join("out/sweep.svg").exists());
}

#[test]
fn features_honors_cache_dir_env_var() {
    let dir = tempfile::tempdir().unwrap();
    setup_workspace(dir.path());
    let cache = dir.path().join("env-cache");
    let output = Command::new(bin())
        .args(["features", "--config", "run.toml", "--set", "cache_dir=ignored-cache"])
        .current_dir(dir.path())
        .env("CISPER_CACHE_DIR", &cache)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(cache.join("manifest.json").exists());
    assert!(!dir.path().join("ignored-cache").exists());
}

#[test]
fn missing_subcommand_paths_give_user_errors() {
    let dir = tempfile::tempdir().unwrap();
    setup_workspace(dir.path());
    // eval before any training: checkpoint missing
    let output = run_in(dir.path(), &["eval", "--config", "run.toml"]);
    assert_eq!(output.status.code(), Some(1));
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("checkpoint"), "{err}");

    // config file missing entirely
    let output = run_in(dir.path(), &["stats", "--config", "nope.toml"]);
    assert_eq!(output.status.code(), Some(1));
}
