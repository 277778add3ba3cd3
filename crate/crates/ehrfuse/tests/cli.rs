//! End-to-end checks of the command-line surface at micro scale: data
//! generation to files, training from those files, re-evaluating the
//! checkpoint, and the failure path's machine-readable error output.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ehrfuse"))
}

fn write_micro_config(path: &Path) {
    std::fs::write(
        path,
        r#"
seed = 3
lr = 1e-3
batch_size = 4
max_epochs = 2
early_stop_patience = 5

[model]
hidden = 12
note_hidden = 10
word_dim = 6
note_filters = [2, 3]
heads = 2
layers = 1

[data]
patients = 24
data_seed = 9
split_seed = 9
ratios = [0.6, 0.2, 0.2]

[data.gen]
vocab = 400
code_block = 3
note_len_min = 5
note_len_max = 8
"#,
    )
    .unwrap();
}

#[test]
fn generate_train_evaluate_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("micro.toml");
    write_micro_config(&cfg_path);

    let data_dir = dir.path().join("data");
    let out = bin()
        .args(["generate-data", "--seed", "9", "--patients", "24", "--out"])
        .arg(&data_dir)
        .args(["--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "generate-data failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(data_dir.join("ontology.txt").exists());
    assert!(data_dir.join("cohort.jsonl").exists());

    let run_dir = dir.path().join("run");
    let out = bin()
        .args(["train", "--run-dir"])
        .arg(&run_dir)
        .args(["--config"])
        .arg(&cfg_path)
        .args(["--cohort"])
        .arg(data_dir.join("cohort.jsonl"))
        .args(["--ontology"])
        .arg(data_dir.join("ontology.txt"))
        .output()
        .unwrap();
    assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["epochs_run"], 2);
    for name in ["config.toml", "metrics.jsonl", "report.json", "checkpoint.ckpt"] {
        assert!(run_dir.join(name).exists(), "{name} missing");
    }

    let out = bin()
        .args(["evaluate", "--checkpoint"])
        .arg(run_dir.join("checkpoint.ckpt"))
        .args(["--split", "test", "--config"])
        .arg(&cfg_path)
        .args(["--cohort"])
        .arg(data_dir.join("cohort.jsonl"))
        .args(["--ontology"])
        .arg(data_dir.join("ontology.txt"))
        .output()
        .unwrap();
    assert!(out.status.success(), "evaluate failed: {}", String::from_utf8_lossy(&out.stderr));
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(eval["split"], "test");
    assert!(eval["acc_at"].as_array().unwrap().len() == 4);
}

#[test]
fn failures_emit_error_json_and_nonzero_exit() {
    let out = bin()
        .args(["train", "--run-dir", "/tmp/nowhere", "--optimizer", "frobnicate"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value =
        serde_json::from_str(line.lines().last().unwrap()).expect("stderr carries JSON");
    assert!(parsed["error"].as_str().unwrap().contains("frobnicate"));
}

#[test]
fn unknown_ablation_switch_is_rejected() {
    let out = bin()
        .args(["ablate", "--axes", "no_such_switch", "--seeds", "1", "--out", "/tmp/nowhere2"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let line = String::from_utf8_lossy(&out.stderr);
    assert!(line.contains("no_such_switch"));
}
