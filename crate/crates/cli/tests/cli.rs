//! End-to-end tests of the `hamlet` binary: artifacts, exit codes, and
//! output contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hamlet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hamlet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, epochs: usize, seed: u64, out: &Path) -> PathBuf {
    let text = format!(
        r#"
[model]
embedding_size = 16
spatial_embedding = 16
lstm_layers = 1
uat_heads = 1
mat_heads = 2
fusion = "mat-concat"
variant = "hamlet"
dropout = 0.3

[training]
epochs = {epochs}
batch_size = 8
seed = {seed}
lr = 1e-3

[data.synthetic]
classes = 2
frames = 20
segments = 4
noise_sigma = 0.3
samples_per_actor_per_class = 3
actors = 2
amplitude = 2.0

[[data.synthetic.modalities]]
name = "imu"
kind = "vector"
dims = [4]

[[data.synthetic.modalities]]
name = "emg"
kind = "vector"
dims = [3]

[output]
dir = "{out}"
"#,
        out = out.display()
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_writes_artifacts_and_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_config(dir.path(), 20, 3, &out);
    let result = hamlet(&["train", "--config", config.to_str().unwrap()]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    for file in ["model.ckpt", "history.csv", "standardizer.json", "config.toml"] {
        assert!(out.join(file).exists(), "missing {file}");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,step,lr,train_loss,train_acc,val_acc"
    );
    let losses: Vec<f64> = lines
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect();
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
}

#[test]
fn same_seed_gives_bit_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (out_a, out_b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir_all(dir.path().join("ca")).unwrap();
    std::fs::create_dir_all(dir.path().join("cb")).unwrap();
    let cfg_a = write_config(&dir.path().join("ca"), 6, 11, &out_a);
    let cfg_b = write_config(&dir.path().join("cb"), 6, 11, &out_b);
    assert!(hamlet(&["train", "--config", cfg_a.to_str().unwrap()]).status.success());
    assert!(hamlet(&["train", "--config", cfg_b.to_str().unwrap()]).status.success());
    assert_eq!(
        std::fs::read(out_a.join("model.ckpt")).unwrap(),
        std::fs::read(out_b.join("model.ckpt")).unwrap(),
        "checkpoints must match bit for bit"
    );
    assert_eq!(
        std::fs::read(out_a.join("history.csv")).unwrap(),
        std::fs::read(out_b.join("history.csv")).unwrap()
    );
}

#[test]
fn effective_config_reloads_to_an_identical_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_config(dir.path(), 5, 21, &out);
    assert!(hamlet(&["train", "--config", config.to_str().unwrap()]).status.success());
    // retrain from the effective config written next to the outputs
    let out2 = dir.path().join("run2");
    let effective = out.join("config.toml");
    let result = hamlet(&[
        "train",
        "--config",
        effective.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert!(result.status.success());
    assert_eq!(
        std::fs::read(out.join("model.ckpt")).unwrap(),
        std::fs::read(out2.join("model.ckpt")).unwrap()
    );
}

#[test]
fn eval_reports_perfect_accuracy_on_memorized_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_config(dir.path(), 60, 5, &out);
    assert!(hamlet(&["train", "--config", config.to_str().unwrap()]).status.success());
    let result = hamlet(&["eval", "--checkpoint", out.join("model.ckpt").to_str().unwrap()]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&result.stdout).expect("eval prints JSON");
    let acc = report["top1_accuracy"].as_f64().unwrap();
    assert_eq!(acc, 1.0, "memorized toy set should score 100%, got {acc}");
    assert_eq!(report["macro_f1"].as_f64().unwrap(), 1.0);
}

#[test]
fn invalid_head_split_exits_2_naming_divisibility() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_config(dir.path(), 2, 1, &out);
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("embedding_size = 16", "embedding_size = 256")
        .replace("uat_heads = 1", "uat_heads = 3");
    std::fs::write(&config, text).unwrap();
    let result = hamlet(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(
        stderr.contains("divisible") && stderr.contains("256") && stderr.contains('3'),
        "{stderr}"
    );
}

#[test]
fn missing_config_exits_2() {
    let result = hamlet(&["train"]);
    assert_eq!(result.status.code(), Some(2));
}

#[test]
fn out_of_range_dropout_needs_explicit_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_config(dir.path(), 2, 1, &out);
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("dropout = 0.3", "dropout = 0.05");
    std::fs::write(&config, text).unwrap();
    let denied = hamlet(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(denied.status.code(), Some(2));
    let allowed = hamlet(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--allow-any-dropout",
    ]);
    assert!(allowed.status.success());
}

#[test]
fn export_attention_maps_are_normalized() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_config(dir.path(), 4, 9, &out);
    assert!(hamlet(&["train", "--config", config.to_str().unwrap()]).status.success());
    let maps_path = dir.path().join("maps.json");
    let result = hamlet(&[
        "export-attention",
        "--checkpoint",
        out.join("model.ckpt").to_str().unwrap(),
        "--out",
        maps_path.to_str().unwrap(),
        "--raw",
    ]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let records: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&maps_path).unwrap()).unwrap();
    let records = records.as_array().unwrap();
    // 12 samples x (2 modalities + fusion)
    assert_eq!(records.len(), 12 * 3);
    for record in records {
        let reduced: Vec<f64> = record["reduced"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        let sum: f64 = reduced.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "reduced map sums to {sum}");
        if record["modality"] == "fusion" {
            assert_eq!(reduced.len(), 2, "fusion map has one entry per modality");
        } else {
            assert_eq!(reduced.len(), 4, "unimodal map has one entry per segment");
        }
        let raw = record["raw"].as_array().expect("--raw includes matrices");
        assert_eq!(raw.len(), record["head_count"].as_u64().unwrap() as usize);
        for head in raw {
            for row in head.as_array().unwrap() {
                let s: f64 = row
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|v| v.as_f64().unwrap())
                    .sum();
                assert!((s - 1.0).abs() < 1e-9, "raw row sums to {s}");
            }
        }
    }
}

#[test]
fn export_attention_per_sample_writes_one_file_each() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_config(dir.path(), 3, 13, &out);
    assert!(hamlet(&["train", "--config", config.to_str().unwrap()]).status.success());
    let maps_dir = dir.path().join("maps");
    let result = hamlet(&[
        "export-attention",
        "--checkpoint",
        out.join("model.ckpt").to_str().unwrap(),
        "--out",
        maps_dir.to_str().unwrap(),
        "--per-sample",
    ]);
    assert!(result.status.success());
    let files: Vec<_> = std::fs::read_dir(&maps_dir).unwrap().collect();
    assert_eq!(files.len(), 12, "one JSON per sample");
}

#[test]
fn generate_data_roundtrips_through_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_config(dir.path(), 2, 17, &out);
    let data_dir = dir.path().join("dataset");
    let gen = hamlet(&[
        "generate-data",
        "--config",
        config.to_str().unwrap(),
        "--out",
        data_dir.to_str().unwrap(),
    ]);
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));
    assert!(data_dir.join("manifest.json").exists());

    // train from the materialized manifest instead of the inline spec
    let manifest_cfg = dir.path().join("manifest_config.toml");
    let text = std::fs::read_to_string(&config).unwrap();
    let start = text.find("[data.synthetic]").unwrap();
    let end = text.find("[output]").unwrap();
    let replaced = format!(
        "{}[data]\nmanifest = \"{}\"\nsegments = 4\n\n{}",
        &text[..start],
        data_dir.join("manifest.json").display(),
        &text[end..]
    );
    std::fs::write(&manifest_cfg, replaced).unwrap();
    let result = hamlet(&["train", "--config", manifest_cfg.to_str().unwrap()]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
}

#[test]
fn sweep_single_cell_writes_contracted_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_config(dir.path(), 3, 19, &out);
    let result = hamlet(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--cells",
        "1:2",
        "--fusions",
        "mat-concat",
    ]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "uat_heads,mat_heads,fusion,metric");
    assert_eq!(lines.len(), 2);
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cells[0], "1");
    assert_eq!(cells[1], "2");
    assert_eq!(cells[2], "mat-concat");
    let metric: f64 = cells[3].parse().unwrap();
    assert!((0.0..=1.0).contains(&metric));
}

#[test]
fn gradcheck_passes_and_lists_every_block_once() {
    let result = hamlet(&["gradcheck"]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let stdout = String::from_utf8_lossy(&result.stdout);
    let expected = [
        "matmul",
        "softmax",
        "relu",
        "elementwise",
        "dropout",
        "batch_norm",
        "cross_entropy",
        "temporal_pool",
        "conv2d",
        "lstm",
        "cooccurrence_encoder",
        "stub_encoder",
        "uat",
        "mat",
        "full_model",
    ];
    for block in expected {
        let count = stdout
            .lines()
            .filter(|l| l.split_whitespace().next() == Some(block))
            .count();
        assert_eq!(count, 1, "block '{block}' listed {count} times");
    }
}

#[test]
fn gradcheck_rejects_oversized_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_config(dir.path(), 2, 1, &out);
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("embedding_size = 16", "embedding_size = 64");
    std::fs::write(&config, text).unwrap();
    let result = hamlet(&["gradcheck", "--config", config.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(2));
}
