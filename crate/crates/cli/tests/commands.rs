use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hsp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hsp")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

/// Parses a `key=value key=value` summary line.
fn fields(line: &str) -> Vec<(String, String)> {
    line.split(' ')
        .map(|kv| {
            let (k, v) = kv.split_once('=').unwrap_or_else(|| panic!("not key=value: {kv:?} in {line:?}"));
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn field(line: &str, key: &str) -> String {
    fields(line).into_iter().find(|(k, _)| k == key).unwrap_or_else(|| panic!("{key} missing in {line}")).1
}

fn gen(out: &Path, task: &str, count: &str) -> Output {
    hsp(&["gen-data", "--task", task, "--count", count, "--seed", "7", "--size", "32", "--out", out.to_str().unwrap()])
}

/// Small run config over a 32 px dataset in `dir/data`.
fn setup(dir: &Path, extra_train: &str) -> PathBuf {
    let o = gen(&dir.join("data"), "blobs", "12");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let config = format!(
        r#"{{
  "model": {{
    "encoder": {{ "image_size": 32, "width": 32, "depth": 3, "global_layers": [0, 1, 2], "heads": 2, "window_size": 2, "lora_rank": 2, "mlp_ratio": 2 }},
    "decoder": {{ "width": 16, "heads": 2, "num_classes": 2 }},
    "prompt_count": 2
  }},
  "train": {{ "epochs": 1, {extra_train} }},
  "data": {{ "source": "data/source", "target": "data/target" }}
}}"#
    );
    let path = dir.join("run.json");
    std::fs::write(&path, config).unwrap();
    path
}

fn first_image(dir: &Path) -> PathBuf {
    let root = dir.join("data/source");
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(root.join("manifest.json")).unwrap()).unwrap();
    root.join(m["splits"]["train"][0]["image"].as_str().unwrap())
}

#[test]
fn gen_data_writes_manifests_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = gen(&a, "instances", "10");
    assert!(o.status.success());
    let line = stdout(&o);
    assert_eq!(field(&line, "train"), "7");
    assert_eq!(field(&line, "test"), "3");
    assert!(gen(&b, "instances", "10").status.success());
    for variant in ["source", "target"] {
        let read = |root: &Path| std::fs::read(root.join(variant).join("manifest.json")).unwrap();
        assert_eq!(read(&a), read(&b));
        let manifest: serde_json::Value = serde_json::from_slice(&read(&a)).unwrap();
        for entry in manifest["splits"]["train"].as_array().unwrap() {
            let img = entry["image"].as_str().unwrap();
            assert_eq!(std::fs::read(a.join(variant).join(img)).unwrap(), std::fs::read(b.join(variant).join(img)).unwrap());
        }
    }
}

#[test]
fn invalid_task_lists_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let o = gen(&dir.path().join("x"), "cells", "4");
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    for t in ["blobs", "vessels", "instances"] {
        assert!(err.contains(t), "{err}");
    }
}

#[test]
fn existing_out_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    assert!(gen(&out, "blobs", "4").status.success());
    assert_eq!(gen(&out, "blobs", "4").status.code(), Some(2));
    let o = hsp(&["gen-data", "--task", "blobs", "--count", "4", "--size", "32", "--out", out.to_str().unwrap(), "--force"]);
    assert!(o.status.success());
}

#[test]
fn invalid_counts_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = hsp(&["gen-data", "--task", "blobs", "--count", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn config_errors_exit_2_and_missing_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), r#""batch_size": 4"#);
    let out = dir.path().join("out");
    let text = std::fs::read_to_string(&config).unwrap().replace("\"epochs\"", "\"epoch_count\"");
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, text).unwrap();
    assert_eq!(hsp(&["train", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.code(), Some(2));
    let invalid = std::fs::read_to_string(&config).unwrap().replace("\"lora_rank\": 2", "\"lora_rank\": 64");
    std::fs::write(&bad, invalid).unwrap();
    assert_eq!(hsp(&["train", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    assert_eq!(hsp(&["train", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.code(), Some(3));
    assert!(!out.exists(), "validation failures must not create --out");
    let o = hsp(&["eval", "--checkpoint", missing.to_str().unwrap(), "--manifest", ".", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), r#""learning_rate": 1e30, "batch_size": 1"#);
    let out = dir.path().join("out");
    let o = hsp(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_eval_heatmaps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), r#""batch_size": 4"#);
    let run = dir.path().join("run");
    let o = hsp(&["train", "--config", config.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    assert_eq!(field(&line, "epochs"), "1");
    for f in ["checkpoint.hspc", "history.jsonl", "report.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let ckpt = run.join("checkpoint.hspc");
    let eval = dir.path().join("eval");
    let manifest = dir.path().join("data/target");
    let o = hsp(&[
        "eval", "--checkpoint", ckpt.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(), "--split", "test",
        "--out", eval.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    let keys: Vec<String> = fields(&line).into_iter().map(|(k, _)| k).collect();
    assert_eq!(keys, ["dice", "iou", "hd"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["per_image"].as_array().unwrap().len(), 4);
    let dice: f64 = field(&line, "dice").parse().unwrap();
    assert!((report["aggregate"]["dice"].as_f64().unwrap() - dice).abs() < 1e-4);

    let image = first_image(dir.path());
    let maps = dir.path().join("maps");
    let o = hsp(&["heatmaps", "--checkpoint", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(), "--out", maps.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "files"), "12");
    assert_eq!(std::fs::read_dir(&maps).unwrap().count(), 12);
}

#[test]
fn ablate_writes_six_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), r#""batch_size": 4"#);
    let out = dir.path().join("ablate");
    let o = hsp(&["ablate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "variants"), "6");
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,dice,hd,params");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("Ft-SAM,"));
}

#[test]
fn sweep_writes_csv_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), r#""batch_size": 4"#);
    let out = dir.path().join("sweep");
    let o = hsp(&["sweep", "--config", config.to_str().unwrap(), "--counts", "1,3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "counts"), "2");
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(std::fs::read(out.join("sweep.pgm")).unwrap().starts_with(b"P5"));
    let o = hsp(&["sweep", "--config", config.to_str().unwrap(), "--counts", "0", "--out", dir.path().join("s2").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn heatmaps_reject_models_without_prompt_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), r#""batch_size": 4"#);
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("\"prompt_count\": 2", "\"prompt_count\": 2, \"architecture\": { \"qa_pairs\": false, \"hierarchical\": true, \"skip\": true }");
    std::fs::write(&config, text).unwrap();
    let run = dir.path().join("run");
    assert!(hsp(&["train", "--config", config.to_str().unwrap(), "--out", run.to_str().unwrap()]).status.success());
    let image = first_image(dir.path());
    let o = hsp(&[
        "heatmaps", "--checkpoint", run.join("checkpoint.hspc").to_str().unwrap(), "--image", image.to_str().unwrap(),
        "--out", dir.path().join("maps").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
