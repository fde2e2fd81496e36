//! End-to-end CLI behaviour on the smoke configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use zsar::encoder::VisualFeatureMatrix;
use zsar::pipeline::TRAIN_FEATURES_FILE;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn zsar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsar")).args(args).output().unwrap()
}

fn stage(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    zsar(&args)
}

/// `stage name -> ran/reused` from the per-stage stderr lines.
fn outcomes(output: &Output) -> BTreeMap<String, String> {
    String::from_utf8_lossy(&output.stderr)
        .lines()
        .filter_map(|l| {
            let parts: Vec<&str> = l.split_whitespace().collect();
            (parts.len() == 3 && (parts[1] == "ran" || parts[1] == "reused")).then(|| (parts[0].to_string(), parts[1].to_string()))
        })
        .collect()
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn smoke_doc() -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(smoke_config()).unwrap()).unwrap()
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    let missing = tmp.path().join("missing.json");
    assert_eq!(stage("run", &missing, &out, &[]).status.code(), Some(2));

    let mut doc = smoke_doc();
    doc["encoder"]["bogus"] = serde_json::json!(1);
    let unknown = write_json(tmp.path(), "unknown.json", &doc);
    assert_eq!(stage("run", &unknown, &out, &[]).status.code(), Some(2));

    let mut doc = smoke_doc();
    doc["encoder"]["temporal_kernel"] = serde_json::json!(4);
    let even = write_json(tmp.path(), "even.json", &doc);
    assert_eq!(stage("run", &even, &out, &[]).status.code(), Some(2));

    std::fs::write(tmp.path().join("broken.json"), "{ not json").unwrap();
    assert_eq!(stage("run", &tmp.path().join("broken.json"), &out, &[]).status.code(), Some(2));

    assert_eq!(zsar(&["run", "--out", out.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn rerun_reuses_every_stage_and_force_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let first = stage("run", &smoke_config(), &out, &[]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert!(outcomes(&first).values().all(|v| v == "ran"));
    assert_eq!(outcomes(&first).len(), 8);
    let table = String::from_utf8_lossy(&first.stdout).to_string();
    assert!(table.starts_with("| head | embeddings |"), "{table}");
    assert!(out.join("results.csv").exists() && out.join("hygiene.json").exists());

    let hygiene: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("hygiene.json")).unwrap()).unwrap();
    assert_eq!(hygiene["clean"], serde_json::json!(true));

    let second = stage("run", &smoke_config(), &out, &[]);
    assert!(second.status.success());
    assert!(outcomes(&second).values().all(|v| v == "reused"), "{:?}", outcomes(&second));
    assert_eq!(String::from_utf8_lossy(&second.stdout), table);

    let forced = stage("run", &smoke_config(), &out, &["--force"]);
    assert!(outcomes(&forced).values().all(|v| v == "ran"));
    assert_eq!(String::from_utf8_lossy(&forced.stdout), table);
}

#[test]
fn stage_command_stops_at_its_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let split = stage("make-split", &smoke_config(), &out, &[]);
    assert!(split.status.success());
    assert_eq!(outcomes(&split).keys().cloned().collect::<Vec<_>>(), vec!["generate", "make-split"]);
    assert!(out.join("split.json").exists());
    assert!(!out.join("encoder.zstg").exists());

    let enc = stage("train-encoder", &smoke_config(), &out, &[]);
    let o = outcomes(&enc);
    assert_eq!(o["generate"], "reused");
    assert_eq!(o["make-split"], "reused");
    assert_eq!(o["train-encoder"], "ran");
    assert!(out.join("encoder.zstg").exists());
}

#[test]
fn edited_features_rerun_only_their_consumers() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert!(stage("run", &smoke_config(), &out, &[]).status.success());
    let path = out.join(TRAIN_FEATURES_FILE);
    let mut features = VisualFeatureMatrix::load(&path).unwrap();
    features.features.data_mut()[0] += 0.25;
    features.save(&path).unwrap();

    let o = outcomes(&stage("run", &smoke_config(), &out, &[]));
    for s in ["generate", "make-split", "train-encoder", "extract-features"] {
        assert_eq!(o[s], "reused", "{s}");
    }
    for s in ["train-devise", "train-relation", "evaluate", "report"] {
        assert_eq!(o[s], "ran", "{s}");
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(stage("train-encoder", &smoke_config(), &a, &["--seed", "11"]).status.success());
    assert!(stage("train-encoder", &smoke_config(), &b, &["--seed", "12"]).status.success());
    assert_ne!(std::fs::read(a.join("encoder.zstg")).unwrap(), std::fs::read(b.join("encoder.zstg")).unwrap());
}

#[test]
fn report_aggregates_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let runs: Vec<PathBuf> = (1..=2).map(|s| tmp.path().join(format!("s{s}"))).collect();
    for (i, run) in runs.iter().enumerate() {
        let seed = (i + 1).to_string();
        assert!(stage("run", &smoke_config(), run, &["--seed", &seed]).status.success());
    }
    let agg = tmp.path().join("agg");
    let output = zsar(&["report", "--out", agg.to_str().unwrap(), runs[0].to_str().unwrap(), runs[1].to_str().unwrap()]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let csv = std::fs::read_to_string(agg.join("results.csv")).unwrap();
    assert!(csv.starts_with("head,embeddings,"), "{csv}");
    assert!(agg.join("results.md").exists());

    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(empty.join("reports")).unwrap();
    let output = zsar(&["report", "--out", agg.to_str().unwrap(), empty.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(3));
}

#[test]
fn dataset_directory_with_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let source = tmp.path().join("source");
    assert!(stage("generate", &smoke_config(), &source, &[]).status.success());

    let mut doc = smoke_doc();
    doc["dataset"] = serde_json::json!({ "path": "source/data" });
    doc["embeddings"] = serde_json::json!({ "path": "source/data/embeddings.csv", "sources": ["loaded"] });
    let config = write_json(tmp.path(), "external.json", &doc);
    let out = tmp.path().join("external");
    let output = stage("run", &config, &out, &[]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(out.join("reports/devise_loaded_zsl.json").exists());
    assert!(out.join("reports/relation_loaded_gzsl.json").exists());

    doc["embeddings"]["path"] = serde_json::json!("source/nowhere.csv");
    let broken = write_json(tmp.path(), "broken_path.json", &doc);
    let code = stage("run", &broken, &tmp.path().join("broken"), &[]).status.code();
    assert!(matches!(code, Some(2) | Some(3)), "{code:?}");
}
