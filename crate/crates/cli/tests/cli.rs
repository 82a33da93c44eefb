use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mods(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mods")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, json).unwrap();
    path
}

/// A small dataset and model that train in well under a second.
const SMALL: &str = r#"{
  "synth": {
    "n_samples": 40,
    "dims": { "l": 4, "a": 3, "v": 2 },
    "seq_len": { "l": [4, 4], "a": [2, 3], "v": [2, 3] },
    "redundancy": 2,
    "split_fractions": [0.6, 0.2, 0.2]
  },
  "model": { "d": 8, "pcca_depth": 2, "heads": 2, "max_nodes": 4, "max_len": 16 },
  "train": { "learning_rate": 0.003, "batch_size": 8, "max_epochs": 3, "patience": 10 }
}"#;

fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn gen_data(tmp: &Path, name: &str, seed: &str) -> (PathBuf, PathBuf) {
    let config = write_config(tmp, SMALL);
    let data = tmp.join(name);
    let o = mods(&["gen-data", "--config", config.to_str().unwrap(), "--seed", seed, "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (config, data)
}

#[test]
fn gen_data_writes_manifest_and_three_files_per_sample_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, a) = gen_data(tmp.path(), "a", "7");
    let (_, b) = gen_data(tmp.path(), "b", "7");
    let files = dir_contents(&a);
    assert_eq!(files.len(), 1 + 3 * 40);
    assert!(files.iter().any(|(n, _)| n == "manifest.json"));
    assert_eq!(files, dir_contents(&b));
    let (_, c) = gen_data(tmp.path(), "c", "8");
    assert_ne!(files, dir_contents(&c));
}

#[test]
fn invalid_configs_exit_with_status_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let out = out.to_str().unwrap();
    for json in [
        r#"{ "synth": { "dominance_mix": [0.5, 0.5, 0.5] } }"#,
        r#"{ "synth": { "colour": "blue" } }"#,
        r#"{ "model": { "heads": 3 } }"#,
        "not json",
    ] {
        let config = write_config(tmp.path(), json);
        let o = mods(&["gen-data", "--config", config.to_str().unwrap(), "--out", out]);
        assert_eq!(code(&o), 2, "{json}: {}", stderr(&o));
        assert!(stderr(&o).contains("config error"), "{}", stderr(&o));
    }
    let o = mods(&["gen-data", "--out", out, "--preset", "imdb-like"]);
    assert_eq!(code(&o), 2);
    let o = mods(&["train", "--data", out, "--out", out, "--ablation", "no_everything"]);
    assert_eq!(code(&o), 2);
    let o = mods(&["gen-data"]);
    assert_eq!(code(&o), 2, "missing --out");
}

#[test]
fn missing_dataset_exits_with_status_3() {
    let tmp = tempfile::tempdir().unwrap();
    let nowhere = tmp.path().join("nowhere");
    let o = mods(&["train", "--data", nowhere.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn train_eval_and_inspect_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, data) = gen_data(tmp.path(), "data", "1");
    let (config, data) = (config.to_str().unwrap(), data.to_str().unwrap());
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();

    let o = mods(&["train", "--config", config, "--data", data, "--out", run_s, "--ablation", "no_pcca", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["best.ckpt", "last.ckpt", "history.json", "metrics.json", "config.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let history: Value = serde_json::from_str(&fs::read_to_string(run.join("history.json")).unwrap()).unwrap();
    assert_eq!(history["ablation"], "no_pcca");
    assert_eq!(history["model"]["ablation"]["no_pcca"], true);
    assert_eq!(history["train"]["seed"], 3);
    assert_eq!(history["epochs"].as_array().unwrap().len(), 3);

    let ckpt = run.join("best.ckpt");
    let eval_dir = tmp.path().join("eval");
    let eval = || {
        mods(&[
            "eval",
            "--config",
            config,
            "--data",
            data,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--split",
            "test",
            "--out",
            eval_dir.to_str().unwrap(),
        ])
    };
    let o = eval();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(eval_dir.join("selections.csv")).unwrap();
    let metrics = fs::read(eval_dir.join("metrics.json")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "id,w_a,w_t,w_v,primary,planted_primary,y_true,y_pred");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let manifest: Value = serde_json::from_str(&fs::read_to_string(Path::new(data).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), manifest["splits"]["test"].as_array().unwrap().len());
    for r in &rows {
        let w: f64 = r[1..4].iter().map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((w - 1.0).abs() < 1e-6, "{r:?}");
        assert!(["l", "a", "v"].contains(&r[4]) && ["l", "a", "v"].contains(&r[5]));
    }
    let m: Value = serde_json::from_slice(&metrics).unwrap();
    assert_eq!(m["split"], "test");
    assert!(m["mae"].as_f64().unwrap() >= 0.0);

    let o = eval();
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(eval_dir.join("selections.csv")).unwrap(), csv);
    assert_eq!(fs::read(eval_dir.join("metrics.json")).unwrap(), metrics);

    let o = mods(&["inspect-weights", "--data", data, "--checkpoint", ckpt.to_str().unwrap(), "--split", "test"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let weights: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let weights = weights.as_array().unwrap();
    assert_eq!(weights.len(), rows.len());
    for (w, r) in weights.iter().zip(&rows) {
        assert_eq!(w["id"], r[0]);
        assert_eq!(w["primary"], r[4]);
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let (config, data) = gen_data(tmp.path(), "data", "2");
    let (config, data) = (config.to_str().unwrap(), data.to_str().unwrap());
    let run = |name: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec!["train", "--config", config, "--data", data, "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = mods(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    for f in ["best.ckpt", "last.ckpt", "history.json", "metrics.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    // Two epochs, then resume to three.
    let short = tmp.path().join("short.json");
    fs::write(&short, SMALL.replace("\"max_epochs\": 3", "\"max_epochs\": 2")).unwrap();
    let half = tmp.path().join("half");
    let o = mods(&["train", "--config", short.to_str().unwrap(), "--data", data, "--out", half.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let last = half.join("last.ckpt");
    let resumed = run("resumed", &["--resume", last.to_str().unwrap()]);
    for f in ["best.ckpt", "last.ckpt", "history.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(resumed.join(f)).unwrap(), "{f}");
    }

    let o = mods(&["train", "--config", config, "--data", data, "--out", tmp.path().join("x").to_str().unwrap(), "--resume", last.to_str().unwrap(), "--ablation", "no_gdc"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn preset_sets_paper_hyperparameters() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, data) = gen_data(tmp.path(), "data", "4");
    let config = write_config(
        tmp.path(),
        r#"{ "model": { "d": 8, "pcca_depth": 1, "heads": 2, "max_nodes": 4, "max_len": 16 },
             "train": { "max_epochs": 1 } }"#,
    );
    let out = tmp.path().join("run");
    let o = mods(&[
        "train",
        "--preset",
        "sims-like",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let h: Value = serde_json::from_str(&fs::read_to_string(out.join("history.json")).unwrap()).unwrap();
    assert_eq!(h["train"]["learning_rate"], 1e-5);
    assert_eq!(h["train"]["weight_decay"], 1e-2);
    assert_eq!(h["model"]["alpha"], 0.01);
    assert_eq!(h["model"]["d"], 8, "file keys override the preset");
}

#[test]
fn divergence_exits_with_status_4_and_keeps_the_last_finite_state() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, data) = gen_data(tmp.path(), "data", "5");
    let config = write_config(
        tmp.path(),
        r#"{ "model": { "d": 8, "pcca_depth": 1, "heads": 2, "max_nodes": 4, "max_len": 16 },
             "train": { "learning_rate": 1e300, "precision": "f64", "max_epochs": 5 } }"#,
    );
    let out = tmp.path().join("run");
    let o = mods(&["train", "--config", config.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
    assert!(out.join("last.ckpt").is_file());
}

#[test]
fn gradcheck_passes_and_names_a_corrupted_parameter() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mods(&["gradcheck", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("gradcheck.json")).unwrap()).unwrap();
    let modules: Vec<_> = report.as_array().unwrap().iter().map(|m| m["module"].as_str().unwrap()).collect();
    assert_eq!(modules, ["numcore", "gdc.shared", "gdc.full", "mselector", "pcca", "objective", "forward"]);
    assert!(report.as_array().unwrap().iter().all(|m| m["max_rel_error"].as_f64().unwrap() < 1e-4));

    let o = mods(&["gradcheck", "--corrupt", "gdc.edge.wq"]);
    assert_eq!(code(&o), 4);
    assert!(stdout(&o).contains("gdc.edge.wq: relative error"), "{}", stdout(&o));
}
