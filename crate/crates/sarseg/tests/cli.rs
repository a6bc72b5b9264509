mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sarseg::format::write_dataset;

fn sarseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sarseg")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for p in [&a, &b] {
        let o = sarseg(&["synth", "--out", p.to_str().unwrap(), "--scenes", "2", "--size", "48", "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(tree(&a), tree(&b));
    assert!(!tree(&a).is_empty());
}

#[test]
fn build_dataset_from_synthesized_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let (scenes, ds) = (dir.path().join("scenes"), dir.path().join("ds"));
    let s = scenes.to_str().unwrap();
    assert!(sarseg(&["synth", "--out", s, "--scenes", "4", "--size", "128"]).status.success());
    let before = tree(&scenes);
    let o = sarseg(&[
        "build-dataset",
        "--scenes",
        s,
        "--out",
        ds.to_str().unwrap(),
        "--anchors",
        "2000",
        "--split",
        "m00=train",
        "--split",
        "m01=val",
        "--split",
        "m02=test",
        "--split",
        "m03=pretrain",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(tree(&scenes), before);
    let back = sarseg::format::read_dataset(&ds).unwrap();
    assert_eq!(back.patches.len(), 16);
    // Writing into the input directory is refused.
    let o = sarseg(&["build-dataset", "--scenes", s, "--out", s]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn gradcheck_single_op_passes() {
    let o = sarseg(&["gradcheck", "--op", "add", "--seeds", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
}

#[test]
fn unknown_gradcheck_op_is_a_config_error() {
    let o = sarseg(&["gradcheck", "--op", "no_such_op"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[config]"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(sarseg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sarseg(&["synth"]).status.code(), Some(2));
    assert_eq!(sarseg(&["synth", "--out", "x", "--scenes", "many"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_is_one_config_line() {
    let o = sarseg(&["finetune", "--out", "nowhere"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[config]"), "{err}");
}

#[test]
fn every_command_has_help() {
    for cmd in ["synth", "build-dataset", "pretrain", "finetune", "eval", "predict", "gradcheck", "ablation"] {
        let o = sarseg(&[cmd, "--help"]);
        assert!(o.status.success(), "{cmd}");
        assert!(String::from_utf8_lossy(&o.stdout).contains("Usage"), "{cmd}");
    }
    assert!(sarseg(&["--help"]).status.success());
}

#[test]
fn corrupted_dataset_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    write_dataset(&ds, &common::small_dataset(0)).unwrap();
    let f = ds.join("patches/000000.img");
    let mut bytes = fs::read(&f).unwrap();
    bytes[..4].copy_from_slice(b"JUNK");
    fs::write(&f, bytes).unwrap();
    let o = sarseg(&["finetune", "--dataset", ds.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[format]"), "{}", stderr(&o));
}

#[test]
fn finetune_eval_predict_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let data = common::small_dataset(0);
    write_dataset(&ds, &data).unwrap();
    let before = tree(&ds);
    let (d, run) = (ds.to_str().unwrap(), dir.path().join("run"));
    let r = run.to_str().unwrap();
    let o = sarseg(&["finetune", "--dataset", d, "--out", r, "--epochs", "1", "--batch-size", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("history.jsonl").exists() && run.join("best/checkpoint.json").exists());

    let best = run.join("best");
    let metrics = dir.path().join("eval/val.json");
    let o =
        sarseg(&["eval", "--dataset", d, "--checkpoint", best.to_str().unwrap(), "--out", metrics.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(v["task"], "lulc");
    assert_eq!(v["iou"].as_array().unwrap().len(), data.num_classes());
    let csv = fs::read_to_string(metrics.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), data.num_classes() + 2);

    let o = sarseg(&["eval", "--dataset", d, "--checkpoint", best.to_str().unwrap(), "--task", "water"]);
    assert_eq!(o.status.code(), Some(3));

    let pred = dir.path().join("pred");
    let o = sarseg(&[
        "predict",
        "--dataset",
        d,
        "--checkpoint",
        best.to_str().unwrap(),
        "--split",
        "val",
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let n = data.split(sarseg_core::sampling::Split::Val).len();
    let lbl: Vec<_> = fs::read_dir(&pred)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension() == Some("lbl".as_ref()))
        .collect();
    assert_eq!(lbl.len(), n);
    for p in &lbl {
        let (h, w, labels) = sarseg::format::read_labels(p).unwrap();
        assert_eq!((h, w), (64, 64));
        assert!(labels.iter().all(|&l| (l as usize) < data.num_classes()));
    }
    assert!(pred.join("predictions.json").exists());

    assert_eq!(tree(&ds), before);
}
