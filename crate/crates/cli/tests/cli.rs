// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cmprobe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmprobe"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cmprobe(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn labels_manifest(dir: &Path, labels: &[(&str, &str)]) -> PathBuf {
    let text: String = labels
        .iter()
        .map(|(id, label)| {
            format!(
                "{{\"utt_id\":\"{id}\",\"path\":\"{id}.lact\",\"label\":\"{label}\",\"corpus\":\"c\",\"attack\":\"\",\"split\":\"test\"}}\n"
            )
        })
        .collect();
    let path = dir.join("labels.jsonl");
    fs::write(&path, text).unwrap();
    path
}

const TRIALS: [(&str, &str); 4] = [("a", "bonafide"), ("b", "bonafide"), ("c", "spoof"), ("d", "spoof")];

#[test]
fn eer_of_perfect_separation() {
    let dir = tempfile::tempdir().unwrap();
    labels_manifest(dir.path(), &TRIALS);
    fs::write(dir.path().join("s.tsv"), "a\t2.0\nb\t1.5\nc\t-1.0\nd\t-3.0\n").unwrap();
    let out = ok(dir.path(), &["eer", "--scores", "s.tsv", "--manifest", "labels.jsonl"]);
    assert_eq!(out, "0.000000 (0.00%)\n");
}

#[test]
fn identity_fusion_model_keeps_scores() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = "a\t2.5000000000000000e0\nb\t-1.2500000000000000e-1\nc\t3.0000000000000000e0\n";
    fs::write(dir.path().join("sys.tsv"), tsv).unwrap();
    fs::write(
        dir.path().join("id.json"),
        r#"{"system_tags": ["sys"], "alpha": [1.0], "beta": 0.0, "prior": 0.5}"#,
    )
    .unwrap();
    ok(dir.path(), &["fuse-apply", "--model", "id.json", "--scores", "sys.tsv", "--out", "fused.tsv"]);
    assert_eq!(fs::read_to_string(dir.path().join("fused.tsv")).unwrap(), tsv);
}

#[test]
fn errors_are_one_line_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    labels_manifest(dir.path(), &TRIALS);
    fs::write(dir.path().join("bad.json"), r#"{"train": {"learning_rate": 1.0}}"#).unwrap();
    let cases: [&[&str]; 3] = [
        &["eer", "--scores", "missing.tsv", "--manifest", "labels.jsonl"],
        &["train", "--train", "labels.jsonl", "--val", "labels.jsonl", "--head", "mp", "--config", "bad.json", "--out", "x.lhck"],
        &["weights", "--checkpoint", "labels.jsonl", "--out", "w.csv"],
    ];
    for args in cases {
        let out = cmprobe(dir.path(), args);
        assert!(!out.status.success(), "{args:?} succeeded");
        let stderr = String::from_utf8(out.stderr).unwrap();
        assert_eq!(stderr.lines().count(), 1, "{stderr}");
        assert!(stderr.starts_with("error: "), "{stderr}");
    }
}

#[test]
fn unscored_trial_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    labels_manifest(dir.path(), &TRIALS);
    fs::write(dir.path().join("s.tsv"), "a\t2.0\nb\t1.5\nc\t-1.0\n").unwrap();
    let out = cmprobe(dir.path(), &["eer", "--scores", "s.tsv", "--manifest", "labels.jsonl"]);
    assert!(!out.status.success());
}

const PROFILE: &str = r#"{
  "blocks": [
    { "corpus": "indomain", "split": "train", "n_bona": 40, "n_spoof": 40 },
    { "corpus": "indomain", "split": "validation", "n_bona": 20, "n_spoof": 20 },
    { "corpus": "indomain", "split": "fusion", "n_bona": 30, "n_spoof": 30 },
    { "corpus": "ood", "split": "test", "n_bona": 30, "n_spoof": 30 }
  ],
  "profile": {
    "n_layers": 3,
    "n_features": 4,
    "frames_per_utt": [20, 40],
    "separability": [0.2, 0.8, 0.3],
    "noise_sigma": 1.0,
    "corpora": [
      { "corpus_tag": "indomain", "separability_scale": 1.0 },
      { "corpus_tag": "ood", "separability_scale": 0.5, "mean_offset_scale": 0.5 }
    ],
    "seed": 3
  }
}"#;

const RUN: &str = r#"{ "train": { "batch_size": 16, "lr": 0.003, "min_epochs": 2, "max_epochs": 3, "segment_frames": 20, "embed_dim": 8, "n_heads": 2 } }"#;
const RUN_REORDERED: &str = r#"{ "train": { "n_heads": 2, "embed_dim": 8, "segment_frames": 20, "max_epochs": 3, "min_epochs": 2, "lr": 0.003, "batch_size": 16 } }"#;

/// Runs the whole workflow inside `dir` and returns every file it wrote.
fn pipeline(dir: &Path, run: &str) -> Vec<(String, Vec<u8>)> {
    fs::write(dir.join("profile.json"), PROFILE).unwrap();
    fs::write(dir.join("run.json"), run).unwrap();
    let steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--profile", "profile.json", "--out", "bb"],
        vec![
            "sweep", "--train", "bb/indomain_train.jsonl", "--val", "bb/indomain_validation.jsonl",
            "--eval", "bb/ood_test.jsonl", "--config", "run.json", "--out", "out/sweep.csv",
        ],
        vec![
            "train", "--train", "bb/indomain_train.jsonl", "--val", "bb/indomain_validation.jsonl",
            "--head", "mhfa", "--config", "run.json", "--out", "out/mhfa.lhck",
        ],
        vec![
            "train", "--train", "bb/indomain_train.jsonl", "--val", "bb/indomain_validation.jsonl",
            "--head", "mp", "--layer", "1", "--config", "run.json", "--out", "out/mp1.lhck",
        ],
        vec!["weights", "--checkpoint", "out/mhfa.lhck", "--out", "out/weights.csv"],
        vec!["evaluate", "--checkpoint", "out/mhfa.lhck", "--manifest", "bb/ood_test.jsonl", "--out", "out/eval.csv"],
        vec!["score", "--checkpoint", "out/mhfa.lhck", "--manifest", "bb/indomain_fusion.jsonl", "--out", "out/fit/mhfa.tsv"],
        vec!["score", "--checkpoint", "out/mp1.lhck", "--manifest", "bb/indomain_fusion.jsonl", "--out", "out/fit/mp1.tsv"],
        vec!["score", "--checkpoint", "out/mhfa.lhck", "--manifest", "bb/ood_test.jsonl", "--out", "out/ood/mhfa.tsv"],
        vec!["score", "--checkpoint", "out/mp1.lhck", "--manifest", "bb/ood_test.jsonl", "--out", "out/ood/mp1.tsv"],
        vec![
            "fuse-fit", "--scores", "out/fit/mhfa.tsv", "out/fit/mp1.tsv", "--manifest", "bb/indomain_fusion.jsonl",
            "--out", "out/lr.json",
        ],
        vec![
            "fuse-fit", "--mode", "sum", "--scores", "out/fit/mhfa.tsv", "out/fit/mp1.tsv", "--manifest",
            "bb/indomain_fusion.jsonl", "--out", "out/sum.json",
        ],
        vec!["fuse-apply", "--model", "out/lr.json", "--scores", "out/ood/mhfa.tsv", "out/ood/mp1.tsv", "--out", "out/ood/lr.tsv"],
        vec!["fuse-apply", "--model", "out/sum.json", "--scores", "out/ood/mhfa.tsv", "out/ood/mp1.tsv", "--out", "out/ood/sum.tsv"],
        vec![
            "report", "--sweep", "out/sweep.csv", "--mhfa", "out/eval.csv", "--weights", "out/weights.csv",
            "--in-domain", "indomain", "--out", "out/report",
        ],
    ];
    for step in &steps {
        ok(dir, step);
    }
    let eer = ok(dir, &["eer", "--scores", "out/ood/lr.tsv", "--manifest", "bb/ood_test.jsonl"]);
    assert!(eer.ends_with("%)\n"), "{eer}");

    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path(), RUN);
    let second = pipeline(b.path(), RUN_REORDERED);
    let names = |f: &[(String, Vec<u8>)]| f.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    assert_eq!(names(&first), names(&second));
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        if name == "run.json" {
            continue;
        }
        assert!(x == y, "{name} differs between runs");
    }
    for expected in [
        "out/sweep.csv.meta.json",
        "out/mhfa.history.csv",
        "out/ood/lr.tsv.meta.json",
        "out/report/table.tsv",
        "out/report/sweep_plot.tsv",
        "out/report/weights_plot.tsv",
        "bb/ood_test.jsonl.meta.json",
    ] {
        assert!(first.iter().any(|(n, _)| n == expected), "missing {expected}");
    }
    let table = &first.iter().find(|(n, _)| n == "out/report/table.tsv").unwrap().1;
    let table = String::from_utf8_lossy(table);
    assert!(table.starts_with("backbone\tbsl_layer\tood_bsl\tood_mhfa\tavg_bsl"), "{table}");
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn seed_flag_changes_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("profile.json"), PROFILE).unwrap();
    ok(dir.path(), &["synth", "--profile", "profile.json", "--out", "a"]);
    ok(dir.path(), &["--seed", "4", "synth", "--profile", "profile.json", "--out", "b"]);
    let meta = |d: &str| fs::read_to_string(dir.path().join(d).join("ood_test.jsonl.meta.json")).unwrap();
    assert_ne!(meta("a"), meta("b"));
    assert!(meta("b").contains("\"seed\": 4"));
}
