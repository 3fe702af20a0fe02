//! The `dsvq` binary end to end: flags, exit codes, outputs.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::write_tiny_config;
use dsvq::volume::{read_manifest, Split};
use serde_json::Value;

fn dsvq(args: &[&str]) -> Output {
    dsvq_env(args, &[])
}

fn dsvq_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dsvq"));
    cmd.args(args).env_remove("NQ_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn dsvq")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn gen(out: &Path, n: usize, fracs: &str, seed: &str) -> Output {
    dsvq(&[
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--n-subjects",
        &n.to_string(),
        "--shape",
        "16x16x16",
        "--n-structures",
        "4",
        "--seed",
        seed,
        "--split-fracs",
        fracs,
    ])
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_splits_by_subject_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&gen(&a, 10, "0.6,0.2,0.2", "3"));
    ok(&gen(&b, 10, "0.6,0.2,0.2", "3"));
    let m = read_manifest(a.join("manifest.jsonl")).unwrap();
    let per = |s: Split| m.iter().filter(|e| e.split == s).count();
    assert_eq!([per(Split::Train), per(Split::Val), per(Split::Test)], [6, 2, 2]);
    assert_eq!(
        std::fs::read(a.join("manifest.jsonl")).unwrap(),
        std::fs::read(b.join("manifest.jsonl")).unwrap()
    );
    for e in &m {
        assert_eq!(std::fs::read(a.join(&e.path_a)).unwrap(), std::fs::read(b.join(&e.path_a)).unwrap());
    }
    assert_eq!(read_json(&a.join("gen-data_args.json"))["command"], "gen-data");
    assert_eq!(read_json(&a.join("dataset.json"))["n_subjects"], 10);
}

#[test]
fn invalid_fractions_and_unknown_flags_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = gen(&dir.path().join("x"), 10, "0.5,0.5,0.5", "0");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sum to 1"));
    assert_eq!(dsvq(&["gen-data", "--out", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(dsvq(&["train", "--out", "x", "--preset", "nope"]).status.code(), Some(2));
}

#[test]
fn seed_environment_variable_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&gen(&p("flag"), 4, "0.5,0.25,0.25", "7"));
    let env = dsvq_env(
        &["gen-data", "--out", p("env").to_str().unwrap(), "--n-subjects", "4", "--shape", "16x16x16", "--n-structures", "4", "--split-fracs", "0.5,0.25,0.25"],
        &[("NQ_SEED", "7")],
    );
    ok(&env);
    ok(&gen(&p("other"), 4, "0.5,0.25,0.25", "8"));
    let bytes = |n: &str| std::fs::read(p(n).join("subjects/sub-0000_a.nqv")).unwrap();
    assert_eq!(bytes("flag"), bytes("env"));
    assert_ne!(bytes("flag"), bytes("other"));
    let bad = dsvq_env(&["attn-bench", "--out", p("b.csv").to_str().unwrap()], &[("NQ_SEED", "abc")]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn attn_bench_reports_analytic_costs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let stdout = ok(&dsvq(&["attn-bench", "--shapes", "8x8x8,32x48x32", "--out", csv.to_str().unwrap()]));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(stdout, text);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "D,H,W,factorized_units,full_units,ratio");
    assert_eq!(lines[1], "8,8,8,12288,262144,21.333333");
    assert_eq!(lines[2], "32,48,32,5505024,2415919104,438.857143");
    let timed = dir.path().join("timed.csv");
    ok(&dsvq(&["attn-bench", "--shapes", "8x8x8", "--empirical", "--out", timed.to_str().unwrap()]));
    let row = std::fs::read_to_string(&timed).unwrap();
    let secs: f64 = row.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(secs > 0.0);
}

#[test]
fn train_resume_eval_swap_probe() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let s = |n: &str| p(n).to_str().unwrap().to_string();
    ok(&gen(&p("data"), 120, "0.5,0.1,0.4", "1"));
    let manifest = s("data/manifest.jsonl");
    write_tiny_config(&p("tiny.json"), 2, 1);

    let stdout = ok(&dsvq(&["train", "--config", &s("tiny.json"), "--data", &manifest, "--out", &s("run")]));
    assert!(stdout.contains("completed 3 steps"), "{stdout}");
    for f in ["final.nqck", "checkpoint_3d.nqck", "config.json", "train_log.jsonl", "train_args.json"] {
        assert!(p("run").join(f).exists(), "missing {f}");
    }
    let again = ok(&dsvq(&[
        "train",
        "--config",
        &s("tiny.json"),
        "--data",
        &manifest,
        "--out",
        &s("run"),
        "--resume",
        &s("run/final.nqck"),
    ]));
    assert!(again.starts_with("complete:"), "{again}");

    let ckpt = s("run/final.nqck");
    ok(&dsvq(&["eval", "--ckpt", &ckpt, "--data", &manifest, "--report", &s("eval"), "--images", "1"]));
    let r = read_json(&p("eval/report.json"));
    assert_eq!(r["split"], "test");
    assert_eq!(r["n_samples"], 96, "48 test subjects, two volumes each");
    assert_eq!(r["modalities"].as_array().unwrap().len(), 2);
    for m in r["modalities"].as_array().unwrap() {
        assert_eq!(m["dice_per_structure"].as_array().unwrap().len(), 4);
        assert!(m["psnr_mean"].as_f64().unwrap().is_finite());
        assert!(m["probe_accuracy"].as_f64().is_some());
    }
    assert!(r["codebook"]["perplexity"].as_f64().unwrap() >= 1.0);
    assert!(p("eval/samples.csv").exists());
    let pngs = std::fs::read_dir(p("eval")).unwrap().filter(|e| {
        e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")
    });
    assert!(pngs.count() >= 1);

    ok(&dsvq(&["swap", "--ckpt", &ckpt, "--data", &manifest, "--report", &s("swap"), "--images", "0"]));
    let sw = read_json(&p("swap/report.json"));
    let dirs: Vec<(String, String)> = sw["swap"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| (d["source"].as_str().unwrap().into(), d["target"].as_str().unwrap().into()))
        .collect();
    assert_eq!(dirs, [("A".into(), "B".into()), ("B".into(), "A".into())]);

    ok(&dsvq(&["probe", "--ckpt", &ckpt, "--data", &manifest, "--report", &s("probe"), "--shuffle-labels"]));
    let pr = read_json(&p("probe/probe.json"));
    assert_eq!(pr["shuffled_labels"], true);
    for k in ["attribute_a", "attribute_b"] {
        let acc = pr["probe"][k]["test_accuracy"].as_f64().unwrap();
        assert!((0.25..=0.75).contains(&acc), "{k}: shuffled-label accuracy {acc} far from chance");
    }

    let missing = dsvq(&["eval", "--ckpt", &s("nope.nqck"), "--data", &manifest, "--report", &s("e2")]);
    assert_eq!(missing.status.code(), Some(3));
}
