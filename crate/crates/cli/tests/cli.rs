use std::path::{Path, PathBuf};

use adaprompt_cli::main_with;
use serde_json::Value;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn run(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("adaprompt").chain(args.iter().copied());
    let code = main_with(argv, &mut out, &mut err);
    Run { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

fn ok(args: &[&str]) -> String {
    let r = run(args);
    assert_eq!(r.code, 0, "{args:?}: {}", r.err);
    r.out
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

const SMALL: &str = r#"{
  "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32},
  "pretrain": {"epochs": 1},
  "prompt_layer": {"d_hidden": 8, "s": 2},
  "epochs": 3,
  "learning_rate": 0.003
}"#;

/// Corpus, split files and a pretrained checkpoint in a fresh directory.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let d = dir.path();
    ok(&["synth-data", "--n-per-domain", "40", "--out", &p(d, "corpus.jsonl"), "--glosses", &p(d, "g.txt"), "--seed", "4"]);
    let corpus = std::fs::read_to_string(d.join("corpus.jsonl")).unwrap();
    let lines: Vec<&str> = corpus.lines().collect();
    std::fs::write(d.join("train.jsonl"), lines[..30].join("\n")).unwrap();
    std::fs::write(d.join("test.jsonl"), lines[40..80].join("\n")).unwrap();
    let cfg_s = cfg.to_str().unwrap();
    ok(&[
        "pretrain-mlm",
        "--data",
        &p(d, "corpus.jsonl"),
        "--extra-text",
        &p(d, "g.txt"),
        "--config",
        cfg_s,
        "--out",
        &p(d, "lm.ckpt"),
        "--seed",
        "1",
    ]);
    (dir, cfg)
}

#[test]
fn synth_data_is_deterministic_in_seed() {
    let a = ok(&["synth-data", "--n-per-domain", "10", "--seed", "5"]);
    let b = ok(&["synth-data", "--n-per-domain", "10", "--seed", "5"]);
    let c = ok(&["synth-data", "--n-per-domain", "10", "--seed", "6"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().count(), 50);
}

#[test]
fn pipeline_train_eval_predict() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let cfg = cfg.to_str().unwrap();
    let train = |regime: &str, out: &str| {
        ok(&[
            "train",
            "--checkpoint",
            &p(d, "lm.ckpt"),
            "--config",
            cfg,
            "--regime",
            regime,
            "--train",
            &p(d, "train.jsonl"),
            "--test",
            &p(d, "test.jsonl"),
            "--out",
            &p(d, out),
            "--seed",
            "7",
        ])
    };
    let history: Value = serde_json::from_str(&train("ap_full", "ap.ckpt")).unwrap();
    assert_eq!(history["epochs"].as_array().unwrap().len(), 3);
    assert_eq!(history, serde_json::from_str::<Value>(&train("ap_full", "ap2.ckpt")).unwrap());
    assert_eq!(std::fs::read(d.join("ap.ckpt")).unwrap(), std::fs::read(d.join("ap2.ckpt")).unwrap());

    // checkpointed weights reproduce the in-memory accuracy exactly
    let eval: Value =
        serde_json::from_str(&ok(&["eval", "--checkpoint", &p(d, "ap.ckpt"), "--data", &p(d, "test.jsonl"), "--config", cfg]))
            .unwrap();
    assert_eq!(eval["accuracy"], history["final_accuracy"]);
    assert_eq!(eval["n"], 40);

    let pred: Value =
        serde_json::from_str(&ok(&["predict", "--checkpoint", &p(d, "ap.ckpt"), "--text", "great phone", "--config", cfg]))
            .unwrap();
    let post = pred["posterior"].as_array().unwrap();
    let total: f64 = post.iter().map(|e| e[1].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(post.iter().any(|e| e[0] == pred["label"]));

    let hpl: Value = serde_json::from_str(&train("HPL", "hpl.ckpt")).unwrap();
    assert!(hpl["final_accuracy"].is_number());
}

#[test]
fn ap_regime_without_prompt_layer_config_fails() {
    let (dir, _) = workspace();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"regime": "AP_FIXED_LM", "prompt_layer": null}"#).unwrap();
    let r = run(&[
        "train",
        "--checkpoint",
        &p(d, "lm.ckpt"),
        "--config",
        &p(d, "bad.json"),
        "--train",
        &p(d, "train.jsonl"),
        "--out",
        &p(d, "x.ckpt"),
    ]);
    assert_eq!(r.code, 1);
    assert!(r.err.contains("prompt_layer"), "{}", r.err);
    assert!(!d.join("x.ckpt").exists());
}

#[test]
fn experiment_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    let json = r#"{
      "protocol": "PRE_AP",
      "data": {"synthetic": null},
      "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32},
      "prompt_layer": {"d_hidden": 8, "s": 2},
      "pretrain": {"epochs": 1},
      "hyper": {"epochs": 2, "pre_ap_epochs": 1},
      "patterns": ["it was [MASK] ,"],
      "verbalizer": [["positive", "good"], ["negative", "bad"]],
      "seeds": [1, 2],
      "k_train": 8,
      "n_test": 20,
      "target_domain": "movie",
      "source_per_domain": 20,
      "source_test_per_domain": 10
    }"#;
    let mut v: Value = serde_json::from_str(json).unwrap();
    let synth = serde_json::to_value(adaprompt_core::experiments::SyntheticSpec::benchmark(100, 3)).unwrap();
    v["data"]["synthetic"] = synth;
    std::fs::write(&spec, serde_json::to_string(&v).unwrap()).unwrap();
    let s = spec.to_str().unwrap();
    let a = ok(&["experiment", "--spec", s, "--format", "jsonl", "--seed", "1"]);
    let b = ok(&["experiment", "--spec", s, "--format", "jsonl", "--seed", "1"]);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 3);
    let table = ok(&["experiment", "--spec", s]);
    assert!(table.contains("PRE_AP") && table.contains("mean"));
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(run(&["frobnicate"]).code, 2);
    assert_eq!(run(&["eval", "--bogus"]).code, 2);
    assert_eq!(run(&["experiment"]).code, 2);
    assert_eq!(run(&["experiment", "--protocol", "compare", "--spec", "x"]).code, 2);
    assert_eq!(run(&["train", "--checkpoint", "a", "--out", "b", "--regime", "SOMETHING"]).code, 2);
    let help = run(&["--help"]);
    assert_eq!(help.code, 0);
    assert!(help.out.contains("pretrain-mlm"));
}

#[test]
fn runtime_errors_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let missing = p(dir.path(), "missing.ckpt");
    let r = run(&["eval", "--checkpoint", &missing, "--data", &missing]);
    assert_eq!(r.code, 1);
    assert!(r.err.starts_with("error:"));
    std::fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint at all").unwrap();
    let r = run(&["predict", "--checkpoint", &p(dir.path(), "junk.ckpt"), "--text", "hi"]);
    assert_eq!(r.code, 1);
    assert!(r.err.contains("format"), "{}", r.err);
}
