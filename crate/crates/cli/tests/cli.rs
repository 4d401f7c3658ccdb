use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn tpt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"{
  "seed": 3,
  "splits": {"paired_a": 16, "paired_b": 8, "text_a": 0, "text_b": 24, "test_a": 4, "test_b": 4},
  "first_pass": {
    "encoder": {"dim": 8},
    "predictor": {"embed_dim": 4, "hidden": 8, "layers": 1},
    "joiner": {"dim": 8}
  },
  "first_pass_train": {"epochs": 1, "batch_size": 8},
  "rescorer": {"layers": 1, "dim": 8, "heads": 2, "ff_dim": 16, "memory_dim": 8},
  "joint": {"epochs": 1.0, "batch_size": 8},
  "sweep": {"ratios": [0.0, 0.5], "seeds": 1},
  "latency": {"utterances": 3, "repetitions": 2, "warmup": 1}
}"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("c.json"), SMALL).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn run(&self, args: &[&str]) -> Output {
        let out = tpt(args);
        assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
        out
    }

    /// Corpus plus first-pass checkpoint.
    fn trained(self) -> Self {
        self.run(&["gen-data", "--config", &self.s("c.json"), "--out", &self.s("corpus")]);
        self.run(&[
            "train-rnnt",
            "--config",
            &self.s("c.json"),
            "--corpus",
            &self.s("corpus"),
            "--out-ckpt",
            &self.s("fp.ckpt"),
        ]);
        self
    }

    fn rescorer(&self, out: &str, extra: &[&str]) {
        let mut args = vec![
            "train-rescorer".to_string(),
            "--config".into(),
            self.s("c.json"),
            "--ckpt".into(),
            self.s("fp.ckpt"),
            "--corpus".into(),
            self.s("corpus"),
            "--out-ckpt".into(),
            self.s(out),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        self.run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = tpt(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(tpt(&["transcribe"]).status.code(), Some(2));
    assert_eq!(tpt(&["gen-data", "--out", "x", "--colour"]).status.code(), Some(2));
    assert_eq!(tpt(&["train-rescorer", "--ckpt", "a", "--corpus", "b", "--out-ckpt", "c", "--ratio", "0.4"]).status.code(), Some(2));
}

#[test]
fn help_lists_every_flag() {
    let out = tpt(&["decode", "--help"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for flag in ["--config", "--seed", "--ckpt", "--rescorer-ckpt", "--beam", "--lambda", "--input", "--out-nbest", "--out-emb"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn bad_config_is_a_domain_error() {
    let ws = Workspace::new();
    std::fs::write(ws.path("bad.json"), r#"{"joint": {"ratio": 1.5}}"#).unwrap();
    let out = tpt(&["gen-data", "--config", &ws.s("bad.json"), "--out", &ws.s("corpus")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("joint.ratio"), "{}", stderr(&out));
    std::fs::write(ws.path("typo.json"), r#"{"sede": 1}"#).unwrap();
    let out = tpt(&["gen-data", "--config", &ws.s("typo.json"), "--out", &ws.s("corpus")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("sede"));
}

#[test]
fn gen_data_writes_corpus_reproducibly() {
    let ws = Workspace::new();
    ws.run(&["gen-data", "--config", &ws.s("c.json"), "--out", &ws.s("a")]);
    ws.run(&["gen-data", "--config", &ws.s("c.json"), "--out", &ws.s("b")]);
    for f in ["paired.jsonl", "text.jsonl", "test.jsonl"] {
        let a = read(&ws.path("a").join(f));
        assert!(!a.is_empty());
        assert_eq!(a, read(&ws.path("b").join(f)), "{f}");
    }
}

#[test]
fn joint_training_without_text_is_a_config_error() {
    let ws = Workspace::new().trained();
    std::fs::remove_file(ws.path("corpus").join("text.jsonl")).unwrap();
    let out = tpt(&[
        "train-rescorer",
        "--config",
        &ws.s("c.json"),
        "--ckpt",
        &ws.s("fp.ckpt"),
        "--corpus",
        &ws.s("corpus"),
        "--joint",
        "--ratio",
        "0.4",
        "--out-ckpt",
        &ws.s("rs.ckpt"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("configuration error"), "{}", stderr(&out));
}

#[test]
fn missing_checkpoint_is_a_domain_error() {
    let ws = Workspace::new();
    ws.run(&["gen-data", "--config", &ws.s("c.json"), "--out", &ws.s("corpus")]);
    let out = tpt(&[
        "eval",
        "--config",
        &ws.s("c.json"),
        "--ckpt",
        &ws.s("nope.ckpt"),
        "--testset",
        &ws.s("corpus"),
        "--out-report",
        &ws.s("r.json"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("does not exist"));
}

#[test]
fn full_pipeline() {
    let ws = Workspace::new().trained();
    ws.rescorer("std.ckpt", &[]);
    ws.rescorer("std2.ckpt", &[]);
    assert_eq!(read(&ws.path("std.ckpt")), read(&ws.path("std2.ckpt")), "training is reproducible");
    ws.rescorer("joint.ckpt", &["--joint", "--ratio", "0.4", "--havg-mode", "empirical"]);

    // decode with rescoring and embedding export
    ws.run(&[
        "decode",
        "--config",
        &ws.s("c.json"),
        "--ckpt",
        &ws.s("fp.ckpt"),
        "--rescorer-ckpt",
        &ws.s("std.ckpt"),
        "--beam",
        "4",
        "--input",
        &ws.s("corpus/test.jsonl"),
        "--out-nbest",
        &ws.s("nbest.jsonl"),
        "--out-emb",
        &ws.s("emb.ckpt"),
    ]);
    let text = std::fs::read_to_string(ws.path("nbest.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 8);
    for rec in &lines {
        let nbest = rec["nbest"].as_array().unwrap();
        assert!(!nbest.is_empty() && nbest.len() <= 4);
        assert!(nbest[0]["tokens"].is_array() && nbest[0]["logprob"].is_f64());
        assert!(nbest[0]["rescorer_logprob"].is_f64());
        assert!(rec["selected"].as_u64().unwrap() < nbest.len() as u64);
    }
    let emb = tpt_core::numerics::Checkpoint::load(ws.path("emb.ckpt")).unwrap();
    assert_eq!(emb.len(), 8);
    let id = lines[0]["id"].as_str().unwrap();
    assert_eq!(emb.get(&format!("emb.{id}")).unwrap().shape()[1], 8);

    // eval with two rescorers on the same n-best lists
    ws.run(&[
        "eval",
        "--config",
        &ws.s("c.json"),
        "--ckpt",
        &ws.s("fp.ckpt"),
        "--rescorer-ckpt",
        &ws.s("std.ckpt"),
        "--rescorer-ckpt",
        &ws.s("joint.ckpt"),
        "--testset",
        &ws.s("corpus"),
        "--lambda",
        "0.3",
        "--out-report",
        &ws.s("eval/report.json"),
    ]);
    let csv = std::fs::read_to_string(ws.path("eval/report.csv")).unwrap();
    assert!(csv.starts_with("system,domain,ratio,seed,wer,rel_reduction\n"));
    for system in ["BS,", "BS+RS,", "BS+RS+Joint,"] {
        assert!(csv.lines().any(|l| l.starts_with(system)), "{system} missing:\n{csv}");
    }
    let report: serde_json::Value = serde_json::from_slice(&read(&ws.path("eval/report.json"))).unwrap();
    assert_eq!(report["results"].as_array().unwrap().len(), 9);

    // sweep writes JSON, CSV and SVG, and repeats exactly
    for name in ["s1", "s2"] {
        ws.run(&[
            "sweep",
            "--config",
            &ws.s("c.json"),
            "--ckpt",
            &ws.s("fp.ckpt"),
            "--corpus",
            &ws.s("corpus"),
            "--ratios",
            "0,0.5",
            "--seeds",
            "1",
            "--out-report",
            &ws.s(&format!("{name}.json")),
        ]);
    }
    assert_eq!(read(&ws.path("s1.json")), read(&ws.path("s2.json")));
    assert!(std::fs::read_to_string(ws.path("s1.svg")).unwrap().starts_with("<svg"));
    assert!(ws.path("s1.csv").exists());

    // latency over all three systems
    let out = ws.run(&[
        "latency",
        "--config",
        &ws.s("c.json"),
        "--ckpt",
        &ws.s("fp.ckpt"),
        "--rescorer-ckpt",
        &ws.s("std.ckpt"),
        "--joint-rescorer-ckpt",
        &ws.s("joint.ckpt"),
        "--testset",
        &ws.s("corpus"),
        "--reps",
        "2",
        "--out-report",
        &ws.s("lat.json"),
    ]);
    let text = stdout(&out);
    for s in ["BS ", "BS+RS ", "BS+RS+Joint "] {
        assert!(text.contains(s), "{text}");
    }
    let lat: serde_json::Value = serde_json::from_slice(&read(&ws.path("lat.json"))).unwrap();
    assert_eq!(lat["systems"][0]["per_utterance_ms"].as_array().unwrap().len(), 3);
}

#[test]
fn sweep_rejects_grid_without_baseline() {
    let ws = Workspace::new().trained();
    let out = tpt(&[
        "sweep",
        "--config",
        &ws.s("c.json"),
        "--ckpt",
        &ws.s("fp.ckpt"),
        "--corpus",
        &ws.s("corpus"),
        "--ratios",
        "0.2,0.4",
        "--out-report",
        &ws.s("s.json"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("sweep.ratios"), "{}", stderr(&out));
}

#[test]
fn grad_check_components() {
    for c in ["encoder", "predictor", "joiner", "rescorer", "transducer-loss"] {
        let out = tpt(&["grad-check", "--component", c]);
        assert!(out.status.success(), "{c}: {}", stderr(&out));
        assert!(stdout(&out).contains("max relative error"));
    }
    assert_eq!(tpt(&["grad-check", "--component", "decoder"]).status.code(), Some(2));
}

#[test]
fn thread_override_is_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_tpt"))
        .args(["grad-check", "--component", "joiner"])
        .env("TPT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_tpt"))
        .args(["grad-check", "--component", "joiner"])
        .env("TPT_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
}
