use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lcm_lora::checkpoint::{save_adapter, SaveOptions};
use lcm_lora::lora::LoraEntry;
use lcm_lora::{AdapterBundle, LoraAdapter, Role, Tensor};
use serde_json::Value;

const TINY: &str = r#"{
    "seed": 3,
    "net": {"hidden": [16, 16]},
    "dataset": {"size": 64, "eval_size": 32},
    "teacher": {"steps": 20, "batch": 16, "log_every": 5},
    "style": {"steps": 10, "batch": 16, "log_every": 5},
    "distill": {"steps": 10, "batch": 16, "log_every": 5},
    "lora": {"rank": 2},
    "sample": {"count": 24}
}"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Self { dir: tempfile::tempdir().unwrap() };
        fs::write(s.path("tiny.json"), TINY).unwrap();
        s
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_lcm-lora"))
            .args(args)
            .current_dir(self.dir.path())
            .env("LCM_LORA_RUN_ROOT", self.path("runs"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Vec<Value> {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        json_docs(&out.stdout)
    }
}

fn json_docs(stdout: &[u8]) -> Vec<Value> {
    serde_json::Deserializer::from_slice(stdout)
        .into_iter::<Value>()
        .map(|v| v.unwrap())
        .collect()
}

fn ckpt(run: &str, name: &str) -> String {
    format!("runs/{run}/checkpoints/{name}")
}

fn metric_rows(path: &Path) -> Vec<(String, String, String)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string(), f[2].to_string())
        })
        .collect()
}

#[test]
fn usage_errors_exit_2() {
    let s = Sandbox::new();
    assert_eq!(s.run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(s.run(&["sample"]).status.code(), Some(2));
    assert_eq!(s.run(&["param-count"]).status.code(), Some(2));
    assert_eq!(s.run(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_fail_before_compute() {
    let s = Sandbox::new();
    let missing = s.run(&["--config", "absent.json", "train-teacher"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("not found"));

    fs::write(s.path("typo.json"), r#"{"teacher": {"stpes": 10}}"#).unwrap();
    let typo = s.run(&["--config", "typo.json", "train-teacher"]);
    assert_eq!(typo.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&typo.stderr).contains("stpes"));
    assert!(!s.path("runs").exists());
}

#[test]
fn full_workflow_writes_artifacts() {
    let s = Sandbox::new();
    let docs = s.ok(&["--config", "tiny.json", "train-teacher"]);
    assert_eq!(docs[0]["teacher"]["steps"], 20);
    assert_eq!(docs[0]["teacher"]["lr"], 1e-3, "defaults are echoed");
    assert!(s.path("runs/default/config/teacher.json").exists());
    assert_eq!(metric_rows(&s.path("runs/default/metrics/teacher.csv")).len(), 4);

    s.ok(&["--config", "tiny.json", "distill-lcm", "--teacher", &ckpt("default", "teacher")]);
    s.ok(&["--config", "tiny.json", "finetune-style", "--teacher", &ckpt("default", "teacher")]);
    let combined = s.ok(&[
        "--config", "tiny.json", "combine-lora",
        "--style", &ckpt("default", "style"),
        "--accel", &ckpt("default", "acceleration"),
        "--l1", "0.8", "--l2", "1.0",
    ]);
    assert_eq!(combined[0]["combine"]["lambda1"], 0.8);
    let prov = &combined[1]["provenance"];
    assert_eq!(prov["lambda_style"], 0.8);
    assert_eq!(prov["lambda_accel"], 1.0);

    let sampled = s.ok(&[
        "--config", "tiny.json", "sample",
        "--teacher", &ckpt("default", "teacher"),
        "--adapter", &ckpt("default", "combined"),
        "--steps", "4", "--omega", "7.5", "--out", "out/s.csv",
    ]);
    assert_eq!(sampled[0]["sample"]["steps"], 4);
    let csv = fs::read_to_string(s.path("out/s.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x0,x1,condition"));
    assert_eq!(lines.count(), 24);
    let side: Value = serde_json::from_str(&fs::read_to_string(s.path("out/s.json")).unwrap()).unwrap();
    assert_eq!(side["steps"], 4);
    assert_eq!(side["omega"], 7.5);
    assert_eq!(side["lambda1"], 0.8);
    assert_eq!(side["seed"], 3);
    assert_eq!(side["adapter_role"], "combined");
    assert_eq!(side["teacher_sha256"].as_str().unwrap().len(), 64);

    let eval = s.ok(&["--config", "tiny.json", "eval", "--samples", "out/s.csv"]);
    assert!(eval[1]["mmd2"].as_f64().unwrap().is_finite());

    let merged = s.ok(&["merge-lora", "--base", &ckpt("default", "teacher"), "--adapter", &ckpt("default", "style"), "--out", "merged"]);
    assert_eq!(merged.len(), 1, "no config echo for merge-lora");
    assert!(s.path("merged/manifest.json").exists());
}

#[test]
fn param_count_of_toy_adapter() {
    let s = Sandbox::new();
    let entry = LoraEntry {
        a: Tensor::zeros(&[2, 6]),
        b: Tensor::zeros(&[4, 2]),
        scale: 1.0,
    };
    let adapter = LoraAdapter::from_entries("toy", BTreeMap::from([("w".to_string(), entry)])).unwrap();
    let bundle = AdapterBundle::new(adapter, Role::Style, "toy");
    save_adapter(&s.path("toy"), &bundle, &SaveOptions::default()).unwrap();
    let out = s.run(&["param-count", "--adapter", "toy"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "20");
}

#[test]
fn incompatible_adapter_reports_both_fingerprints() {
    let s = Sandbox::new();
    s.ok(&["--config", "tiny.json", "--run", "a", "train-teacher"]);
    s.ok(&["--config", "tiny.json", "--run", "a", "distill-lcm", "--teacher", &ckpt("a", "teacher")]);
    let wider = TINY.replace("[16, 16]", "[16, 24]");
    fs::write(s.path("wide.json"), wider).unwrap();
    s.ok(&["--config", "wide.json", "--run", "b", "train-teacher"]);

    let out = s.run(&[
        "--config", "wide.json", "sample",
        "--teacher", &ckpt("b", "teacher"),
        "--adapter", &ckpt("a", "acceleration"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    let fp = |run: &str| -> String {
        let m: Value = serde_json::from_str(&fs::read_to_string(s.path(&format!("runs/{run}/checkpoints/teacher/manifest.json"))).unwrap()).unwrap();
        m["meta"]["fingerprint"].as_str().unwrap().to_string()
    };
    assert!(err.contains(&fp("a")) && err.contains(&fp("b")), "{err}");
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let s = Sandbox::new();
    s.ok(&["--config", "tiny.json", "train-teacher"]);
    let w = s.path("runs/default/checkpoints/teacher/weights.bin");
    let mut bytes = fs::read(&w).unwrap();
    bytes[0] ^= 1;
    fs::write(&w, bytes).unwrap();
    let out = s.run(&["param-count", "--net", &ckpt("default", "teacher")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupted"));
}

#[test]
fn reruns_reproduce_metrics() {
    let s = Sandbox::new();
    for run in ["r1", "r2"] {
        s.ok(&["--config", "tiny.json", "--run", run, "train-teacher"]);
        s.ok(&["--config", "tiny.json", "--run", run, "distill-lcm", "--teacher", &ckpt(run, "teacher")]);
    }
    for stage in ["teacher", "distill"] {
        let a = metric_rows(&s.path(&format!("runs/r1/metrics/{stage}.csv")));
        let b = metric_rows(&s.path(&format!("runs/r2/metrics/{stage}.csv")));
        assert!(!a.is_empty());
        assert_eq!(a, b, "{stage}");
    }
}

#[test]
fn gradcheck_subcommand() {
    let s = Sandbox::new();
    let docs = s.ok(&["gradcheck", "--hidden", "8,8", "--rank", "2"]);
    assert!(docs[0]["max_rel_error"].as_f64().unwrap() < 1e-4);
    let strict = s.run(&["gradcheck", "--hidden", "8,8", "--rank", "2", "--tol", "0"]);
    assert_eq!(strict.status.code(), Some(1));
}
