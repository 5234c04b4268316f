//! The `mergelab` binary: exit codes and a small end-to-end run.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::tiny_plan;

fn mergelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mergelab")).args(args).output().expect("binary runs")
}

fn write_plan(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("plan.json");
    fs::write(&path, text).unwrap();
    path
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn malformed_plan_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_plan(dir.path(), "{\"world_seed\": 1}");
    let out = mergelab(&["pretrain", "--plan", arg(&plan)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let mut bad = tiny_plan();
    bad.budgets.tk_product = 7;
    let plan = write_plan(dir.path(), &bad.to_json());
    assert_eq!(mergelab(&["pretrain", "--plan", arg(&plan)]).status.code(), Some(2));
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan();
    // Two same-signed Adam steps of this size overflow f64.
    plan.training.lr = 1e308;
    let path = write_plan(dir.path(), &plan.to_json());
    let out_dir = dir.path().join("out");
    let out = mergelab(&["pretrain", "--plan", arg(&path), "--out", arg(&out_dir)]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(3), "{stderr}");
    assert!(stderr.contains("error:"));
}

#[test]
fn pretrain_then_verify_then_tamper() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_plan(dir.path(), &tiny_plan().to_json());
    let out_dir = dir.path().join("out");
    let out = mergelab(&["pretrain", "--plan", arg(&path), "--out", arg(&out_dir), "--workers", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[pretrain]"));

    let ok = mergelab(&["verify-provenance", arg(&out_dir)]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));

    let ckpt = fs::read_dir(out_dir.join("ckpt"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "mmck"))
        .unwrap();
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&ckpt, bytes).unwrap();
    let bad = mergelab(&["verify-provenance", arg(&out_dir)]);
    assert_eq!(bad.status.code(), Some(4), "{}", String::from_utf8_lossy(&bad.stderr));
}

#[test]
fn merge_of_one_node_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_plan(dir.path(), &tiny_plan().to_json());
    let domain = tiny_plan().source_names()[0].clone();
    let pre = dir.path().join("pre");
    let node = dir.path().join("node");
    assert!(mergelab(&["pretrain", "--plan", arg(&path), "--out", arg(&pre)]).status.success());
    let out = mergelab(&["train-node", "--plan", arg(&path), "--out", arg(&node), "--domain", &domain, "--epochs", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let pre_report = mergelab_harness::Report::load(&pre).unwrap();
    let node_report = mergelab_harness::Report::load(&node).unwrap();
    let theta0 = pre_report.checkpoints.keys().next().unwrap().clone();
    let tuned = node_report.checkpoints.keys().find(|d| **d != theta0).unwrap().clone();

    let merged = dir.path().join("merged");
    let base = pre.join(format!("ckpt/{theta0}.mmck"));
    let node_file = node.join(format!("ckpt/{tuned}.mmck"));
    let out = mergelab(&["merge", "--base", arg(&base), "--node", arg(&node_file), "--out", arg(&merged)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with(&tuned));
}
