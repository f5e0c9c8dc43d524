mod common;

use std::process::Command;

use common::{run_pipeline, write_config, xlin};
use serde_json::Value;
use xlin_cli::config::{apply_set, sub_seed, RunConfig};
use xlin_cli::CliError;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_xlin"));
    c.env_remove("XLIN_OUTPUT_DIR");
    c
}

fn stdout_json(out: &std::process::Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn defaults_round_trip_through_toml() {
    let cfg = RunConfig::defaults(3);
    cfg.validate().unwrap();
    let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
    assert_eq!(back.to_toml(), cfg.to_toml());
}

#[test]
fn file_then_sets_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "seed = 5\n[distill]\nsteps = 11\n").unwrap();
    let sets = vec!["distill.steps=13".to_string(), "domains.1.name=\"other\"".to_string()];
    let cfg = RunConfig::load(Some(&path), &sets).unwrap();
    assert_eq!(cfg.seed, 5);
    assert_eq!(cfg.distill.steps, 13);
    assert_eq!(cfg.domains[1].name, "other");
    // untouched keys keep their defaults
    assert_eq!(cfg.distill.k, RunConfig::defaults(5).distill.k);
}

#[test]
fn missing_seed_and_unknown_keys_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "[distill]\nsteps = 11\n").unwrap();
    assert!(matches!(RunConfig::load(Some(&path), &[]), Err(CliError::Config(_))));

    std::fs::write(&path, "seed = 1\n[distill]\nstepz = 11\n").unwrap();
    let e = RunConfig::load(Some(&path), &[]).unwrap_err();
    assert_eq!(e.category().to_string(), "config");

    let e = RunConfig::load(None, &["seed=1".into(), "distill.gamma=-1".into()]).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn set_rejects_malformed_assignments() {
    let mut t = toml::Table::new();
    assert!(apply_set(&mut t, "no_equals_sign").is_err());
    assert!(apply_set(&mut t, "=3").is_err());
    apply_set(&mut t, "a.b=3").unwrap();
    assert_eq!(t["a"]["b"].as_integer(), Some(3));
    apply_set(&mut t, "a.c=word").unwrap();
    assert_eq!(t["a"]["c"].as_str(), Some("word"));
}

#[test]
fn sub_seeds_differ_by_tag_and_are_stable() {
    assert_eq!(sub_seed(1, "corpus/base"), sub_seed(1, "corpus/base"));
    assert_ne!(sub_seed(1, "corpus/base"), sub_seed(1, "corpus/recall"));
    assert_ne!(sub_seed(1, "teacher"), sub_seed(2, "teacher"));
}

#[test]
fn exit_codes_follow_error_categories() {
    let dir = tempfile::tempdir().unwrap();

    // no seed anywhere
    let out = bin().current_dir(dir.path()).arg("gen-corpus").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let j = stdout_json(&out);
    assert_eq!(j["ok"], false);
    assert_eq!(j["category"], "config");

    // missing teacher checkpoint
    let cfg = write_config(dir.path(), "");
    let out = bin().args(["--config", cfg.to_str().unwrap(), "init-student"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out)["category"], "io");

    // bundled table without any config
    let out = bin().args(["eval-metrics", "--table", "llama_base"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let j = stdout_json(&out);
    assert_eq!(j["alpha_star"].as_f64(), Some(0.0));
    assert!((j["c0"].as_f64().unwrap() - 8.0 / 13.0).abs() < 1e-12);

    let out = bin().args(["eval-metrics", "--table", "no_such_table"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn output_dir_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let elsewhere = dir.path().join("elsewhere");
    let out = bin()
        .env("XLIN_OUTPUT_DIR", &elsewhere)
        .args(["--config", cfg.to_str().unwrap(), "gen-corpus"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(elsewhere.join("corpus").exists());
    assert!(elsewhere.join("config/gen-corpus.toml").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn selftest_passes_and_exits_zero() {
    let out = bin().arg("selftest").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let j = stdout_json(&out);
    assert_eq!(j["ok"], true);
    assert!(j["n_checks"].as_u64().unwrap() > 10);
}

fn artifacts(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.log" {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_is_idempotent_and_guards_lineage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let first = run_pipeline(&cfg);
    let root = dir.path().join("out");
    let files = artifacts(&root);
    for name in ["teacher.ckpt", "merged.ckpt", "merge_spec.json", "metrics.json", "curve.csv", "scores.csv", "gate_stats.csv"] {
        assert!(files.iter().any(|(n, _)| n == name), "missing {name}");
    }
    let alpha = first[7]["alpha_star"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&alpha));

    // rerun: identical summaries and byte-identical artifacts
    let second = run_pipeline(&cfg);
    assert_eq!(first, second);
    assert_eq!(artifacts(&root), files);
    assert!(std::fs::read_to_string(root.join("run.log")).unwrap().lines().count() >= 20);

    // merge --replace with the same expert reproduces the merge
    let merged = std::fs::read(root.join("merged.ckpt")).unwrap();
    let replace = format!("1={}", root.join("experts/ngram.ckpt").display());
    xlin(&cfg, &["merge", "--replace", &replace]).unwrap();
    assert_eq!(std::fs::read(root.join("merged.ckpt")).unwrap(), merged);

    // bench writes one row per checkpoint per scenario
    let b = xlin(&cfg, &["bench"]).unwrap();
    assert_eq!(b["rows"].as_array().unwrap().len(), 4);
    assert!(root.join("bench.csv").exists());

    // a retrained teacher invalidates the targets and the students
    let changed = cfg.with_file_name("changed.toml");
    std::fs::write(&changed, std::fs::read_to_string(&cfg).unwrap() + "\n[teacher]\nmlp_hidden = 48\n").unwrap();
    xlin(&changed, &["train-teacher"]).unwrap();
    let e = xlin(&changed, &["distill", "--domain", "recall"]).unwrap_err();
    assert_eq!(e.exit_code(), 4, "{e}");
    let e = xlin(&changed, &["align"]).unwrap_err();
    assert_eq!(e.exit_code(), 4, "{e}");
    // fresh students still refuse the stale targets until they are recomputed
    xlin(&changed, &["init-student"]).unwrap();
    xlin(&changed, &["align"]).unwrap();
    let e = xlin(&changed, &["distill", "--domain", "recall"]).unwrap_err();
    assert!(e.to_string().contains("different teacher"), "{e}");
    xlin(&changed, &["targets", "--domain", "recall"]).unwrap();
    xlin(&changed, &["distill", "--domain", "recall"]).unwrap();
}
