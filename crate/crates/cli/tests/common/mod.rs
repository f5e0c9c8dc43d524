#![allow(dead_code)]

use std::path::Path;

use serde_json::Value;
use xlin_cli::{run, Cli, CliResult};

use clap::Parser;

/// A run small enough to push through every stage in a few seconds.
pub const TINY: &str = r#"
seed = 7

[corpus]
n_sequences = 48

[train_teacher]
steps = 20

[align]
steps = 6

[distill]
steps = 6

[bench]
warmups = 1
repeats = 1

[[bench.scenarios]]
mode = "generate"
model = "teacher"
batch = 1
context = 4
gen = 12
checkpoints = [8, 16]

[[bench.scenarios]]
mode = "prefill"
model = "student"
batch = 1
checkpoints = [8, 16]
"#;

/// Writes [`TINY`] with its outputs under `dir/out`; `extra` is appended
/// after the last table and so must start with its own header.
pub fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let out = dir.join("out").display().to_string();
    let text = TINY.replacen("seed = 7\n", &format!("seed = 7\noutput_dir = {out:?}\n"), 1);
    let path = dir.join("run.toml");
    std::fs::write(&path, format!("{text}\n{extra}")).unwrap();
    path
}

/// Runs `xlin <args>` in-process.
pub fn xlin(config: &Path, args: &[&str]) -> CliResult<Value> {
    let cfg = config.display().to_string();
    let mut argv = vec!["xlin", "--config", cfg.as_str()];
    argv.extend_from_slice(args);
    run(&Cli::try_parse_from(argv).expect("arguments parse"))
}

pub const PIPELINE: &[&[&str]] = &[
    &["gen-corpus"],
    &["train-teacher"],
    &["init-student"],
    &["align"],
    &["targets"],
    &["distill"],
    &["merge"],
    &["eval-metrics"],
    &["gate-stats"],
    &["generate"],
];

/// Runs the whole pipeline, returning each command's summary.
pub fn run_pipeline(config: &Path) -> Vec<Value> {
    PIPELINE
        .iter()
        .map(|args| xlin(config, args).unwrap_or_else(|e| panic!("{args:?}: {e}")))
        .collect()
}
