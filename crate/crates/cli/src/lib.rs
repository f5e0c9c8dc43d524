//! The `xlin` command line: one binary driving corpus generation, teacher
//! training, student initialization, alignment, distillation, merging,
//! metrics, gate statistics, benchmarks and built-in checks.

pub mod commands;
pub mod config;
pub mod error;

use std::io::Write;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use crate::commands::Layout;
use crate::config::RunConfig;
pub use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "xlin", version, about = "Distill softmax-attention teachers into hybrid linear students")]
pub struct Cli {
    /// TOML run configuration; built-in defaults fill anything it omits.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set distill.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the base corpus and every domain corpus.
    GenCorpus,
    /// Train the softmax-attention teacher on the base corpus.
    TrainTeacher,
    /// Build the student from the teacher and finalize its gates.
    InitStudent,
    /// Stage I: per-layer hidden-state alignment of the new parameters.
    Align,
    /// Precompute the teacher's top-k logits for each domain.
    Targets {
        #[arg(long)]
        domain: Option<String>,
    },
    /// Stage II: distill one expert per domain.
    Distill {
        #[arg(long)]
        domain: Option<String>,
        /// Starting checkpoint (default: the aligned student).
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Stage III: linear merge of the domain experts.
    Merge {
        /// Re-merge after swapping expert INDEX for the checkpoint at PATH.
        #[arg(long, value_name = "INDEX=PATH")]
        replace: Option<String>,
    },
    /// Recovery metrics (α*, C_0, curve) for a score table or the pipeline's models.
    EvalMetrics {
        /// Bundled table name or CSV path.
        #[arg(long)]
        table: Option<String>,
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Median output-gate activation per layer and head.
    GateStats {
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Decode and prefill timings with exact cache sizes.
    Bench,
    /// Sample tokens from a checkpoint.
    Generate {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reduction identities, chunkwise equivalence and gradient checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::TrainTeacher => "train-teacher",
            Command::InitStudent => "init-student",
            Command::Align => "align",
            Command::Targets { .. } => "targets",
            Command::Distill { .. } => "distill",
            Command::Merge { .. } => "merge",
            Command::EvalMetrics { .. } => "eval-metrics",
            Command::GateStats { .. } => "gate-stats",
            Command::Bench => "bench",
            Command::Generate { .. } => "generate",
            Command::GradCheck { .. } => "grad-check",
            Command::Selftest { .. } => "selftest",
        }
    }

    /// Whether the command reads the run configuration at all.
    fn needs_config(&self, has_file: bool) -> bool {
        match self {
            Command::GradCheck { .. } | Command::Selftest { .. } => false,
            Command::EvalMetrics { table: Some(_), .. } => has_file,
            _ => true,
        }
    }
}

fn append_log(lay: &Layout, cmd: &str, status: &str, secs: f64) {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let line = format!("{ts} {cmd} {status} {secs:.3}s\n");
    let _ = std::fs::create_dir_all(&lay.root);
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(lay.file("run.log")) {
        let _ = f.write_all(line.as_bytes());
    }
}

/// Runs one command and returns its JSON summary.  The resolved
/// configuration is written to `<output_dir>/config/<command>.toml`;
/// wall-clock times go only to `<output_dir>/run.log`.
pub fn run(cli: &Cli) -> CliResult<Value> {
    let name = cli.command.name();
    let cfg = if cli.command.needs_config(cli.config.is_some() || !cli.sets.is_empty()) {
        Some(RunConfig::load(cli.config.as_deref(), &cli.sets)?)
    } else {
        None
    };
    let lay = cfg.as_ref().map(|c| Layout::new(&c.output_dir));
    if let (Some(c), Some(l)) = (&cfg, &lay) {
        commands::write_resolved(c, l, name)?;
    }
    let start = Instant::now();
    let result = dispatch(&cli.command, cfg.as_ref(), lay.as_ref());
    if let Some(l) = &lay {
        let status = if result.is_ok() { "ok" } else { "error" };
        append_log(l, name, status, start.elapsed().as_secs_f64());
    }
    let mut summary = result?;
    if let Value::Object(m) = &mut summary {
        m.insert("command".into(), json!(name));
        m.insert("ok".into(), json!(true));
    }
    Ok(summary)
}

fn dispatch(cmd: &Command, cfg: Option<&RunConfig>, lay: Option<&Layout>) -> CliResult<Value> {
    let need = || -> CliResult<(&RunConfig, &Layout)> {
        cfg.zip(lay).ok_or_else(|| CliError::Config("this command needs a run configuration".into()))
    };
    match cmd {
        Command::GenCorpus => {
            let (c, l) = need()?;
            commands::gen_corpus(c, l)
        }
        Command::TrainTeacher => {
            let (c, l) = need()?;
            commands::train_teacher_cmd(c, l)
        }
        Command::InitStudent => {
            let (c, l) = need()?;
            commands::init_student(c, l)
        }
        Command::Align => {
            let (c, l) = need()?;
            commands::align(c, l)
        }
        Command::Targets { domain } => {
            let (c, l) = need()?;
            commands::targets(c, l, domain.as_deref())
        }
        Command::Distill { domain, student } => {
            let (c, l) = need()?;
            commands::distill(c, l, domain.as_deref(), student.as_deref())
        }
        Command::Merge { replace } => {
            let (c, l) = need()?;
            commands::merge(c, l, replace.as_deref())
        }
        Command::EvalMetrics { table, student } => commands::eval_metrics(cfg, lay, table.as_deref(), student.as_deref()),
        Command::GateStats { student } => {
            let (c, l) = need()?;
            commands::gate_stats(c, l, student.as_deref())
        }
        Command::Bench => {
            let (c, l) = need()?;
            commands::bench(c, l)
        }
        Command::Generate { model } => {
            let (c, l) = need()?;
            commands::generate_cmd(c, l, model.as_deref())
        }
        Command::GradCheck { seed } => commands::grad_check(*seed),
        Command::Selftest { seed } => commands::run_selftest(*seed),
    }
}
