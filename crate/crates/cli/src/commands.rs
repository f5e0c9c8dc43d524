//! Subcommand bodies. Each returns the JSON summary printed on stdout.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use xlin_core::complexity::{run_bench, Scenario};
use xlin_core::corpus::{generate_corpus, Dataset};
use xlin_core::distill::{
    alignment_loss, precompute_teacher_targets, stage1_align, stage2_distill, TeacherTargets,
};
use xlin_core::evalkit::{
    self, curve_csv, curve_export, gate_statistics, next_token_accuracy, recall_accuracy, recovery_rate, summarize,
    uniform_grid, ScoreRow, ScoreTable,
};
use xlin_core::merge::{linear_merge, patch_merge, MergeEntry, MergeSpec};
use xlin_core::mixers::Overrides;
use xlin_core::model::train::train_teacher;
use xlin_core::model::{generate, init_student_from_teacher, merge_model_gates, Model, Sampling};
use xlin_core::selftest::{self, CheckResult};
use xlin_core::{io, Error};

use crate::config::{sub_seed, RunConfig};
use crate::error::{CliError, CliResult};

/// Checkpoints and corpora are kept in 32-bit.
pub type F = f32;

/// File locations under the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }
    pub fn corpus(&self, name: &str) -> PathBuf {
        self.root.join("corpus").join(name)
    }
    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher.ckpt")
    }
    pub fn student_init(&self) -> PathBuf {
        self.root.join("student_init.ckpt")
    }
    pub fn student_aligned(&self) -> PathBuf {
        self.root.join("student_aligned.ckpt")
    }
    pub fn targets(&self, domain: &str) -> PathBuf {
        self.root.join("targets").join(format!("{domain}.targets"))
    }
    pub fn expert(&self, domain: &str) -> PathBuf {
        self.root.join("experts").join(format!("{domain}.ckpt"))
    }
    pub fn merged(&self) -> PathBuf {
        self.root.join("merged.ckpt")
    }
    pub fn merge_spec(&self) -> PathBuf {
        self.root.join("merge_spec.json")
    }
    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    io::atomic_write(path, bytes)?;
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> CliResult<()> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    write(path, &s)
}

fn load_model(path: &Path) -> CliResult<Model<F>> {
    Model::<F>::load(path).map_err(|e| match e {
        Error::Io(io) => CliError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        e => e.into(),
    })
}

fn load_corpus(stem: &Path) -> CliResult<Dataset> {
    Dataset::load(stem).map_err(|e| match e {
        Error::Io(io) => CliError::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io} (run gen-corpus first)", stem.display()),
        )),
        e => e.into(),
    })
}

fn domains<'a>(cfg: &'a RunConfig, only: Option<&'a str>) -> CliResult<Vec<&'a str>> {
    match only {
        Some(d) => Ok(vec![cfg.domain(d)?.name.as_str()]),
        None => Ok(cfg.domains.iter().map(|d| d.name.as_str()).collect()),
    }
}

fn finite(name: &str, x: f64) -> CliResult<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(CliError::Numeric(format!("{name} is not finite ({x})")))
    }
}

/// Refuses a student that was not initialized from `teacher`.
fn check_lineage(student: &Model<F>, teacher_hash: &str, what: &str) -> CliResult<()> {
    if !student.lineage.parents.iter().any(|p| p == teacher_hash) {
        return Err(Error::Contract(format!("{what} was not derived from the current teacher checkpoint")).into());
    }
    Ok(())
}

// ------------------------------------------------------------------ pipeline

pub fn gen_corpus(cfg: &RunConfig, lay: &Layout) -> CliResult<Value> {
    let mut out = serde_json::Map::new();
    let names = std::iter::once(None).chain(cfg.domains.iter().map(|d| Some(d.name.as_str())));
    for name in names {
        let spec = cfg.corpus_spec(name)?;
        let ds = generate_corpus(&spec)?;
        let label = name.unwrap_or("base");
        ds.save(&lay.corpus(label))?;
        out.insert(
            label.into(),
            json!({
                "n_train": ds.train.len(),
                "n_eval": ds.eval.len(),
                "n_recall_pairs": ds.recall.len(),
                "tokens_sha256": ds.meta().tokens_sha256,
            }),
        );
    }
    Ok(json!({ "corpora": out }))
}

pub fn train_teacher_cmd(cfg: &RunConfig, lay: &Layout) -> CliResult<Value> {
    let ds = load_corpus(&lay.corpus("base"))?;
    if ds.spec != cfg.corpus_spec(None)? {
        return Err(Error::Contract("base corpus was generated with a different configuration".into()).into());
    }
    let (model, rep) = train_teacher::<F>(&cfg.teacher, &ds.train_seqs(), &ds.eval_seqs(), &cfg.teacher_train())?;
    model.save(&lay.teacher())?;
    Ok(json!({
        "teacher": lay.teacher(),
        "teacher_hash": model.content_hash()?,
        "steps": rep.steps,
        "final_train_loss": rep.final_train_loss,
        "eval_ce": finite("teacher eval CE", rep.eval_ce)?,
        "uniform_ce": rep.uniform_ce,
    }))
}

pub fn init_student(cfg: &RunConfig, lay: &Layout) -> CliResult<Value> {
    let teacher = load_model(&lay.teacher())?;
    let mut student = init_student_from_teacher(&teacher, &cfg.student_config())?;
    let merged = cfg.student.merge_gates && student.config.mixer_kind.has_gates();
    if merged {
        student = merge_model_gates(&student)?;
    }
    student.save(&lay.student_init())?;
    Ok(json!({
        "student": lay.student_init(),
        "student_hash": student.content_hash()?,
        "kind": student.config.mixer_kind,
        "gates_merged": merged,
        "gate_input_mode": student.config.mixer.gate_input_mode,
        "new_params": xlin_core::model::new_param_count(&student.config),
        "total_params": student.params.scalar_count(),
    }))
}

pub fn align(cfg: &RunConfig, lay: &Layout) -> CliResult<Value> {
    let teacher = load_model(&lay.teacher())?;
    let mut student = load_model(&lay.student_init())?;
    check_lineage(&student, &teacher.content_hash()?, "student_init.ckpt")?;
    let ds = load_corpus(&lay.corpus("base"))?;
    let eval = ds.eval_seqs();
    let ov = Overrides::default();
    let before = alignment_loss(&student, &teacher, &eval, &ov)?;
    let rep = stage1_align(&mut student, &teacher, &ds.train_seqs(), &cfg.align_config(), None)?;
    let after = alignment_loss(&student, &teacher, &eval, &ov)?;
    for (l, x) in after.iter().enumerate() {
        finite(&format!("layer {l} alignment loss"), *x)?;
    }
    student.save(&lay.student_aligned())?;
    Ok(json!({
        "student": lay.student_aligned(),
        "student_hash": student.content_hash()?,
        "steps": rep.steps,
        "eval_align_loss_before": before,
        "eval_align_loss_after": after,
    }))
}

pub fn targets(cfg: &RunConfig, lay: &Layout, only: Option<&str>) -> CliResult<Value> {
    let teacher = load_model(&lay.teacher())?;
    let mut out = serde_json::Map::new();
    for d in domains(cfg, only)? {
        let ds = load_corpus(&lay.corpus(d))?;
        let t = precompute_teacher_targets(&teacher, &ds.train_seqs(), cfg.distill.k)?;
        t.save(&lay.targets(d))?;
        out.insert(
            d.into(),
            json!({
                "path": lay.targets(d),
                "n_positions": t.header.n_positions,
                "k": t.header.k,
                "teacher_hash": t.header.teacher_hash,
                "dataset_hash": t.header.dataset_hash,
            }),
        );
    }
    Ok(json!({ "targets": out }))
}

pub fn distill(cfg: &RunConfig, lay: &Layout, only: Option<&str>, student: Option<&Path>) -> CliResult<Value> {
    let teacher_hash = load_model(&lay.teacher())?.content_hash()?;
    let start_path = student.map(Path::to_path_buf).unwrap_or_else(|| lay.student_aligned());
    let start = load_model(&start_path)?;
    check_lineage(&start, &teacher_hash, &start_path.display().to_string())?;
    let mut out = serde_json::Map::new();
    for d in domains(cfg, only)? {
        let ds = load_corpus(&lay.corpus(d))?;
        let targets = TeacherTargets::load(&lay.targets(d))?;
        if targets.header.teacher_hash != teacher_hash {
            return Err(Error::Contract(format!(
                "targets for {d} were computed by a different teacher ({} != {teacher_hash})",
                targets.header.teacher_hash
            ))
            .into());
        }
        let mut expert = start.clone();
        let rep = stage2_distill(&mut expert, &ds.train_seqs(), &ds.eval_seqs(), &targets, &cfg.distill_config(Some(d)))?;
        expert.save(&lay.expert(d))?;
        out.insert(
            d.into(),
            json!({
                "path": lay.expert(d),
                "hash": expert.content_hash()?,
                "steps": rep.steps,
                "final_train_loss": rep.final_train_loss,
                "eval_ce": finite("expert eval CE", rep.eval_ce)?,
            }),
        );
    }
    Ok(json!({ "experts": out }))
}

pub fn merge(cfg: &RunConfig, lay: &Layout, replace: Option<&str>) -> CliResult<Value> {
    let (spec, model) = match replace {
        None => {
            let n = cfg.domains.len();
            let lambdas = if cfg.merge.lambdas.is_empty() {
                vec![1.0 / n as f64; n]
            } else {
                cfg.merge.lambdas.clone()
            };
            let spec = MergeSpec {
                experts: cfg
                    .domains
                    .iter()
                    .zip(lambdas)
                    .map(|(d, lambda)| MergeEntry {
                        path: lay.expert(&d.name),
                        lambda,
                    })
                    .collect(),
                normalization: cfg.merge.normalization,
            };
            let m = linear_merge::<F>(&spec)?;
            (spec, m)
        }
        Some(arg) => {
            let (idx, path) = arg
                .split_once('=')
                .ok_or_else(|| CliError::Config("--replace expects INDEX=PATH".into()))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| CliError::Config(format!("bad expert index {idx:?}")))?;
            let prev: MergeSpec = serde_json::from_slice(&std::fs::read(lay.merge_spec())?)?;
            patch_merge::<F>(&prev, idx, PathBuf::from(path))?
        }
    };
    model.save(&lay.merged())?;
    write_json(&lay.merge_spec(), &serde_json::to_value(&spec)?)?;
    Ok(json!({
        "merged": lay.merged(),
        "hash": model.content_hash()?,
        "provenance": model.provenance,
    }))
}

fn resolve_table(name: &str) -> CliResult<ScoreTable> {
    if let Some(t) = evalkit::fixtures::table(name) {
        return Ok(t?);
    }
    let p = Path::new(name);
    if p.exists() {
        return Ok(ScoreTable::from_csv_path(p)?);
    }
    let known: Vec<&str> = evalkit::fixtures::ALL.iter().map(|(n, _)| *n).collect();
    Err(CliError::Config(format!("{name} is neither a bundled table ({}) nor a file", known.join(", "))))
}

/// Teacher and student scored on every domain's held-out split.
fn pipeline_table(lay: &Layout, cfg: &RunConfig, student: &Path) -> CliResult<ScoreTable> {
    let teacher = load_model(&lay.teacher())?;
    let student = load_model(student)?;
    let mut rows = Vec::new();
    for d in &cfg.domains {
        let ds = load_corpus(&lay.corpus(&d.name))?;
        let eval = ds.eval_seqs();
        rows.push(ScoreRow {
            domain: Some("understanding".into()),
            ..ScoreRow::new(
                &format!("{}/next_token", d.name),
                100.0 * next_token_accuracy(&teacher, &eval)?,
                100.0 * next_token_accuracy(&student, &eval)?,
            )
        });
        let recall = ds.eval_recall();
        if !recall.is_empty() {
            rows.push(ScoreRow {
                domain: Some("generation".into()),
                ..ScoreRow::new(
                    &format!("{}/recall", d.name),
                    100.0 * recall_accuracy(&teacher, &ds.sequences, &recall)?,
                    100.0 * recall_accuracy(&student, &ds.sequences, &recall)?,
                )
            });
        }
    }
    Ok(ScoreTable::new(rows)?)
}

pub fn eval_metrics(cfg: Option<&RunConfig>, lay: Option<&Layout>, table: Option<&str>, student: Option<&Path>) -> CliResult<Value> {
    let table_name = table.map(str::to_string).or_else(|| cfg.and_then(|c| c.eval.table.clone()));
    let (table, source) = match table_name {
        Some(name) => (resolve_table(&name)?, name),
        None => {
            let (cfg, lay) = cfg.zip(lay).ok_or_else(|| CliError::Config("eval-metrics needs --table or a run config".into()))?;
            let s = student.map(Path::to_path_buf).unwrap_or_else(|| lay.merged());
            let t = pipeline_table(lay, cfg, &s)?;
            let mut csv = String::from("benchmark,teacher,student,domain\n");
            for r in t.rows() {
                csv.push_str(&format!("{},{},{},{}\n", r.benchmark, r.teacher, r.student, r.domain.as_deref().unwrap_or("")));
            }
            write(&lay.file("scores.csv"), csv.as_bytes())?;
            (t, s.display().to_string())
        }
    };
    let summary = summarize(&table)?;
    let rows: Vec<Value> = table
        .rows()
        .iter()
        .map(|r| {
            json!({
                "benchmark": r.benchmark,
                "teacher": r.teacher,
                "student": r.student,
                "recovery": recovery_rate(r).ok(),
                "threshold": evalkit::threshold(r),
            })
        })
        .collect();
    let n_points = cfg.map_or(101, |c| c.eval.curve_points);
    let out = json!({
        "source": source,
        "alpha_star": summary.alpha_star,
        "c0": summary.c0,
        "n_benchmarks": summary.n_benchmarks,
        "rows": rows,
    });
    if let Some(lay) = lay {
        let curve = curve_export(&table, &uniform_grid(n_points))?;
        write(&lay.file("curve.csv"), curve_csv(&curve).as_bytes())?;
        write_json(&lay.file("metrics.json"), &out)?;
    }
    Ok(out)
}

pub fn gate_stats(cfg: &RunConfig, lay: &Layout, student: Option<&Path>) -> CliResult<Value> {
    let path = student.map(Path::to_path_buf).unwrap_or_else(|| lay.merged());
    let model = load_model(&path)?;
    let ds = load_corpus(&lay.corpus("base"))?;
    let probes: Vec<Vec<u32>> = ds.eval_seqs().into_iter().take(cfg.gate_stats.n_probes).collect();
    let stats = gate_statistics(&model, &probes)?;
    write(&lay.file("gate_stats.csv"), stats.to_csv().as_bytes())?;
    Ok(json!({
        "model": path,
        "n_probes": probes.len(),
        "medians": stats.medians,
        "csv": lay.file("gate_stats.csv"),
    }))
}

/// Timing runs use freshly initialized models: weights do not affect cost.
pub fn bench(cfg: &RunConfig, lay: &Layout) -> CliResult<Value> {
    let opts = cfg.bench_options();
    let longest = cfg
        .bench
        .scenarios
        .iter()
        .flat_map(|s: &Scenario| s.checkpoints.iter().copied())
        .max()
        .unwrap_or(1);
    let span = longest + opts.warmups + opts.repeats + 1;
    let mut tcfg = cfg.teacher.clone();
    let mut scfg = cfg.student_config();
    tcfg.max_seq_len = tcfg.max_seq_len.max(span);
    scfg.max_seq_len = tcfg.max_seq_len;
    let teacher = Model::<F>::init(tcfg, sub_seed(cfg.seed, "bench/teacher"))?;
    let student = Model::<F>::init(scfg, sub_seed(cfg.seed, "bench/student"))?;
    let res = run_bench(&[("teacher", &teacher), ("student", &student)], &cfg.bench.scenarios, &opts)?;
    write(&lay.file("bench.csv"), res.to_csv().as_bytes())?;
    Ok(json!({
        "csv": lay.file("bench.csv"),
        "warmups": res.warmups,
        "repeats": res.repeats,
        "runs_executed": res.runs_executed,
        "rows": res.rows,
    }))
}

pub fn generate_cmd(cfg: &RunConfig, lay: &Layout, model: Option<&Path>) -> CliResult<Value> {
    let path = model.map(Path::to_path_buf).unwrap_or_else(|| lay.merged());
    let m = load_model(&path)?;
    let g = &cfg.generate;
    let sampling = if g.temperature > 0.0 {
        Sampling::Temperature {
            tau: g.temperature,
            seed: sub_seed(cfg.seed, "generate"),
        }
    } else {
        Sampling::Greedy
    };
    let tokens = generate(&m, &g.prompt, g.n_new, sampling)?;
    Ok(json!({ "model": path, "prompt": g.prompt, "tokens": tokens }))
}

// ------------------------------------------------------------------- checks

fn report(results: Vec<CheckResult>) -> CliResult<Value> {
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::Numeric(format!("checks failed: {}", failed.join(", "))));
    }
    Ok(json!({ "n_checks": results.len(), "checks": results }))
}

pub fn grad_check(seed: u64) -> CliResult<Value> {
    report(selftest::gradient_checks(seed)?)
}

pub fn run_selftest(seed: u64) -> CliResult<Value> {
    report(selftest::run_all(seed)?)
}

/// Writes the fully resolved configuration next to the outputs.
pub fn write_resolved(cfg: &RunConfig, lay: &Layout, command: &str) -> CliResult<()> {
    write(&lay.root.join("config").join(format!("{command}.toml")), cfg.to_toml().as_bytes())
}
