//! Run configuration: built-in defaults, overlaid by an optional TOML file,
//! then by `--set key=value` overrides, then by the output-dir env var.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use xlin_core::complexity::{BenchMode, BenchOptions, Scenario, DEFAULT_CHECKPOINTS};
use xlin_core::corpus::{CorpusSpec, MixWeights};
use xlin_core::distill::{DistillConfig, FreezeSet};
use xlin_core::merge::Normalization;
use xlin_core::mixers::{GateInputMode, MixerConfig, MixerKind};
use xlin_core::model::train::{AdamWConfig, LrSchedule, TeacherTrainConfig};
use xlin_core::model::ModelConfig;

use crate::error::{CliError, CliResult};

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "XLIN_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every derived seed. Has no default.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub teacher: ModelConfig,
    pub student: StudentSection,
    pub corpus: CorpusSection,
    pub domains: Vec<DomainSection>,
    pub train_teacher: TrainSection,
    pub align: TrainSection,
    pub distill: DistillSection,
    pub merge: MergeSection,
    pub eval: EvalSection,
    pub gate_stats: GateStatsSection,
    pub bench: BenchSection,
    pub generate: GenerateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    pub kind: MixerKind,
    pub window: usize,
    pub n_sinks: usize,
    pub chunk_size: usize,
    /// Fold the gate projections into layer-input weights at init.
    pub merge_gates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub seq_len: usize,
    pub n_sequences: usize,
    pub mix: MixWeights,
    /// Minimum key→answer distance minus 2; defaults to layers × student window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall_distance: Option<usize>,
    pub eval_fraction: f64,
    pub kv_pairs: usize,
    pub ngram_len: usize,
    pub markov_branching: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub name: String,
    pub mix: MixWeights,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_sequences: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub schedule: LrSchedule,
    pub optim: AdamWConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    pub gamma: f64,
    pub beta: f64,
    pub k: usize,
    pub freeze_set: FreezeSet,
    pub steps: usize,
    pub batch: usize,
    pub schedule: LrSchedule,
    pub optim: AdamWConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSection {
    pub normalization: Normalization,
    /// One weight per domain; empty means uniform.
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Bundled score table name or CSV path; when unset the pipeline's own
    /// teacher and merged student are scored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
    /// Points of the exported C_α curve.
    pub curve_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateStatsSection {
    pub n_probes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub warmups: usize,
    pub repeats: usize,
    pub scenarios: Vec<Scenario>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub prompt: Vec<u32>,
    pub n_new: usize,
    /// 0 is greedy.
    pub temperature: f64,
}

fn warmup_cosine(peak: f64, floor: f64, steps: usize) -> LrSchedule {
    LrSchedule::WarmupCosine {
        peak,
        floor,
        warmup_steps: steps / 20,
    }
}

fn mix(m: f64, n: f64, r: f64) -> MixWeights {
    MixWeights {
        markov_background: m,
        local_ngram: n,
        kv_recall: r,
    }
}

impl RunConfig {
    /// Built-in defaults (a small desk-scale run) with the given seed.
    pub fn defaults(seed: u64) -> Self {
        let no_decay = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let scenario = |mode, model: &str| Scenario {
            mode,
            model: model.into(),
            batch: 1,
            context: DEFAULT_CHECKPOINTS[0],
            gen: DEFAULT_CHECKPOINTS[DEFAULT_CHECKPOINTS.len() - 1] - DEFAULT_CHECKPOINTS[0],
            checkpoints: DEFAULT_CHECKPOINTS.to_vec(),
        };
        RunConfig {
            seed,
            output_dir: PathBuf::from("runs/default"),
            teacher: ModelConfig {
                vocab_size: 32,
                n_layers: 2,
                mlp_hidden: 64,
                max_seq_len: 64,
                mixer_kind: MixerKind::SoftmaxFull,
                mixer: MixerConfig {
                    d_model: 32,
                    n_heads: 2,
                    d_qk: 16,
                    d_v: 16,
                    window: 4,
                    n_sinks: 0,
                    chunk_size: 16,
                    rope_base: 10000.0,
                    gate_input_mode: GateInputMode::ConcatQkv,
                },
                norm_eps: 1e-6,
            },
            student: StudentSection {
                kind: MixerKind::Hybrid,
                window: 4,
                n_sinks: 2,
                chunk_size: 16,
                merge_gates: true,
            },
            corpus: CorpusSection {
                seq_len: 64,
                n_sequences: 256,
                mix: mix(0.4, 0.3, 0.3),
                recall_distance: None,
                eval_fraction: 0.125,
                kv_pairs: 4,
                ngram_len: 4,
                markov_branching: 3,
            },
            domains: [
                ("markov", mix(0.8, 0.1, 0.1)),
                ("ngram", mix(0.1, 0.8, 0.1)),
                ("recall", mix(0.1, 0.1, 0.8)),
                ("mixed", mix(0.34, 0.33, 0.33)),
            ]
            .into_iter()
            .map(|(name, mix)| DomainSection {
                name: name.into(),
                mix,
                n_sequences: Some(96),
            })
            .collect(),
            train_teacher: TrainSection {
                steps: 200,
                batch: 8,
                schedule: warmup_cosine(3e-3, 1e-4, 200),
                optim: no_decay.clone(),
            },
            align: TrainSection {
                steps: 40,
                batch: 4,
                schedule: warmup_cosine(1e-2, 1e-5, 40),
                optim: AdamWConfig::default(),
            },
            distill: DistillSection {
                gamma: 0.9,
                beta: 0.1,
                k: 8,
                freeze_set: FreezeSet::Full,
                steps: 40,
                batch: 4,
                schedule: warmup_cosine(3e-3, 1e-4, 40),
                optim: no_decay,
            },
            merge: MergeSection {
                normalization: Normalization::Strict,
                lambdas: vec![],
            },
            eval: EvalSection {
                table: None,
                curve_points: 101,
            },
            gate_stats: GateStatsSection { n_probes: 16 },
            bench: BenchSection {
                warmups: 3,
                repeats: 5,
                scenarios: vec![
                    scenario(BenchMode::Generate, "teacher"),
                    scenario(BenchMode::Generate, "student"),
                    scenario(BenchMode::Prefill, "teacher"),
                    scenario(BenchMode::Prefill, "student"),
                ],
            },
            generate: GenerateSection {
                prompt: vec![0],
                n_new: 16,
                temperature: 0.0,
            },
        }
    }

    /// Defaults as a TOML table, without the seed.
    fn default_table() -> Table {
        let mut t = Table::try_from(Self::defaults(0)).expect("defaults serialize");
        t.remove("seed");
        t
    }

    /// Resolves defaults ← `file` ← `sets` ← environment.
    pub fn load(file: Option<&Path>, sets: &[String]) -> CliResult<Self> {
        let mut table = Self::default_table();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
            let user: Table = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            overlay(&mut table, user);
        }
        for s in sets {
            apply_set(&mut table, s)?;
        }
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                table.insert("output_dir".into(), Value::String(dir));
            }
        }
        if !table.contains_key("seed") {
            return Err(CliError::Config(
                "seed is required (set it in the config file or pass --set seed=N)".into(),
            ));
        }
        let cfg: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        self.teacher.validate()?;
        if self.teacher.mixer_kind != MixerKind::SoftmaxFull {
            return Err(CliError::Config("teacher.mixer_kind must be softmax_full".into()));
        }
        if self.student.kind == MixerKind::SoftmaxFull {
            return Err(CliError::Config("student.kind must differ from the teacher's".into()));
        }
        self.student_config().validate()?;
        if self.domains.is_empty() {
            return Err(CliError::Config("at least one domain is required".into()));
        }
        let mut seen = HashSet::new();
        for d in &self.domains {
            let ok = !d.name.is_empty()
                && d.name != "base"
                && d.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok {
                return Err(CliError::Config(format!("invalid domain name {:?}", d.name)));
            }
            if !seen.insert(d.name.as_str()) {
                return Err(CliError::Config(format!("duplicate domain {}", d.name)));
            }
        }
        self.corpus_spec(None)?.validate()?;
        for d in &self.domains {
            self.corpus_spec(Some(&d.name))?.validate()?;
        }
        if !self.merge.lambdas.is_empty() && self.merge.lambdas.len() != self.domains.len() {
            return Err(CliError::Config(format!(
                "merge.lambdas has {} entries for {} domains",
                self.merge.lambdas.len(),
                self.domains.len()
            )));
        }
        self.teacher_train().schedule.validate()?;
        self.align_config().validate()?;
        self.distill_config(None).validate()?;
        if self.eval.curve_points < 2 {
            return Err(CliError::Config("eval.curve_points must be at least 2".into()));
        }
        Ok(())
    }

    pub fn domain(&self, name: &str) -> CliResult<&DomainSection> {
        self.domains
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| CliError::Config(format!("unknown domain {name}")))
    }

    /// Configuration of the student architecture.
    pub fn student_config(&self) -> ModelConfig {
        let mut c = self.teacher.with_kind(self.student.kind);
        c.mixer.window = self.student.window;
        c.mixer.n_sinks = self.student.n_sinks;
        c.mixer.chunk_size = self.student.chunk_size;
        c
    }

    /// The base corpus (`None`) or a domain corpus.
    pub fn corpus_spec(&self, domain: Option<&str>) -> CliResult<CorpusSpec> {
        let c = &self.corpus;
        let (mix, n, tag) = match domain {
            None => (c.mix, c.n_sequences, "corpus/base".to_string()),
            Some(name) => {
                let d = self.domain(name)?;
                (d.mix, d.n_sequences.unwrap_or(c.n_sequences), format!("corpus/{name}"))
            }
        };
        Ok(CorpusSpec {
            vocab_size: self.teacher.vocab_size,
            seq_len: c.seq_len,
            n_sequences: n,
            seed: sub_seed(self.seed, &tag),
            mix,
            window: c
                .recall_distance
                .unwrap_or(self.teacher.n_layers * self.student.window),
            eval_fraction: c.eval_fraction,
            kv_pairs: c.kv_pairs,
            ngram_len: c.ngram_len,
            markov_branching: c.markov_branching,
        })
    }

    pub fn teacher_train(&self) -> TeacherTrainConfig {
        let t = &self.train_teacher;
        TeacherTrainConfig {
            steps: t.steps,
            batch: t.batch,
            seed: sub_seed(self.seed, "train-teacher"),
            schedule: t.schedule.clone(),
            optim: t.optim.clone(),
        }
    }

    pub fn align_config(&self) -> DistillConfig {
        let a = &self.align;
        DistillConfig {
            schedule: a.schedule.clone(),
            optim: a.optim.clone(),
            ..DistillConfig::stage1(a.steps, a.batch, sub_seed(self.seed, "align"))
        }
    }

    pub fn distill_config(&self, domain: Option<&str>) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            gamma: d.gamma,
            beta: d.beta,
            k: d.k,
            freeze_set: d.freeze_set,
            schedule: d.schedule.clone(),
            steps: d.steps,
            batch: d.batch,
            seed: sub_seed(self.seed, &format!("distill/{}", domain.unwrap_or(""))),
            optim: d.optim.clone(),
        }
    }

    pub fn bench_options(&self) -> BenchOptions {
        BenchOptions {
            warmups: self.bench.warmups,
            repeats: self.bench.repeats,
            seed: sub_seed(self.seed, "bench"),
        }
    }
}

/// Deterministic per-purpose seed (FNV-1a of the tag, mixed with splitmix64).
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Recursively merges `top` into `base`; tables merge, everything else replaces.
fn overlay(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of `--set` as a TOML value, falling back to a
/// bare string.
fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override; numeric segments index arrays.
pub fn apply_set(table: &mut Table, set: &str) -> CliResult<()> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {set:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad --set key {key:?}")));
    }
    let value = parse_value(raw.trim());
    let mut cur: &mut Value = table
        .entry(parts[0].to_string())
        .or_insert_with(|| Value::Table(Table::new()));
    if parts.len() == 1 {
        *cur = value;
        return Ok(());
    }
    for (i, part) in parts.iter().enumerate().skip(1) {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()))
            }
            Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| CliError::Config(format!("{key}: {part} is not an array index")))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Config(format!("{key}: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Config(format!("{key}: {part} is inside a non-table value"))),
        };
    }
    unreachable!("loop returns on the last segment")
}
