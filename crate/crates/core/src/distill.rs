//! Two-stage distillation of a softmax teacher into a hybrid student.
//!
//! Stage I aligns each student mixer, fed the teacher's own layer inputs, with
//! the teacher's attention output (before `W_out`).  Stage II fine-tunes the
//! whole student on `γ·CE + β·KL`, the KL taken over the teacher's stored
//! top-k ids.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::mixers::{mixer_forward, Overrides};
use crate::model::train::{batch_indices, cross_entropy, eval_ce, AdamW, AdamWConfig, LrSchedule, TrainOptions};
use crate::model::{train::train_loop, Model};
use crate::tensor::{Float, Tape, Tensor, Var};
use crate::{Error, Result};

/// Floor on the student probability inside the KL logarithm.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeSet {
    /// Only feature maps and gate projections train.
    NewParamsOnly,
    /// Every `layers.*.mixer.*` tensor trains.
    MixersOnly,
    #[default]
    Full,
}

const NEW_PARAMS: [&str; 7] = ["phi_q", "phi_k", "w_i", "b_i", "w_f", "b_f", "w_og"];

impl FreezeSet {
    pub fn trainable(&self, name: &str) -> bool {
        match self {
            FreezeSet::Full => true,
            FreezeSet::MixersOnly => name.contains(".mixer."),
            FreezeSet::NewParamsOnly => name
                .split_once(".mixer.")
                .is_some_and(|(_, leaf)| NEW_PARAMS.contains(&leaf)),
        }
    }
}

/// Bitwise snapshot of the tensors a run must not touch.
pub struct FreezeGuard<T: Float> {
    frozen: Vec<(usize, Tensor<T>)>,
}

impl<T: Float> FreezeGuard<T> {
    pub fn new(model: &Model<T>, trainable: &dyn Fn(&str) -> bool) -> Self {
        let frozen = (0..model.params.len())
            .filter(|&i| !trainable(model.params.name_at(i)))
            .map(|i| (i, model.params.tensor_at(i).clone()))
            .collect();
        FreezeGuard { frozen }
    }

    pub fn check(&self, model: &Model<T>) -> Result<()> {
        for (i, t) in &self.frozen {
            let now = model.params.tensor_at(*i);
            let same = now.shape() == t.shape()
                && now.data().iter().zip(t.data()).all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits());
            if !same {
                return Err(Error::Contract(format!(
                    "frozen tensor {} was updated",
                    model.params.name_at(*i)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub freeze_set: FreezeSet,
    pub schedule: LrSchedule,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    #[serde(default)]
    pub optim: AdamWConfig,
}

fn default_gamma() -> f64 {
    0.9
}
fn default_beta() -> f64 {
    0.1
}
fn default_k() -> usize {
    256
}

impl DistillConfig {
    /// Alignment defaults: new parameters only, warmup-cosine 1e-2 → 1e-5.
    pub fn stage1(steps: usize, batch: usize, seed: u64) -> Self {
        DistillConfig {
            gamma: default_gamma(),
            beta: default_beta(),
            k: default_k(),
            freeze_set: FreezeSet::NewParamsOnly,
            schedule: LrSchedule::WarmupCosine {
                peak: 1e-2,
                floor: 1e-5,
                warmup_steps: steps / 20,
            },
            steps,
            batch,
            seed,
            optim: AdamWConfig::default(),
        }
    }

    /// Fine-tuning defaults: full model, constant 1e-5.
    pub fn stage2(steps: usize, batch: usize, seed: u64) -> Self {
        DistillConfig {
            freeze_set: FreezeSet::Full,
            schedule: LrSchedule::Constant { lr: 1e-5 },
            ..Self::stage1(steps, batch, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("gamma and beta must be nonnegative".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        self.schedule.validate()
    }
}

// ------------------------------------------------------------------ stage I

/// Teacher activations for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTargets<T: Float> {
    /// Normalized mixer input per layer, `[T, d_model]`.
    pub inputs: Vec<Tensor<T>>,
    /// Attention output before `W_out` per layer, `[T, H·d_v]`.
    pub outputs: Vec<Tensor<T>>,
}

pub fn capture_alignment_targets<T: Float>(teacher: &Model<T>, tokens: &[u32]) -> Result<AlignmentTargets<T>> {
    let tape = Tape::new();
    let trace = teacher.bind_frozen(&tape)?.forward(tokens)?;
    Ok(AlignmentTargets {
        inputs: trace.mixer_inputs.iter().map(|v| v.value().clone()).collect(),
        outputs: trace.pre_out.iter().map(|v| v.value().clone()).collect(),
    })
}

fn check_pair<T: Float>(teacher: &Model<T>, student: &Model<T>) -> Result<()> {
    let (a, b) = (&teacher.config, &student.config);
    let mut sc = b.clone();
    sc.mixer_kind = a.mixer_kind;
    sc.mixer.window = a.mixer.window;
    sc.mixer.n_sinks = a.mixer.n_sinks;
    sc.mixer.chunk_size = a.mixer.chunk_size;
    sc.mixer.gate_input_mode = a.mixer.gate_input_mode;
    if sc != *a {
        return Err(Error::Config("student and teacher shapes differ".into()));
    }
    Ok(())
}

/// Σ over positions of the squared error of layer `l`'s student branch.
pub fn layer_align_loss<'t, T: Float>(
    mv: &crate::model::ModelVars<'t, T>,
    l: usize,
    tgt: &AlignmentTargets<T>,
    ov: &Overrides,
) -> Result<Var<'t, T>> {
    let tape = mv.embed.tape();
    let cfg = &mv.config;
    let x = tape.constant(tgt.inputs[l].clone());
    let out = mixer_forward(cfg.mixer_kind, &cfg.mixer, &mv.layers[l].mixer, &x, ov)?;
    out.pre_out.sub(&tape.constant(tgt.outputs[l].clone()))?.square()?.sum_all()
}

/// Mean over `seqs` of the per-layer alignment losses.
pub fn alignment_loss<T: Float>(
    student: &Model<T>,
    teacher: &Model<T>,
    seqs: &[Vec<u32>],
    ov: &Overrides,
) -> Result<Vec<f64>> {
    check_pair(teacher, student)?;
    let mut acc = vec![0.0; student.config.n_layers];
    for s in seqs {
        let tgt = capture_alignment_targets(teacher, s)?;
        let tape = Tape::new();
        let mv = student.bind_frozen(&tape)?;
        for (l, a) in acc.iter_mut().enumerate() {
            *a += layer_align_loss(&mv, l, &tgt, ov)?.item().as_f64();
        }
    }
    let n = seqs.len().max(1) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub steps: usize,
    /// Summed over layers, per step.
    pub losses: Vec<f64>,
}

/// Stage I.  Layers are optimized independently — each has its own optimizer
/// state and gradient clipping — so `layer_order` only affects the order of
/// work, never the result.  `None` aligns all layers in index order.
pub fn stage1_align<T: Float>(
    student: &mut Model<T>,
    teacher: &Model<T>,
    train: &[Vec<u32>],
    cfg: &DistillConfig,
    layer_order: Option<&[usize]>,
) -> Result<AlignReport> {
    cfg.validate()?;
    if cfg.freeze_set != FreezeSet::NewParamsOnly {
        return Err(Error::Config("stage I trains new parameters only (freeze_set = new_params_only)".into()));
    }
    check_pair(teacher, student)?;
    if !student.config.mixer_kind.has_feature_maps() {
        return Err(Error::Config(format!(
            "mixer {} has no new parameters to align",
            student.config.mixer_kind.name()
        )));
    }
    if train.is_empty() && cfg.steps > 0 {
        return Err(Error::Contract("no training sequences".into()));
    }
    let n_layers = student.config.n_layers;
    let all: Vec<usize> = (0..n_layers).collect();
    let order = layer_order.unwrap_or(&all);
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != all {
        return Err(Error::Config("layer_order must be a permutation of the layers".into()));
    }

    let trainable = |name: &str| cfg.freeze_set.trainable(name);
    let guard = FreezeGuard::new(student, &trainable);
    let prefixes: Vec<String> = (0..n_layers).map(|l| format!("layers.{l}.")).collect();
    let mut opts: Vec<AdamW<T>> = (0..n_layers)
        .map(|_| AdamW::new(cfg.optim.clone(), student.params.len()))
        .collect();
    let batches = batch_indices(train.len().max(1), cfg.batch, cfg.steps, cfg.seed ^ 0xa119);
    let mut losses = Vec::with_capacity(cfg.steps);
    for (step, batch) in batches.iter().enumerate() {
        let targets = batch
            .iter()
            .map(|&i| capture_alignment_targets(teacher, &train[i]))
            .collect::<Result<Vec<_>>>()?;
        let lr = cfg.schedule.lr_at(step, cfg.steps);
        let mut per_layer = vec![0.0; n_layers];
        for &l in order {
            let prefix = &prefixes[l];
            let tape = Tape::new();
            let mv = student.bind(&tape, &|n: &str| n.starts_with(prefix.as_str()) && trainable(n))?;
            let mut total: Option<Var<T>> = None;
            for tgt in &targets {
                let li = layer_align_loss(&mv, l, tgt, &Overrides::default())?;
                total = Some(match total {
                    Some(a) => a.add(&li)?,
                    None => li,
                });
            }
            let loss = total.expect("nonempty batch").scale(1.0 / targets.len() as f64)?;
            per_layer[l] = loss.item().as_f64();
            if !per_layer[l].is_finite() {
                return Err(Error::NonFinite(format!("alignment diverged at step {step}, layer {l}")));
            }
            let grads = tape.backward(&loss)?;
            let pairs: Vec<_> = mv.leaves.iter().map(|(i, v)| (*i, grads.get_or_zero(v))).collect();
            drop(mv);
            opts[l]
                .step(student, &pairs, lr)
                .map_err(|e| Error::NonFinite(format!("alignment diverged at step {step}: {e}")))?;
        }
        losses.push(per_layer.iter().sum());
    }
    guard.check(student)?;
    if cfg.steps > 0 {
        student.provenance = Some(json!({ "stage": "align", "config": cfg }));
    }
    Ok(AlignReport { steps: cfg.steps, losses })
}

// ---------------------------------------------------------- teacher targets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetsHeader {
    pub k: usize,
    pub vocab_size: usize,
    pub teacher_hash: String,
    pub n_positions: usize,
    /// SHA-256 of the packed input tokens the targets were computed on.
    pub dataset_hash: String,
}

/// Top-k teacher logits for every predicting position of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTargets {
    pub header: TargetsHeader,
    /// `n_positions · k` ids, each position sorted by descending logit.
    pub ids: Vec<u32>,
    pub logits: Vec<f32>,
}

/// Hash identifying the sequences a targets file belongs to.
pub fn dataset_hash(seqs: &[Vec<u32>]) -> String {
    let mut bytes = Vec::new();
    for s in seqs {
        bytes.extend((s.len() as u64).to_le_bytes());
        bytes.extend(s.iter().flat_map(|t| t.to_le_bytes()));
    }
    crate::io::sha256_hex(&bytes)
}

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
pub fn top_k<T: Float>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        row[*b]
            .as_f64()
            .partial_cmp(&row[*a].as_f64())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Teacher top-k over each sequence's predicting positions (all but the
/// last token).
pub fn precompute_teacher_targets<T: Float>(teacher: &Model<T>, seqs: &[Vec<u32>], k: usize) -> Result<TeacherTargets> {
    let v = teacher.config.vocab_size;
    if k == 0 || k > v {
        return Err(Error::Config(format!("k = {k} must lie in 1..={v}")));
    }
    let mut ids = Vec::new();
    let mut logits = Vec::new();
    let mut n_positions = 0;
    for s in seqs {
        if s.len() < 2 {
            return Err(Error::Contract("sequences need at least two tokens".into()));
        }
        let n = s.len() - 1;
        let tape = Tape::new();
        let out = teacher.bind_frozen(&tape)?.forward(&s[..n])?.logits;
        for t in 0..n {
            let row = out.value().row(t);
            for j in top_k(row, k) {
                ids.push(j as u32);
                logits.push(row[j].as_f64() as f32);
            }
        }
        n_positions += n;
    }
    Ok(TeacherTargets {
        header: TargetsHeader {
            k,
            vocab_size: v,
            teacher_hash: teacher.content_hash()?,
            n_positions,
            dataset_hash: dataset_hash(seqs),
        },
        ids,
        logits,
    })
}

impl TeacherTargets {
    pub fn position(&self, p: usize) -> (&[u32], &[f32]) {
        let k = self.header.k;
        (&self.ids[p * k..(p + 1) * k], &self.logits[p * k..(p + 1) * k])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let k = self.header.k;
        let mut out = Vec::with_capacity(8 + header.len() + self.ids.len() * 8);
        out.extend((header.len() as u64).to_le_bytes());
        out.extend(&header);
        for p in 0..self.header.n_positions {
            for id in &self.ids[p * k..(p + 1) * k] {
                out.extend(id.to_le_bytes());
            }
            for x in &self.logits[p * k..(p + 1) * k] {
                out.extend(x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("targets file: {m}"));
        let hl = u64::from_le_bytes(bytes.get(..8).ok_or_else(|| bad("truncated"))?.try_into().unwrap()) as usize;
        let header: TargetsHeader =
            serde_json::from_slice(bytes.get(8..8 + hl).ok_or_else(|| bad("truncated header"))?)?;
        let (k, n) = (header.k, header.n_positions);
        let body = &bytes[8 + hl..];
        if k == 0 || body.len() != n * k * 8 {
            return Err(bad("body length does not match header"));
        }
        let mut ids = Vec::with_capacity(n * k);
        let mut logits = Vec::with_capacity(n * k);
        for rec in body.chunks_exact(8 * k) {
            let (a, b) = rec.split_at(4 * k);
            ids.extend(a.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())));
            logits.extend(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        }
        if ids.iter().any(|&i| i as usize >= header.vocab_size) {
            return Err(bad("id outside vocabulary"));
        }
        for p in 0..n {
            let mut row = ids[p * k..(p + 1) * k].to_vec();
            row.sort_unstable();
            if row.windows(2).any(|w| w[0] == w[1]) {
                return Err(bad("duplicate id at a position"));
            }
        }
        Ok(TeacherTargets { header, ids, logits })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

// --------------------------------------------------------------------- KL

fn softmax64(x: impl Iterator<Item = f64>) -> Vec<f64> {
    let x: Vec<f64> = x.collect();
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// KL from the teacher's restricted distribution to the student's, both
/// renormalized over the teacher's id set.
pub fn sparse_kl<T: Float>(ids: &[u32], teacher_logits: &[f32], student_logits: &[T]) -> f64 {
    let p = softmax64(teacher_logits.iter().map(|&x| x as f64));
    let q = softmax64(ids.iter().map(|&i| student_logits[i as usize].as_f64()));
    p.iter()
        .zip(&q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.max(KL_FLOOR).ln()))
        .sum()
}

/// Mean over positions of [`sparse_kl`], differentiable in the student logits `[n, V]`.
pub fn sparse_kl_var<'t, T: Float>(
    student_logits: &Var<'t, T>,
    ids: &[u32],
    teacher_logits: &[f32],
    k: usize,
) -> Result<Var<'t, T>> {
    let n = student_logits.shape()[0];
    if ids.len() != n * k || teacher_logits.len() != n * k {
        return Err(Error::shape("sparse_kl", &[ids.len()], &[n, k]));
    }
    let tape = student_logits.tape();
    let mut p = Vec::with_capacity(n * k);
    let mut neg_entropy = 0.0;
    for row in teacher_logits.chunks_exact(k) {
        for pi in softmax64(row.iter().map(|&x| x as f64)) {
            if pi > 0.0 {
                neg_entropy += pi * pi.ln();
            }
            p.push(pi);
        }
    }
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let log_q = student_logits
        .gather_last(&idx, k)?
        .log_softmax()?
        .clamp_min(KL_FLOOR.ln())?;
    let p = tape.constant(Tensor::from_f64_slice(&[n, k], &p)?);
    let cross = p.mul(&log_q)?.sum_all()?;
    cross.neg()?.affine(1.0 / n as f64, neg_entropy / n as f64)
}

// ----------------------------------------------------------------- stage II

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub final_train_loss: Option<f64>,
    pub eval_ce: f64,
}

/// `γ·CE + β·KL` for one sequence whose targets start at position `offset`.
pub fn stage2_loss<'t, T: Float>(
    mv: &crate::model::ModelVars<'t, T>,
    seq: &[u32],
    targets: &TeacherTargets,
    offset: usize,
    gamma: f64,
    beta: f64,
) -> Result<Var<'t, T>> {
    let tape = mv.embed.tape();
    if gamma == 0.0 && beta == 0.0 {
        return Ok(tape.scalar(T::zero()));
    }
    let n = seq.len() - 1;
    let logits = mv.forward(&seq[..n])?.logits;
    let k = targets.header.k;
    let mut terms = Vec::new();
    if gamma > 0.0 {
        terms.push(cross_entropy(&logits, &seq[1..])?.scale(gamma)?);
    }
    if beta > 0.0 {
        let (ids, tl) = (&targets.ids[offset * k..(offset + n) * k], &targets.logits[offset * k..(offset + n) * k]);
        terms.push(sparse_kl_var(&logits, ids, tl, k)?.scale(beta)?);
    }
    let mut it = terms.into_iter();
    let first = it.next().expect("at least one term");
    it.try_fold(first, |a, b| a.add(&b))
}

/// Stage II.  `targets` must have been computed on exactly `train`.
pub fn stage2_distill<T: Float>(
    student: &mut Model<T>,
    train: &[Vec<u32>],
    eval: &[Vec<u32>],
    targets: &TeacherTargets,
    cfg: &DistillConfig,
) -> Result<DistillReport> {
    cfg.validate()?;
    if targets.header.dataset_hash != dataset_hash(train) {
        return Err(Error::Contract("teacher targets were computed for a different dataset".into()));
    }
    if targets.header.vocab_size != student.config.vocab_size {
        return Err(Error::Contract("teacher targets vocabulary differs from the student's".into()));
    }
    if train.is_empty() && cfg.steps > 0 {
        return Err(Error::Contract("no training sequences".into()));
    }
    let offsets: Vec<usize> = train
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s.len() - 1;
            Some(o)
        })
        .collect();
    let trainable = |name: &str| cfg.freeze_set.trainable(name);
    let guard = FreezeGuard::new(student, &trainable);
    let batches = batch_indices(train.len().max(1), cfg.batch, cfg.steps, cfg.seed ^ 0xd157);
    let opts = TrainOptions {
        steps: cfg.steps,
        schedule: cfg.schedule.clone(),
        optim: cfg.optim.clone(),
    };
    let losses = train_loop(student, &trainable, &opts, |step, mv| {
        crate::model::train::mean_over(
            batches[step]
                .iter()
                .map(|&i| stage2_loss(mv, &train[i], targets, offsets[i], cfg.gamma, cfg.beta)),
        )
    })?;
    guard.check(student)?;
    if cfg.steps > 0 {
        student.provenance = Some(json!({
            "stage": "distill",
            "teacher_hash": targets.header.teacher_hash,
            "config": cfg,
        }));
    }
    let eval_ce = if eval.is_empty() { f64::NAN } else { eval_ce(student, eval)? };
    Ok(DistillReport {
        steps: cfg.steps,
        final_train_loss: losses.last().copied(),
        losses,
        eval_ce,
    })
}
