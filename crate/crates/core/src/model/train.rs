//! Optimizer, learning-rate schedules and the shared training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelVars};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Mean next-token cross-entropy of `logits: [T, V]` against `targets` (length T).
pub fn cross_entropy<'t, T: Float>(logits: &Var<'t, T>, targets: &[u32]) -> Result<Var<'t, T>> {
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    logits.log_softmax()?.gather_last(&idx, 1)?.mean_all()?.neg()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (not norms or biases).
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Linear warmup to `peak`, then cosine decay to `floor` at the last step.
    WarmupCosine { peak: f64, floor: f64, warmup_steps: usize },
    Constant { lr: f64 },
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::WarmupCosine {
                peak,
                floor,
                warmup_steps,
            } => {
                if step < warmup_steps {
                    return peak * (step + 1) as f64 / warmup_steps as f64;
                }
                let span = total.saturating_sub(warmup_steps).max(1) as f64;
                let p = ((step - warmup_steps) as f64 / (span - 1.0).max(1.0)).min(1.0);
                floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { lr } => lr >= 0.0,
            LrSchedule::WarmupCosine { peak, floor, .. } => peak >= floor && floor >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

/// Adam with decoupled weight decay and global-norm clipping.
pub struct AdamW<T: Float> {
    cfg: AdamWConfig,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
    t: i32,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: AdamWConfig, n_params: usize) -> Self {
        Self {
            cfg,
            m: vec![None; n_params],
            v: vec![None; n_params],
            t: 0,
        }
    }

    /// Applies one update for `(parameter index, gradient)` pairs; parameters
    /// without a gradient are not touched. Returns the pre-clip gradient norm.
    pub fn step(&mut self, model: &mut Model<T>, grads: &[(usize, Tensor<T>)], lr: f64) -> Result<f64> {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data().iter().map(|x| x.as_f64().powi(2)))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let f = T::from_f64;
        let (b1, b2, eps) = (f(c.beta1), f(c.beta2), f(c.eps));
        for (i, g) in grads {
            let p = model.params.tensor_at_mut(*i);
            let decay = if p.rank() >= 2 { c.weight_decay } else { 0.0 };
            let m = self.m[*i].get_or_insert_with(|| vec![T::zero(); p.numel()]);
            let v = self.v[*i].get_or_insert_with(|| vec![T::zero(); p.numel()]);
            let (step, shrink) = (f(lr), f(1.0 - lr * decay));
            let (s1, s2) = (f(1.0 / bc1), f(1.0 / bc2));
            for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gr = gr * f(clip);
                *mi = b1 * *mi + (T::one() - b1) * gr;
                *vi = b2 * *vi + (T::one() - b2) * gr * gr;
                let upd = (*mi * s1) / ((*vi * s2).sqrt() + eps);
                *w = *w * shrink - step * upd;
            }
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("update of {}", model.params.name_at(*i))));
            }
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: usize,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub optim: AdamWConfig,
}

fn with_step(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("training diverged at step {step}: {m}")),
        e => e,
    }
}

/// Runs `opts.steps` optimizer steps on the parameters selected by
/// `trainable`; `loss_at(step, vars)` builds each step's scalar loss. A loss
/// that does not depend on any trainable parameter leaves the model untouched.
/// Returns the per-step losses.
pub fn train_loop<T, F>(
    model: &mut Model<T>,
    trainable: &dyn Fn(&str) -> bool,
    opts: &TrainOptions,
    mut loss_at: F,
) -> Result<Vec<f64>>
where
    T: Float,
    F: for<'t> FnMut(usize, &ModelVars<'t, T>) -> Result<Var<'t, T>>,
{
    opts.schedule.validate()?;
    let mut opt = AdamW::new(opts.optim.clone(), model.params.len());
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let tape = Tape::new();
        let mv = model.bind(&tape, trainable)?;
        let loss = loss_at(step, &mv).map_err(|e| with_step(step, e))?;
        let value = loss.item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training diverged at step {step}: loss {value}")));
        }
        losses.push(value);
        if !loss.requires_grad() {
            continue;
        }
        let grads = tape.backward(&loss)?;
        let pairs: Vec<(usize, Tensor<T>)> = mv
            .leaves
            .iter()
            .map(|(i, v)| (*i, grads.get_or_zero(v)))
            .collect();
        drop(mv);
        let lr = opts.schedule.lr_at(step, opts.steps);
        opt.step(model, &pairs, lr).map_err(|e| with_step(step, e))?;
    }
    Ok(losses)
}

/// Mean per-token next-token cross-entropy over `seqs`.
pub fn eval_ce<T: Float>(model: &Model<T>, seqs: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in seqs.iter().filter(|s| s.len() >= 2) {
        let tape = Tape::new();
        let mv = model.bind_frozen(&tape)?;
        let n = s.len() - 1;
        let logits = mv.forward(&s[..n])?.logits;
        total += cross_entropy(&logits, &s[1..])?.item().as_f64() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Contract("evaluation set has no predictable tokens".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub optim: AdamWConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_train_loss: Option<f64>,
    pub eval_ce: f64,
    /// `ln(vocab_size)`: cross-entropy of the uniform predictor.
    pub uniform_ce: f64,
    pub losses: Vec<f64>,
}

/// Picks `batch` training sequences per step from a seeded generator.
pub fn batch_indices(n_seqs: usize, batch: usize, steps: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|_| (0..batch).map(|_| rng.gen_range(0..n_seqs)).collect())
        .collect()
}

/// Mean of per-sequence next-token losses built by `f`.
pub fn mean_over<'t, T: Float>(
    items: impl IntoIterator<Item = Result<Var<'t, T>>>,
) -> Result<Var<'t, T>> {
    let mut acc: Option<Var<'t, T>> = None;
    let mut n = 0usize;
    for l in items {
        let l = l?;
        acc = Some(match acc {
            Some(a) => a.add(&l)?,
            None => l,
        });
        n += 1;
    }
    acc.ok_or_else(|| Error::Contract("empty batch".into()))?
        .scale(1.0 / n as f64)
}

/// Next-token training of a freshly initialized model.
pub fn train_teacher<T: Float>(
    cfg: &ModelConfig,
    train: &[Vec<u32>],
    eval: &[Vec<u32>],
    tc: &TeacherTrainConfig,
) -> Result<(Model<T>, TrainReport)> {
    let mut model = Model::<T>::init(cfg.clone(), tc.seed)?;
    if train.is_empty() && tc.steps > 0 {
        return Err(Error::Contract("no training sequences".into()));
    }
    if tc.batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    let batches = batch_indices(train.len().max(1), tc.batch, tc.steps, tc.seed ^ 0x5eed);
    let opts = TrainOptions {
        steps: tc.steps,
        schedule: tc.schedule.clone(),
        optim: tc.optim.clone(),
    };
    let losses = train_loop(&mut model, &|_| true, &opts, |step, mv| {
        mean_over(batches[step].iter().map(|&i| {
            let s = &train[i];
            let n = s.len() - 1;
            cross_entropy(&mv.forward(&s[..n])?.logits, &s[1..])
        }))
    })?;
    let eval_ce = if eval.is_empty() { f64::NAN } else { eval_ce(&model, eval)? };
    let report = TrainReport {
        steps: tc.steps,
        final_train_loss: losses.last().copied(),
        eval_ce,
        uniform_ce: (cfg.vocab_size as f64).ln(),
        losses,
    };
    Ok((model, report))
}
