//! Cache-size accounting, operation-count profiles and wall-clock decode /
//! prefill measurements.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mixers::{MixerKind, Overrides};
use crate::model::{Model, ModelConfig, ModelVars};
use crate::tensor::{counter, Float, Tape};
use crate::{Error, Result};

/// Scalars a decoder holds after `t` tokens.  Windowed caches keep at most
/// `window + n_sinks` positions; recurrent layers keep `S`, `z` and the
/// stabilizer `m` per head.
pub fn cache_accounting(cfg: &ModelConfig, t: usize) -> usize {
    let m = &cfg.mixer;
    let (l, h) = (cfg.n_layers, m.n_heads);
    let per_pos = l * h * (m.d_qk + m.d_v);
    let state = l * h * (m.d_qk * m.d_v + m.d_qk + 1);
    let kind = cfg.mixer_kind;
    let positions = match kind {
        MixerKind::SoftmaxFull => t,
        _ if kind.has_window() => t.min(m.window + m.n_sinks),
        _ => 0,
    };
    positions * per_pos + if kind.has_recurrent_state() { state } else { 0 }
}

fn bench_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.gen_range(0..vocab as u32)).collect()
}

fn caches_after<'t, T: Float>(
    mv: &ModelVars<'t, T>,
    tokens: &[u32],
) -> Result<Vec<crate::mixers::LayerCache<'t, T>>> {
    if tokens.is_empty() {
        mv.empty_caches()
    } else {
        Ok(mv.prefill(tokens, &Overrides::default())?.1)
    }
}

/// Live cache scalars after decoding `t` tokens one at a time.
pub fn instrumented_cache_scalars<T: Float>(model: &Model<T>, t: usize, seed: u64) -> Result<usize> {
    let tape = Tape::new();
    let mv = model.bind_frozen(&tape)?;
    let mut caches = mv.empty_caches()?;
    for tok in bench_tokens(t, model.config.vocab_size, seed) {
        mv.step(tok, &mut caches, &Overrides::default())?;
    }
    Ok(ModelVars::cache_scalars(&caches))
}

/// Operation counts at one context length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpProfile {
    pub t: usize,
    /// Parallel forward over `t` tokens.
    pub prefill_ops: u64,
    /// One decode step after those `t` tokens.
    pub step_ops: u64,
    /// Live scalars in the caches after the prefill.
    pub cache_scalars: usize,
}

pub fn op_profile<T: Float>(model: &Model<T>, ts: &[usize], seed: u64) -> Result<Vec<OpProfile>> {
    ts.iter()
        .map(|&t| {
            if t == 0 {
                return Err(Error::Config("op profile needs t >= 1".into()));
            }
            let toks = bench_tokens(t + 1, model.config.vocab_size, seed);
            let tape = Tape::new();
            let mv = model.bind_frozen(&tape)?;
            let (caches, prefill_ops) = counter::measure(|| caches_after(&mv, &toks[..t]));
            let mut caches = caches?;
            let cache_scalars = ModelVars::cache_scalars(&caches);
            let (r, step_ops) = counter::measure(|| mv.step(toks[t], &mut caches, &Overrides::default()));
            r?;
            Ok(OpProfile {
                t,
                prefill_ops,
                step_ops,
                cache_scalars,
            })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

// ------------------------------------------------------------ wall clock

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    Prefill,
    Generate,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Prefill => "prefill",
            BenchMode::Generate => "generate",
        }
    }
}

pub const DEFAULT_CHECKPOINTS: [usize; 5] = [256, 512, 1024, 2048, 4096];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub mode: BenchMode,
    /// Name of one of the models handed to [`run_bench`].
    pub model: String,
    pub batch: usize,
    /// Prompt length `C`; ignored by prefill rows, which use each checkpoint.
    #[serde(default)]
    pub context: usize,
    /// Generation budget `G` recorded with generate rows.
    #[serde(default)]
    pub gen: usize,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<usize>,
}

fn default_checkpoints() -> Vec<usize> {
    DEFAULT_CHECKPOINTS.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchOptions {
    #[serde(default = "default_warmups")]
    pub warmups: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_warmups() -> usize {
    3
}
fn default_repeats() -> usize {
    5
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmups: default_warmups(),
            repeats: default_repeats(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: BenchMode,
    pub model: String,
    pub b: usize,
    pub c: usize,
    pub g: usize,
    pub t: usize,
    /// Median seconds per decode step (generate) or per prompt token (prefill).
    pub step_latency_s: f64,
    pub cache_scalars: usize,
    pub throughput_tps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub warmups: usize,
    pub repeats: usize,
    /// Total measured-or-warmup executions performed.
    pub runs_executed: usize,
}

impl BenchResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,model,B,C,G,t,step_latency_s,cache_scalars,throughput_tps\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.9},{},{:.3}\n",
                r.mode.name(),
                r.model,
                r.b,
                r.c,
                r.g,
                r.t,
                r.step_latency_s,
                r.cache_scalars,
                r.throughput_tps
            ));
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn check_cache(cfg: &ModelConfig, t: usize, live: usize) -> Result<usize> {
    let analytic = cache_accounting(cfg, t);
    if analytic != live {
        return Err(Error::Contract(format!(
            "cache accounting mismatch at t={t}: analytic {analytic}, instrumented {live}"
        )));
    }
    Ok(analytic)
}

const MAX_WIDEN: usize = 1 << 10;

/// One row; `batch` sequences are processed per timed run.
fn measure_row<T: Float>(
    model: &Model<T>,
    sc: &Scenario,
    t: usize,
    batch: usize,
    opts: &BenchOptions,
    runs: &mut usize,
) -> Result<(Vec<f64>, usize)> {
    let cfg = &model.config;
    let n_runs = opts.warmups + opts.repeats;
    let prompts: Vec<Vec<u32>> = (0..batch)
        .map(|b| bench_tokens(t + n_runs, cfg.vocab_size, opts.seed.wrapping_add(b as u64)))
        .collect();
    let mut times = Vec::with_capacity(opts.repeats);
    let mut live = 0;
    match sc.mode {
        BenchMode::Prefill => {
            for run in 0..n_runs {
                let start = Instant::now();
                for p in &prompts {
                    let tape = Tape::new();
                    let mv = model.bind_frozen(&tape)?;
                    let caches = caches_after(&mv, &p[..t])?;
                    live = ModelVars::cache_scalars(&caches);
                }
                let dt = start.elapsed().as_secs_f64();
                *runs += 1;
                if run >= opts.warmups {
                    times.push(dt);
                }
            }
        }
        BenchMode::Generate => {
            let tapes: Vec<Tape<T>> = (0..batch).map(|_| Tape::new()).collect();
            let mvs = tapes.iter().map(|tp| model.bind_frozen(tp)).collect::<Result<Vec<_>>>()?;
            let mut caches = mvs
                .iter()
                .zip(&prompts)
                .map(|(mv, p)| caches_after(mv, &p[..t]))
                .collect::<Result<Vec<_>>>()?;
            live = caches.iter().map(|c| ModelVars::cache_scalars(c)).sum::<usize>() / batch;
            for run in 0..n_runs {
                let start = Instant::now();
                for ((mv, c), p) in mvs.iter().zip(caches.iter_mut()).zip(&prompts) {
                    mv.step(p[t + run], c, &Overrides::default())?;
                }
                let dt = start.elapsed().as_secs_f64();
                *runs += 1;
                if run >= opts.warmups {
                    times.push(dt);
                }
            }
        }
    }
    Ok((times, live))
}

/// Runs every scenario at each of its checkpoints.  Timings are medians
/// over `repeats` runs after `warmups` discarded ones.  A median of zero
/// (timer too coarse) doubles the batch and retries.
pub fn run_bench<T: Float>(models: &[(&str, &Model<T>)], scenarios: &[Scenario], opts: &BenchOptions) -> Result<BenchResult> {
    if opts.repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut runs = 0;
    for sc in scenarios {
        let model = models
            .iter()
            .find(|(n, _)| *n == sc.model)
            .map(|(_, m)| *m)
            .ok_or_else(|| Error::Config(format!("unknown bench model {}", sc.model)))?;
        if sc.batch == 0 {
            return Err(Error::Config("bench batch must be positive".into()));
        }
        for &t in &sc.checkpoints {
            if sc.mode == BenchMode::Prefill && t == 0 {
                return Err(Error::Config("prefill checkpoints must be positive".into()));
            }
            let mut batch = sc.batch;
            let (med, live) = loop {
                let (times, live) = measure_row(model, sc, t, batch, opts, &mut runs)?;
                let med = median(times);
                if med > 0.0 || batch >= MAX_WIDEN * sc.batch {
                    break (med, live);
                }
                batch *= 2;
            };
            let cache_scalars = check_cache(&model.config, t, live)?;
            let (step_latency_s, throughput_tps, c, g) = match sc.mode {
                BenchMode::Prefill => (med / t as f64, (batch * t) as f64 / med, t, 0),
                BenchMode::Generate => (med, batch as f64 / med, sc.context, sc.gen),
            };
            rows.push(BenchRow {
                mode: sc.mode,
                model: sc.model.clone(),
                b: batch,
                c,
                g,
                t,
                step_latency_s,
                cache_scalars,
                throughput_tps,
            });
        }
    }
    Ok(BenchResult {
        rows,
        warmups: opts.warmups,
        repeats: opts.repeats,
        runs_executed: runs,
    })
}
