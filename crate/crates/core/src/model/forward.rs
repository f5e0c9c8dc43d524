use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::mixers::{mixer_forward, mixer_step, HybridLayerParams, LayerCache, MixerKind, Overrides};
use crate::tensor::{Float, Tape, Var};

pub struct LayerVars<'t, T: Float> {
    pub norm1: Var<'t, T>,
    pub mixer: HybridLayerParams<Var<'t, T>>,
    pub norm2: Var<'t, T>,
    pub w_gate: Var<'t, T>,
    pub w_up: Var<'t, T>,
    pub w_down: Var<'t, T>,
}

/// A model's parameters bound to a tape.
pub struct ModelVars<'t, T: Float> {
    pub config: ModelConfig,
    pub embed: Var<'t, T>,
    pub layers: Vec<LayerVars<'t, T>>,
    pub norm_f: Var<'t, T>,
    pub unembed: Var<'t, T>,
    /// `(parameter index, leaf)` for every trainable parameter.
    pub leaves: Vec<(usize, Var<'t, T>)>,
}

/// Everything a parallel forward pass exposes.
pub struct Trace<'t, T: Float> {
    /// `[T, vocab]`
    pub logits: Var<'t, T>,
    /// Normalized input of each layer's mixer, `[T, d_model]`.
    pub mixer_inputs: Vec<Var<'t, T>>,
    /// Each layer's mixer output before `W_out`, `[T, H·d_v]`.
    pub pre_out: Vec<Var<'t, T>>,
    /// Output gates `[H, T]` of gated layers.
    pub gates: Vec<Option<Var<'t, T>>>,
}

impl<T: Float> Model<T> {
    /// Binds every parameter to `tape`; those with `trainable(name)` become
    /// gradient leaves, the rest constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: &dyn Fn(&str) -> bool) -> Result<ModelVars<'t, T>> {
        let mut leaves = Vec::new();
        let mut vars = Vec::with_capacity(self.params.len());
        for (i, (name, t)) in self.params.iter().enumerate() {
            let v = if trainable(name) {
                let v = tape.leaf(t.clone());
                leaves.push((i, v.clone()));
                v
            } else {
                tape.constant(t.clone())
            };
            vars.push(v);
        }
        let ordered = self
            .config
            .param_specs()
            .iter()
            .map(|(name, _)| {
                self.params
                    .position(name)
                    .map(|i| vars[i].clone())
                    .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut mv = ModelVars::from_vars(&self.config, &ordered)?;
        mv.leaves = leaves;
        Ok(mv)
    }

    /// Binds everything as constants.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Result<ModelVars<'t, T>> {
        self.bind(tape, &|_| false)
    }
}

/// `x / rms(x) · g` over the last axis of `x: [T, d]`.
pub fn rms_norm<'t, T: Float>(x: &Var<'t, T>, g: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
    let inv = x.square()?.mean_axis(1, true)?.affine(1.0, eps)?.rsqrt()?;
    x.mul(&inv.broadcast_to(x.shape())?)?.mul(g)
}

impl<'t, T: Float> LayerVars<'t, T> {
    /// SwiGLU feed-forward on `[T, d]`.
    pub fn mlp(&self, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(&self.w_gate)?
            .silu()?
            .mul(&x.matmul(&self.w_up)?)?
            .matmul(&self.w_down)
    }
}

impl<'t, T: Float> ModelVars<'t, T> {
    /// Assembles a model from one variable per entry of
    /// `config.param_specs()`, in that order. `leaves` is left empty.
    pub fn from_vars(config: &ModelConfig, vars: &[Var<'t, T>]) -> Result<Self> {
        let specs = config.param_specs();
        if vars.len() != specs.len() {
            return Err(Error::Contract(format!("expected {} parameters, got {}", specs.len(), vars.len())));
        }
        for ((name, shape), v) in specs.iter().zip(vars) {
            if v.shape() != shape.as_slice() {
                return Err(Error::Contract(format!("parameter {name} has shape {:?}, expected {shape:?}", v.shape())));
            }
        }
        let get = |name: &str| -> Result<Var<'t, T>> {
            specs
                .iter()
                .position(|(n, _)| n == name)
                .map(|i| vars[i].clone())
                .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
        };
        let cfg = config;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = |s: &str| get(&format!("layers.{l}.{s}"));
                Ok(LayerVars {
                    norm1: p("norm1")?,
                    mixer: HybridLayerParams::from_fn(cfg.mixer_kind, |n| p(&format!("mixer.{n}")))?,
                    norm2: p("norm2")?,
                    w_gate: p("mlp.w_gate")?,
                    w_up: p("mlp.w_up")?,
                    w_down: p("mlp.w_down")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelVars {
            config: cfg.clone(),
            embed: get("embed")?,
            layers,
            norm_f: get("norm_f")?,
            unembed: get("unembed")?,
            leaves: Vec::new(),
        })
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Result<Var<'t, T>> {
        self.check_tokens(tokens)?;
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        self.embed.gather_rows(&idx)
    }

    fn run(&self, tokens: &[u32], ov: &Overrides, caches: Option<&mut Vec<LayerCache<'t, T>>>) -> Result<Trace<'t, T>> {
        let cfg = &self.config;
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                cfg.max_seq_len
            )));
        }
        let mut h = self.embed(tokens)?;
        let n = cfg.n_layers;
        let mut trace_inputs = Vec::with_capacity(n);
        let mut pre_out = Vec::with_capacity(n);
        let mut gates = Vec::with_capacity(n);
        let mut built = Vec::new();
        for layer in &self.layers {
            let x = rms_norm(&h, &layer.norm1, cfg.norm_eps)?;
            let out = mixer_forward(cfg.mixer_kind, &cfg.mixer, &layer.mixer, &x, ov)?;
            h = h.add(&out.out)?;
            h = h.add(&layer.mlp(&rms_norm(&h, &layer.norm2, cfg.norm_eps)?)?)?;
            if caches.is_some() {
                built.push(LayerCache::from_prefill(cfg.mixer_kind, &cfg.mixer, &out)?);
            }
            trace_inputs.push(x);
            pre_out.push(out.pre_out);
            gates.push(out.gate);
        }
        if let Some(c) = caches {
            *c = built;
        }
        let logits = rms_norm(&h, &self.norm_f, cfg.norm_eps)?.matmul(&self.unembed)?;
        Ok(Trace {
            logits,
            mixer_inputs: trace_inputs,
            pre_out,
            gates,
        })
    }

    /// Parallel forward pass over one sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Trace<'t, T>> {
        self.run(tokens, &Overrides::default(), None)
    }

    pub fn forward_with(&self, tokens: &[u32], ov: &Overrides) -> Result<Trace<'t, T>> {
        self.run(tokens, ov, None)
    }

    /// Parallel forward that also returns decoding caches positioned after `tokens`.
    pub fn prefill(&self, tokens: &[u32], ov: &Overrides) -> Result<(Trace<'t, T>, Vec<LayerCache<'t, T>>)> {
        let mut caches = Vec::new();
        let trace = self.run(tokens, ov, Some(&mut caches))?;
        Ok((trace, caches))
    }

    /// Empty decoding caches.
    pub fn empty_caches(&self) -> Result<Vec<LayerCache<'t, T>>> {
        let tape = self.embed.tape();
        (0..self.config.n_layers)
            .map(|_| LayerCache::new(self.config.mixer_kind, &self.config.mixer, tape))
            .collect()
    }

    /// Advances all layers by one token; returns logits `[1, vocab]`.
    pub fn step(&self, token: u32, caches: &mut [LayerCache<'t, T>], ov: &Overrides) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        if caches.len() != self.layers.len() {
            return Err(Error::Contract("one cache per layer required".into()));
        }
        let pos = caches.first().map_or(0, LayerCache::position);
        if cfg.mixer_kind == MixerKind::SoftmaxFull && pos >= cfg.max_seq_len {
            return Err(Error::Contract(format!(
                "teacher context full: max_seq_len {} reached",
                cfg.max_seq_len
            )));
        }
        let mut h = self.embed(&[token])?;
        for (layer, cache) in self.layers.iter().zip(caches.iter_mut()) {
            let x = rms_norm(&h, &layer.norm1, cfg.norm_eps)?;
            let out = mixer_step(cfg.mixer_kind, &cfg.mixer, &layer.mixer, &x, cache, ov)?;
            h = h.add(&out.out)?;
            h = h.add(&layer.mlp(&rms_norm(&h, &layer.norm2, cfg.norm_eps)?)?)?;
        }
        rms_norm(&h, &self.norm_f, cfg.norm_eps)?.matmul(&self.unembed)
    }

    /// Sum of the scalars held in `caches`.
    pub fn cache_scalars(caches: &[LayerCache<'t, T>]) -> usize {
        caches.iter().map(LayerCache::stored_scalars).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    /// Softmax sampling at temperature `tau` from a seeded generator;
    /// `tau = 0` is greedy.
    Temperature { tau: f64, seed: u64 },
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Prefills `prompt` in parallel mode, then decodes `n_new` tokens one step
/// at a time. Returns prompt followed by the continuation.
pub fn generate<T: Float>(model: &Model<T>, prompt: &[u32], n_new: usize, sampling: Sampling) -> Result<Vec<u32>> {
    let tape = Tape::new();
    let mv = model.bind_frozen(&tape)?;
    mv.check_tokens(prompt)?;
    let mut out = prompt.to_vec();
    if n_new == 0 {
        return Ok(out);
    }
    let cfg = &model.config;
    if cfg.mixer_kind == MixerKind::SoftmaxFull && prompt.len() + n_new > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "prompt of {} plus {n_new} new tokens exceeds teacher max_seq_len {}",
            prompt.len(),
            cfg.max_seq_len
        )));
    }
    let ov = Overrides::default();
    let (trace, mut caches) = mv.prefill(prompt, &ov)?;
    let t = prompt.len();
    let mut logits = trace.logits.narrow(0, t - 1, 1)?;
    let mut rng = match sampling {
        Sampling::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Sampling::Greedy => None,
    };
    for i in 0..n_new {
        let row = logits.value().data();
        let next = match (sampling, rng.as_mut()) {
            (Sampling::Temperature { tau, .. }, Some(r)) if tau > 0.0 => sample(row, tau, r),
            _ => argmax_lowest(row),
        } as u32;
        out.push(next);
        if i + 1 < n_new {
            logits = mv.step(next, &mut caches, &ov)?;
        }
    }
    Ok(out)
}

fn sample<T: Float>(row: &[T], tau: f64, rng: &mut ChaCha8Rng) -> usize {
    let m = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|x| ((x.as_f64() - m) / tau).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return i;
        }
        u -= wi;
    }
    w.len() - 1
}
