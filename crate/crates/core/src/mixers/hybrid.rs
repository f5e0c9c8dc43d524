//! Layer-level mixing: projections, gates, and the parallel and stepwise
//! forward passes for every [`MixerKind`].

use super::attention::{attention_parallel, softmax_attention, swa_attention, KvCache, SwaCache};
use super::linear::feature_map;
use super::mlstm::{mlstm_parallel, mlstm_step, MlstmState};
use super::rope::apply_rope;
use super::{GateInputMode, MixerConfig, MixerKind};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Gate vectors (one row per head) and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<P> {
    /// Input gate `[H, G]`.
    pub w_i: P,
    /// Input gate bias `[H]`.
    pub b_i: P,
    pub w_f: P,
    pub b_f: P,
    /// Output gate `[H, G]`; no bias.
    pub w_og: P,
}

/// One mixer layer's parameters. `P` is `Tensor<T>` at rest and `Var<'t, T>`
/// inside a computation.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridLayerParams<P> {
    /// `[d_model, H·d_qk]`
    pub w_q: P,
    pub w_k: P,
    /// `[d_model, H·d_v]`
    pub w_v: P,
    /// `[H·d_v, d_model]`
    pub w_out: P,
    /// Per-head feature maps `[H, d_qk, d_qk]`.
    pub phi_q: Option<P>,
    pub phi_k: Option<P>,
    pub gates: Option<GateParams<P>>,
}

impl<P> HybridLayerParams<P> {
    /// Parameters in canonical order with their local names.
    pub fn named(&self) -> Vec<(&'static str, &P)> {
        let mut out = vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_out", &self.w_out),
        ];
        if let Some(p) = &self.phi_q {
            out.push(("phi_q", p));
        }
        if let Some(p) = &self.phi_k {
            out.push(("phi_k", p));
        }
        if let Some(g) = &self.gates {
            out.extend([
                ("w_i", &g.w_i),
                ("b_i", &g.b_i),
                ("w_f", &g.w_f),
                ("b_f", &g.b_f),
                ("w_og", &g.w_og),
            ]);
        }
        out
    }

    pub fn try_map<Q, E>(
        &self,
        mut f: impl FnMut(&'static str, &P) -> std::result::Result<Q, E>,
    ) -> std::result::Result<HybridLayerParams<Q>, E> {
        let phi_q = self.phi_q.as_ref().map(|p| f("phi_q", p)).transpose()?;
        let phi_k = self.phi_k.as_ref().map(|p| f("phi_k", p)).transpose()?;
        let gates = match &self.gates {
            Some(g) => Some(GateParams {
                w_i: f("w_i", &g.w_i)?,
                b_i: f("b_i", &g.b_i)?,
                w_f: f("w_f", &g.w_f)?,
                b_f: f("b_f", &g.b_f)?,
                w_og: f("w_og", &g.w_og)?,
            }),
            None => None,
        };
        Ok(HybridLayerParams {
            w_q: f("w_q", &self.w_q)?,
            w_k: f("w_k", &self.w_k)?,
            w_v: f("w_v", &self.w_v)?,
            w_out: f("w_out", &self.w_out)?,
            phi_q,
            phi_k,
            gates,
        })
    }

    /// Builds the parameter set of `kind`, fetching each field by name.
    pub fn from_fn<E>(
        kind: MixerKind,
        mut get: impl FnMut(&'static str) -> std::result::Result<P, E>,
    ) -> std::result::Result<Self, E> {
        let (phi_q, phi_k) = if kind.has_feature_maps() {
            (Some(get("phi_q")?), Some(get("phi_k")?))
        } else {
            (None, None)
        };
        let gates = if kind.has_gates() {
            Some(GateParams {
                w_i: get("w_i")?,
                b_i: get("b_i")?,
                w_f: get("w_f")?,
                b_f: get("b_f")?,
                w_og: get("w_og")?,
            })
        } else {
            None
        };
        Ok(Self {
            w_q: get("w_q")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            w_out: get("w_out")?,
            phi_q,
            phi_k,
            gates,
        })
    }
}

/// Expected `(name, shape)` of every parameter of `kind`, canonical order.
pub fn param_shapes(kind: MixerKind, cfg: &MixerConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (d, h, dk, dv, g) = (cfg.d_model, cfg.n_heads, cfg.d_qk, cfg.d_v, cfg.gate_dim());
    let p = HybridLayerParams::from_fn(kind, |name| -> std::result::Result<_, ()> {
        Ok(match name {
            "w_q" | "w_k" => vec![d, h * dk],
            "w_v" => vec![d, h * dv],
            "w_out" => vec![h * dv, d],
            "phi_q" | "phi_k" => vec![h, dk, dk],
            "b_i" | "b_f" => vec![h],
            _ => vec![h, g],
        })
    })
    .expect("infallible");
    p.named().into_iter().map(|(n, s)| (n, s.clone())).collect()
}

/// Forget-gate bias giving `σ(b_f) = 0.99`.
pub fn default_forget_bias() -> f64 {
    (0.99f64 / 0.01).ln()
}

/// Fresh values for parameters a softmax-attention layer does not have:
/// identity feature maps, zero gate weights, input gate `≈ 1`, forget gate
/// `≈ 0.99`, output gate `0.5`.
pub fn init_new_param<T: Float>(name: &str, shape: &[usize]) -> Tensor<T> {
    match name {
        "phi_q" | "phi_k" => {
            let d = shape[1];
            Tensor::from_fn(shape, |i| {
                let r = i % (d * d);
                if r / d == r % d {
                    T::one()
                } else {
                    T::zero()
                }
            })
        }
        "b_f" => Tensor::full(shape, T::from_f64(default_forget_bias())),
        _ => Tensor::zeros(shape),
    }
}

/// Test and analysis overrides for the gates.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    /// Replace the output gate by this constant.
    pub output_gate: Option<f64>,
    /// Force `i = f = 1` (`ĩ = f̃ = 0`).
    pub unit_gates: bool,
}

/// Per-head projections `x·W` split into heads: `[H, T, d_qk]` (q, k) and `[H, T, d_v]`.
pub fn project_qkv<'t, T: Float>(
    x: &Var<'t, T>,
    p: &HybridLayerParams<Var<'t, T>>,
    cfg: &MixerConfig,
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    if x.shape().len() != 2 || x.shape()[1] != cfg.d_model {
        return Err(Error::shape("project_qkv", x.shape(), &[cfg.d_model]));
    }
    let t = x.shape()[0];
    let split = |w: &Var<'t, T>, d: usize| -> Result<Var<'t, T>> {
        x.matmul(w)?.reshape(&[t, cfg.n_heads, d])?.permute(&[1, 0, 2])
    };
    Ok((split(&p.w_q, cfg.d_qk)?, split(&p.w_k, cfg.d_qk)?, split(&p.w_v, cfg.d_v)?))
}

/// What the gates read, assembled per [`GateInputMode`].
pub enum GateInput<'t, T: Float> {
    /// `[H, T, 2·d_qk + d_v]`
    Heads(Var<'t, T>),
    /// `[T, d_model]`
    Shared(Var<'t, T>),
}

impl<'t, T: Float> GateInput<'t, T> {
    pub fn assemble(
        mode: GateInputMode,
        x: &Var<'t, T>,
        q: &Var<'t, T>,
        k: &Var<'t, T>,
        v: &Var<'t, T>,
    ) -> Result<Self> {
        Ok(match mode {
            GateInputMode::ConcatQkv => {
                GateInput::Heads(Var::concat(&[q.clone(), k.clone(), v.clone()], 2)?)
            }
            GateInputMode::LayerInput => GateInput::Shared(x.clone()),
        })
    }

    /// `gate_input · w` per head and step: `[H, T]` for `w: [H, G]`.
    pub fn project(&self, w: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (h, g) = (w.shape()[0], w.shape()[1]);
        match self {
            GateInput::Heads(gi) => {
                let t = gi.shape()[1];
                gi.matmul(&w.reshape(&[h, g, 1])?)?.reshape(&[h, t])
            }
            GateInput::Shared(x) => x.matmul_t(w, false, true)?.transpose(),
        }
    }
}

/// `σ(gate_input · w_og)`: one value in (0, 1) per head and step, `[H, T]`.
pub fn output_gate<'t, T: Float>(gi: &GateInput<'t, T>, w_og: &Var<'t, T>) -> Result<Var<'t, T>> {
    gi.project(w_og)?.sigmoid()
}

/// Gate values `(ĩ, f̃, o)`, each `[H, T]`; `o` is `None` for ungated kinds.
fn gates<'t, T: Float>(
    kind: MixerKind,
    p: &HybridLayerParams<Var<'t, T>>,
    gi: &GateInput<'t, T>,
    ov: &Overrides,
    h: usize,
    t: usize,
) -> Result<(Var<'t, T>, Var<'t, T>, Option<Var<'t, T>>)> {
    let tape = p.w_q.tape();
    let zeros = || tape.constant(Tensor::zeros(&[h, t]));
    let Some(g) = p.gates.as_ref().filter(|_| kind.has_gates()) else {
        return Ok((zeros(), zeros(), None));
    };
    let bias = |b: &Var<'t, T>| b.reshape(&[h, 1])?.broadcast_to(&[h, t]);
    let (i_tilde, f_log) = if ov.unit_gates {
        (zeros(), zeros())
    } else {
        (
            gi.project(&g.w_i)?.add(&bias(&g.b_i)?)?,
            gi.project(&g.w_f)?.add(&bias(&g.b_f)?)?.log_sigmoid()?,
        )
    };
    let o = match ov.output_gate {
        Some(c) => tape.constant(Tensor::full(&[h, t], T::from_f64(c))),
        None => output_gate(gi, &g.w_og)?,
    };
    Ok((i_tilde, f_log, Some(o)))
}

/// `o ⊙ a + (1 − o) ⊙ b` with `o: [H, T]` and branches `[H, T, d_v]`.
fn fuse<'t, T: Float>(o: &Var<'t, T>, a: &Var<'t, T>, b: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
    let shape = a.shape().to_vec();
    let o3 = o.reshape(&[shape[0], shape[1], 1])?.broadcast_to(&shape)?;
    let gated = o3.mul(a)?;
    match b {
        Some(b) => gated.add(&o3.affine(-1.0, 1.0)?.mul(b)?),
        None => Ok(gated),
    }
}

fn check_params<T: Float>(
    kind: MixerKind,
    cfg: &MixerConfig,
    p: &HybridLayerParams<Var<'_, T>>,
) -> Result<()> {
    let expected = param_shapes(kind, cfg);
    let got = p.named();
    if got.len() != expected.len() {
        return Err(Error::Contract(format!(
            "{} layer needs {} parameter tensors, got {}",
            kind.name(),
            expected.len(),
            got.len()
        )));
    }
    for ((name, shape), (_, var)) in expected.iter().zip(got) {
        if var.shape() != shape.as_slice() {
            return Err(Error::shape(name, var.shape(), shape));
        }
    }
    Ok(())
}

/// Result of a parallel layer pass over `T` positions.
pub struct LayerOutput<'t, T: Float> {
    /// Fused per-head outputs before `W_out`, `[T, H·d_v]`.
    pub pre_out: Var<'t, T>,
    /// `[T, d_model]`
    pub out: Var<'t, T>,
    /// Output gate activations `[H, T]` for gated kinds.
    pub gate: Option<Var<'t, T>>,
    /// Rotated keys `[H, T, d_qk]` and values `[H, T, d_v]`.
    pub keys: Var<'t, T>,
    pub values: Var<'t, T>,
    pub state: Option<MlstmState<'t, T>>,
}

/// Parallel pass of one mixer layer over a sequence starting at position 0.
pub fn mixer_forward<'t, T: Float>(
    kind: MixerKind,
    cfg: &MixerConfig,
    p: &HybridLayerParams<Var<'t, T>>,
    x: &Var<'t, T>,
    ov: &Overrides,
) -> Result<LayerOutput<'t, T>> {
    check_params(kind, cfg, p)?;
    let tape = x.tape();
    let (q, k, v) = project_qkv(x, p, cfg)?;
    let (h, t) = (cfg.n_heads, q.shape()[1]);
    let positions: Vec<usize> = (0..t).collect();
    let (qr, kr) = apply_rope(&q, &k, &positions, cfg.rope_base)?;

    let local = match kind {
        MixerKind::SoftmaxFull => Some(attention_parallel(&qr, &kr, &v, None, 0)?),
        MixerKind::SwaOnly | MixerKind::Hybrid => {
            Some(attention_parallel(&qr, &kr, &v, Some(cfg.window), cfg.n_sinks)?)
        }
        _ => None,
    };
    let (mixed, gate, state) = if kind.has_recurrent_state() {
        let gi = GateInput::assemble(cfg.gate_input_mode, x, &q, &k, &v)?;
        let (i_tilde, f_log, o) = gates(kind, p, &gi, ov, h, t)?;
        let fq = feature_map(&qr, p.phi_q.as_ref())?;
        let fk = feature_map(&kr, p.phi_k.as_ref())?;
        let init = MlstmState::zeros(tape, h, cfg.d_qk, cfg.d_v);
        let (read, st) = mlstm_parallel(&fq, &fk, &v, &i_tilde, &f_log, cfg.chunk_size, &init)?;
        let mixed = match &o {
            Some(o) => fuse(o, &read, local.as_ref())?,
            None => read,
        };
        (mixed, o, Some(st))
    } else {
        (local.expect("attention kinds"), None, None)
    };
    let pre_out = mixed.permute(&[1, 0, 2])?.reshape(&[t, h * cfg.d_v])?;
    let out = pre_out.matmul(&p.w_out)?;
    Ok(LayerOutput {
        pre_out,
        out,
        gate,
        keys: kr,
        values: v,
        state,
    })
}

/// [`mixer_forward`] for the hybrid kind.
pub fn hybrid_forward<'t, T: Float>(
    cfg: &MixerConfig,
    p: &HybridLayerParams<Var<'t, T>>,
    x: &Var<'t, T>,
    ov: &Overrides,
) -> Result<LayerOutput<'t, T>> {
    mixer_forward(MixerKind::Hybrid, cfg, p, x, ov)
}

/// Decoding state of one layer. Which parts exist depends on the kind.
#[derive(Clone)]
pub struct LayerCache<'t, T: Float> {
    pub kv: Option<KvCache<'t, T>>,
    pub swa: Option<SwaCache<'t, T>>,
    pub mlstm: Option<MlstmState<'t, T>>,
    t: usize,
}

impl<'t, T: Float> LayerCache<'t, T> {
    pub fn new(kind: MixerKind, cfg: &MixerConfig, tape: &'t Tape<T>) -> Result<Self> {
        Ok(Self {
            kv: (kind == MixerKind::SoftmaxFull).then(KvCache::new),
            swa: if kind.has_window() {
                Some(SwaCache::new(cfg.window, cfg.n_sinks)?)
            } else {
                None
            },
            mlstm: kind
                .has_recurrent_state()
                .then(|| MlstmState::zeros(tape, cfg.n_heads, cfg.d_qk, cfg.d_v)),
            t: 0,
        })
    }

    /// Cache after a parallel prefill, cut from the gradient graph.
    pub fn from_prefill(kind: MixerKind, cfg: &MixerConfig, out: &LayerOutput<'t, T>) -> Result<Self> {
        let (k, v) = (out.keys.detach(), out.values.detach());
        let t = k.shape()[1];
        Ok(Self {
            kv: if kind == MixerKind::SoftmaxFull {
                Some(KvCache::from_prefix(k.clone(), v.clone())?)
            } else {
                None
            },
            swa: if kind.has_window() {
                Some(SwaCache::from_prefix(cfg.window, cfg.n_sinks, &k, &v)?)
            } else {
                None
            },
            mlstm: out.state.as_ref().map(|s| MlstmState {
                s: s.s.detach(),
                z: s.z.detach(),
                m: s.m.detach(),
            }),
            t,
        })
    }

    /// Positions processed so far.
    pub fn position(&self) -> usize {
        self.t
    }

    pub fn stored_scalars(&self) -> usize {
        self.kv.as_ref().map_or(0, KvCache::stored_scalars)
            + self.swa.as_ref().map_or(0, SwaCache::stored_scalars)
            + self.mlstm.as_ref().map_or(0, MlstmState::stored_scalars)
    }
}

/// Result of one decoding step.
pub struct StepOutput<'t, T: Float> {
    /// `[1, H·d_v]`
    pub pre_out: Var<'t, T>,
    /// `[1, d_model]`
    pub out: Var<'t, T>,
    /// `[H]` output gate values for gated kinds.
    pub gate: Option<Var<'t, T>>,
}

/// Advances one layer by one token `x: [1, d_model]`, updating every cache
/// part exactly once.
pub fn mixer_step<'t, T: Float>(
    kind: MixerKind,
    cfg: &MixerConfig,
    p: &HybridLayerParams<Var<'t, T>>,
    x: &Var<'t, T>,
    cache: &mut LayerCache<'t, T>,
    ov: &Overrides,
) -> Result<StepOutput<'t, T>> {
    check_params(kind, cfg, p)?;
    if x.shape() != [1, cfg.d_model] {
        return Err(Error::shape("mixer_step", x.shape(), &[1, cfg.d_model]));
    }
    let pos = cache.t;
    let desync = cache.kv.as_ref().is_some_and(|c| c.len() != pos)
        || cache.swa.as_ref().is_some_and(|c| c.position() != pos)
        || (kind == MixerKind::SoftmaxFull) != cache.kv.is_some()
        || kind.has_window() != cache.swa.is_some()
        || kind.has_recurrent_state() != cache.mlstm.is_some();
    if desync {
        return Err(Error::Contract(format!(
            "{} layer cache out of sync at position {pos}",
            kind.name()
        )));
    }
    let (h, dk, dv) = (cfg.n_heads, cfg.d_qk, cfg.d_v);
    let (q, k, v) = project_qkv(x, p, cfg)?;
    let (qr, kr) = apply_rope(&q, &k, &[pos], cfg.rope_base)?;

    let local = if let Some(kv) = cache.kv.as_mut() {
        kv.append(kr.clone(), v.clone())?;
        Some(softmax_attention(&qr, kv)?)
    } else if let Some(swa) = cache.swa.as_mut() {
        swa.append(kr.clone(), v.clone())?;
        Some(swa_attention(&qr, swa)?)
    } else {
        None
    };
    let (mixed, gate) = if let Some(state) = cache.mlstm.as_ref() {
        let gi = GateInput::assemble(cfg.gate_input_mode, x, &q, &k, &v)?;
        let (i_tilde, f_log, o) = gates(kind, p, &gi, ov, h, 1)?;
        let fq = feature_map(&qr, p.phi_q.as_ref())?.reshape(&[h, dk])?;
        let fk = feature_map(&kr, p.phi_k.as_ref())?.reshape(&[h, dk])?;
        let (read, next) = mlstm_step(
            state,
            &fq,
            &fk,
            &v.reshape(&[h, dv])?,
            &i_tilde.reshape(&[h])?,
            &f_log.reshape(&[h])?,
        )?;
        cache.mlstm = Some(next);
        let read = read.reshape(&[h, 1, dv])?;
        let mixed = match &o {
            Some(o) => fuse(o, &read, local.as_ref())?,
            None => read,
        };
        (mixed, o.map(|o| o.reshape(&[h])).transpose()?)
    } else {
        (local.expect("attention kinds"), None)
    };
    cache.t += 1;
    let pre_out = mixed.reshape(&[1, h * dv])?;
    let out = pre_out.matmul(&p.w_out)?;
    Ok(StepOutput { pre_out, out, gate })
}

/// [`mixer_step`] for the hybrid kind.
pub fn hybrid_step<'t, T: Float>(
    cfg: &MixerConfig,
    p: &HybridLayerParams<Var<'t, T>>,
    x: &Var<'t, T>,
    cache: &mut LayerCache<'t, T>,
    ov: &Overrides,
) -> Result<StepOutput<'t, T>> {
    mixer_step(MixerKind::Hybrid, cfg, p, x, cache, ov)
}

/// Folds a per-head gate vector over `concat(q, k, v)` into the projections:
/// returns `M: [d_model, H]` with `x·M[:, h] = concat(q_h, k_h, v_h)·w[h]`.
pub fn merge_gate_vector<T: Float>(
    cfg: &MixerConfig,
    p: &HybridLayerParams<Tensor<T>>,
    w: &Tensor<T>,
) -> Result<Tensor<T>> {
    if cfg.gate_input_mode != GateInputMode::ConcatQkv {
        return Err(Error::Config(
            "gate projections can only be merged in concat_qkv mode".into(),
        ));
    }
    let (d, h, dk, dv) = (cfg.d_model, cfg.n_heads, cfg.d_qk, cfg.d_v);
    if w.shape() != [h, 2 * dk + dv] {
        return Err(Error::shape("merge_gate_projection", w.shape(), &[h, 2 * dk + dv]));
    }
    let mut m = Tensor::zeros(&[d, h]);
    let blocks = [(&p.w_q, dk, 0), (&p.w_k, dk, dk), (&p.w_v, dv, 2 * dk)];
    for head in 0..h {
        let wrow = w.row(head);
        for &(proj, width, off) in &blocks {
            let cols = proj.shape()[1];
            for r in 0..d {
                let prow = &proj.data()[r * cols + head * width..r * cols + (head + 1) * width];
                let dot: T = prow.iter().zip(&wrow[off..off + width]).map(|(&a, &b)| a * b).sum();
                let cell = &mut m.data_mut()[r * h + head];
                *cell = *cell + dot;
            }
        }
    }
    Ok(m)
}

/// The merged output-gate projection `M = [W_q; W_k; W_v]·w_og` (block per head).
pub fn merge_gate_projection<T: Float>(
    cfg: &MixerConfig,
    p: &HybridLayerParams<Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = p
        .gates
        .as_ref()
        .ok_or_else(|| Error::Config("layer has no output gate".into()))?;
    merge_gate_vector(cfg, p, &g.w_og)
}

/// Rewrites all three gates to read `x_t` directly with merged weights,
/// returning the equivalent `layer_input` configuration and parameters.
pub fn merge_all_gates<T: Float>(
    cfg: &MixerConfig,
    p: &HybridLayerParams<Tensor<T>>,
) -> Result<(MixerConfig, HybridLayerParams<Tensor<T>>)> {
    let g = p
        .gates
        .as_ref()
        .ok_or_else(|| Error::Config("layer has no gates".into()))?;
    let to_rows = |w: &Tensor<T>| -> Result<Tensor<T>> {
        let m = merge_gate_vector(cfg, p, w)?;
        let (d, h) = (cfg.d_model, cfg.n_heads);
        Ok(Tensor::from_fn(&[h, d], |i| m.data()[(i % d) * h + i / d]))
    };
    let gates = GateParams {
        w_i: to_rows(&g.w_i)?,
        b_i: g.b_i.clone(),
        w_f: to_rows(&g.w_f)?,
        b_f: g.b_f.clone(),
        w_og: to_rows(&g.w_og)?,
    };
    let mut merged_cfg = cfg.clone();
    merged_cfg.gate_input_mode = GateInputMode::LayerInput;
    Ok((
        merged_cfg,
        HybridLayerParams {
            gates: Some(gates),
            ..p.clone()
        },
    ))
}
