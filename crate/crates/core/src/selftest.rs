//! Built-in numerical checks: reduction identities between mixer kinds,
//! chunkwise/stepwise equivalence, and finite-difference gradient checks.
//! Everything runs in 64-bit on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{capture_alignment_targets, layer_align_loss, precompute_teacher_targets, stage2_loss};
use crate::mixers::{
    apply_rope, feature_map, linear_attention_step, mixer_forward, mixer_step, mlstm_parallel, mlstm_step,
    param_shapes, project_qkv, GateInputMode, HybridLayerParams, LayerCache, LinearState, MixerConfig, MixerKind,
    MlstmState, Overrides,
};
use crate::model::{init_student_from_teacher, Model, ModelConfig, ModelVars};
use crate::tensor::gradcheck::{self, weighted_sum};
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// One check: `value` is a max abs difference or max relative error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tol: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, value: f64, tol: f64) -> Self {
        CheckResult {
            name: name.into(),
            value,
            tol,
            passed: value.is_finite() && value < tol,
        }
    }
}

pub const IDENTITY_TOL: f64 = 1e-10;
pub const STUDENT_INIT_TOL: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const CHUNK_SIZES: [usize; 4] = [1, 3, 4, 8];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn layer_cfg(window: usize, n_sinks: usize, chunk: usize) -> MixerConfig {
    MixerConfig {
        d_model: 8,
        n_heads: 2,
        d_qk: 4,
        d_v: 3,
        window,
        n_sinks,
        chunk_size: chunk,
        rope_base: 10000.0,
        gate_input_mode: GateInputMode::ConcatQkv,
    }
}

fn rand_layer(kind: MixerKind, cfg: &MixerConfig, seed: u64, amp: f64) -> HybridLayerParams<Tensor<f64>> {
    let mut r = rng(seed);
    let shapes = param_shapes(kind, cfg);
    HybridLayerParams::from_fn(kind, |name| -> Result<_> {
        let shape = &shapes.iter().find(|(n, _)| *n == name).expect("known parameter").1;
        Ok(Tensor::uniform(shape, -amp, amp, &mut r))
    })
    .expect("shapes cover every parameter")
}

fn vars<'t>(tape: &'t Tape<f64>, p: &HybridLayerParams<Tensor<f64>>) -> HybridLayerParams<Var<'t, f64>> {
    p.try_map(|_, t| Ok::<_, Error>(tape.constant(t.clone()))).expect("infallible")
}

fn stepwise<'t>(
    kind: MixerKind,
    cfg: &MixerConfig,
    p: &HybridLayerParams<Var<'t, f64>>,
    x: &Var<'t, f64>,
    ov: &Overrides,
) -> Result<Tensor<f64>> {
    let mut cache = LayerCache::new(kind, cfg, x.tape())?;
    let mut rows = Vec::new();
    for t in 0..x.shape()[0] {
        rows.push(mixer_step(kind, cfg, p, &x.narrow(0, t, 1)?, &mut cache, ov)?.out);
    }
    Ok(Var::concat(&rows, 0)?.value().clone())
}

/// Position `t` of a `[H, T, ..]` series, reshaped.
fn at<'t>(a: &Var<'t, f64>, t: usize, shape: &[usize]) -> Result<Var<'t, f64>> {
    a.narrow(1, t, 1)?.reshape(shape)
}

/// Sliding-window attention with `W ≥ T` and no sinks against full softmax
/// attention, parallel and stepwise.
pub fn swa_full_identity(t_len: usize, seed: u64) -> Result<f64> {
    let cfg = layer_cfg(t_len.max(1), 0, 4);
    let p = rand_layer(MixerKind::SoftmaxFull, &cfg, seed, 0.8);
    let tape = Tape::new();
    let pv = vars(&tape, &p);
    let x = tape.constant(Tensor::uniform(&[t_len, cfg.d_model], -1.0, 1.0, &mut rng(seed + 1)));
    let ov = Overrides::default();
    let full = mixer_forward(MixerKind::SoftmaxFull, &cfg, &pv, &x, &ov)?.out.value().clone();
    let swa = mixer_forward(MixerKind::SwaOnly, &cfg, &pv, &x, &ov)?.out.value().clone();
    let full_s = stepwise(MixerKind::SoftmaxFull, &cfg, &pv, &x, &ov)?;
    let swa_s = stepwise(MixerKind::SwaOnly, &cfg, &pv, &x, &ov)?;
    Ok(full
        .max_abs_diff(&swa)
        .max(full_s.max_abs_diff(&swa_s))
        .max(full.max_abs_diff(&full_s)))
}

/// mLSTM with `i = f = 1` (and a pass-through output gate) against the
/// plain linear-attention recurrence on the same features.
pub fn unit_gate_identity(t_len: usize, seed: u64) -> Result<f64> {
    let cfg = layer_cfg(4, 0, 3);
    let p = rand_layer(MixerKind::MlstmOnly, &cfg, seed, 0.8);
    let tape = Tape::new();
    let pv = vars(&tape, &p);
    let x = tape.constant(Tensor::uniform(&[t_len, cfg.d_model], -1.0, 1.0, &mut rng(seed + 1)));
    let ov = Overrides {
        output_gate: Some(1.0),
        unit_gates: true,
    };
    let gated = mixer_forward(MixerKind::MlstmOnly, &cfg, &pv, &x, &ov)?.pre_out.value().clone();

    let (h, dk, dv) = (cfg.n_heads, cfg.d_qk, cfg.d_v);
    let (q, k, v) = project_qkv(&x, &pv, &cfg)?;
    let positions: Vec<usize> = (0..t_len).collect();
    let (qr, kr) = apply_rope(&q, &k, &positions, cfg.rope_base)?;
    let fq = feature_map(&qr, pv.phi_q.as_ref())?;
    let fk = feature_map(&kr, pv.phi_k.as_ref())?;
    let mut st = LinearState::zeros(&tape, h, dk, dv);
    let mut worst: f64 = 0.0;
    for t in 0..t_len {
        let (out, next) = linear_attention_step(&st, &at(&fq, t, &[h, dk])?, &at(&fk, t, &[h, dk])?, &at(&v, t, &[h, dv])?)?;
        for hd in 0..h {
            for j in 0..dv {
                worst = worst.max((out.value().at(&[hd, j]) - gated.at(&[t, hd * dv + j])).abs());
            }
        }
        st = next;
    }
    Ok(worst)
}

/// Student built from a teacher, full window, output gate pinned to 0,
/// against the teacher's logits.
pub fn student_init_identity(t_len: usize, seed: u64) -> Result<f64> {
    let tcfg = ModelConfig {
        vocab_size: 29,
        n_layers: 2,
        mlp_hidden: 24,
        max_seq_len: t_len.max(1),
        mixer_kind: MixerKind::SoftmaxFull,
        mixer: layer_cfg(t_len.max(1), 0, 4),
        norm_eps: 1e-6,
    };
    let teacher = Model::<f64>::init(tcfg.clone(), seed)?;
    let student = init_student_from_teacher(&teacher, &tcfg.with_kind(MixerKind::Hybrid))?;
    let mut r = rng(seed + 1);
    let toks: Vec<u32> = (0..t_len).map(|_| r.gen_range(0..29)).collect();
    let tape = Tape::new();
    let a = teacher.bind_frozen(&tape)?.forward(&toks)?.logits;
    let ov = Overrides {
        output_gate: Some(0.0),
        unit_gates: false,
    };
    let b = student.bind_frozen(&tape)?.forward_with(&toks, &ov)?.logits;
    Ok(a.value().max_abs_diff(b.value()))
}

/// Chunkwise-parallel mLSTM against the stepwise recurrence over every
/// chunk size in [`CHUNK_SIZES`] plus `T`; compares outputs and final state.
pub fn chunk_equivalence(t_len: usize, seed: u64) -> Result<f64> {
    let (h, dk, dv) = (2, 4, 3);
    let mut r = rng(seed);
    let tape = Tape::new();
    let feats = |r: &mut ChaCha8Rng| -> Result<Var<'_, f64>> {
        tape.constant(Tensor::uniform(&[h, t_len, dk], -2.0, 2.0, r)).softmax()
    };
    let fq = feats(&mut r)?;
    let fk = feats(&mut r)?;
    let v = tape.constant(Tensor::uniform(&[h, t_len, dv], -1.0, 1.0, &mut r));
    let i_tilde = tape.constant(Tensor::uniform(&[h, t_len], -3.0, 3.0, &mut r));
    let f_log = tape.constant(Tensor::uniform(&[h, t_len], -3.0, 5.0, &mut r)).log_sigmoid()?;

    let mut st = MlstmState::zeros(&tape, h, dk, dv);
    let mut outs = Vec::new();
    for t in 0..t_len {
        let (out, next) = mlstm_step(
            &st,
            &at(&fq, t, &[h, dk])?,
            &at(&fk, t, &[h, dk])?,
            &at(&v, t, &[h, dv])?,
            &at(&i_tilde, t, &[h])?,
            &at(&f_log, t, &[h])?,
        )?;
        outs.push(out.reshape(&[h, 1, dv])?);
        st = next;
    }
    let rec = Var::concat(&outs, 1)?.value().clone();
    let init = MlstmState::zeros(&tape, h, dk, dv);
    let mut worst: f64 = 0.0;
    for chunk in CHUNK_SIZES.iter().copied().chain([t_len]) {
        let (par, pst) = mlstm_parallel(&fq, &fk, &v, &i_tilde, &f_log, chunk.max(1), &init)?;
        worst = worst
            .max(rec.max_abs_diff(par.value()))
            .max(st.s.value().max_abs_diff(pst.s.value()))
            .max(st.z.value().max_abs_diff(pst.z.value()))
            .max(st.m.value().max_abs_diff(pst.m.value()));
    }
    Ok(worst)
}

const ALL_KINDS: [MixerKind; 5] = [
    MixerKind::SoftmaxFull,
    MixerKind::SwaOnly,
    MixerKind::LinearAttn,
    MixerKind::MlstmOnly,
    MixerKind::Hybrid,
];

/// Gradient check of one layer's parameters, parallel or stepwise.
pub fn layer_gradcheck(kind: MixerKind, step: bool, seed: u64) -> Result<f64> {
    let cfg = MixerConfig {
        d_model: 4,
        n_heads: 2,
        d_qk: 2,
        d_v: 2,
        window: 2,
        n_sinks: 1,
        chunk_size: 2,
        rope_base: 100.0,
        gate_input_mode: GateInputMode::ConcatQkv,
    };
    let p = rand_layer(kind, &cfg, seed, 0.6);
    let names: Vec<&str> = p.named().iter().map(|(n, _)| *n).collect();
    let inputs: Vec<Tensor<f64>> = p.named().iter().map(|(_, t)| (*t).clone()).collect();
    let x = Tensor::uniform(&[5, cfg.d_model], -1.0, 1.0, &mut rng(seed + 1));
    let rep = gradcheck::check(
        |tape, vs| {
            let pv = HybridLayerParams::from_fn(kind, |name| -> Result<_> {
                let i = names.iter().position(|n| *n == name).expect("named");
                Ok(vs[i].clone())
            })?;
            let xv = tape.constant(x.clone());
            let ov = Overrides::default();
            if step {
                let mut cache = LayerCache::new(kind, &cfg, tape)?;
                let mut total = tape.constant(Tensor::scalar(0.0));
                for t in 0..5 {
                    let s = mixer_step(kind, &cfg, &pv, &xv.narrow(0, t, 1)?, &mut cache, &ov)?;
                    total = total.add(&weighted_sum(&s.out, 40 + t as u64)?)?;
                }
                Ok(total)
            } else {
                weighted_sum(&mixer_forward(kind, &cfg, &pv, &xv, &ov)?.out, 41)
            }
        },
        &inputs,
        1e-5,
    )?;
    Ok(rep.max_rel_error)
}

fn loss_models(seed: u64) -> Result<(Model<f64>, Model<f64>)> {
    let cfg = ModelConfig {
        vocab_size: 11,
        n_layers: 2,
        mlp_hidden: 16,
        max_seq_len: 16,
        mixer_kind: MixerKind::SoftmaxFull,
        mixer: MixerConfig {
            d_model: 8,
            n_heads: 2,
            d_qk: 4,
            d_v: 3,
            window: 4,
            n_sinks: 1,
            chunk_size: 4,
            rope_base: 10000.0,
            gate_input_mode: GateInputMode::ConcatQkv,
        },
        norm_eps: 1e-6,
    };
    let teacher = Model::<f64>::init(cfg.clone(), seed)?;
    let mut student = init_student_from_teacher(&teacher, &cfg.with_kind(MixerKind::Hybrid))?;
    let mut r = rng(seed + 1);
    for i in 0..student.params.len() {
        for x in student.params.tensor_at_mut(i).data_mut() {
            *x += r.gen_range(-0.3..0.3);
        }
    }
    Ok((teacher, student))
}

fn model_tensors(m: &Model<f64>) -> Result<Vec<Tensor<f64>>> {
    m.config
        .param_specs()
        .iter()
        .map(|(n, _)| m.params.require(n).cloned())
        .collect()
}

/// Stage-I loss (all layers) through the whole student.
pub fn align_loss_gradcheck(seed: u64) -> Result<f64> {
    let (teacher, student) = loss_models(seed)?;
    let mut r = rng(seed + 2);
    let toks: Vec<u32> = (0..9).map(|_| r.gen_range(0..11)).collect();
    let tgt = capture_alignment_targets(&teacher, &toks)?;
    let cfg = student.config.clone();
    let rep = gradcheck::check(
        |_, xs| {
            let mv = ModelVars::from_vars(&cfg, xs)?;
            let ov = Overrides::default();
            layer_align_loss(&mv, 0, &tgt, &ov)?.add(&layer_align_loss(&mv, 1, &tgt, &ov)?)
        },
        &model_tensors(&student)?,
        1e-5,
    )?;
    Ok(rep.max_rel_error)
}

/// Stage-II loss (γ·CE + β·sparse KL) through the whole student.
pub fn distill_loss_gradcheck(seed: u64) -> Result<f64> {
    let (teacher, student) = loss_models(seed)?;
    let mut r = rng(seed + 3);
    let seqs: Vec<Vec<u32>> = vec![(0..9).map(|_| r.gen_range(0..11)).collect()];
    let targets = precompute_teacher_targets(&teacher, &seqs, 4)?;
    let cfg = student.config.clone();
    let rep = gradcheck::check(
        |_, xs| {
            let mv = ModelVars::from_vars(&cfg, xs)?;
            stage2_loss(&mv, &seqs[0], &targets, 0, 0.9, 0.1)
        },
        &model_tensors(&student)?,
        1e-5,
    )?;
    Ok(rep.max_rel_error)
}

pub fn identity_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut r = rng(seed);
    for i in 0..3 {
        let t = if i == 0 { 128 } else { r.gen_range(1..=128) };
        out.push(CheckResult::new(format!("swa_equals_full_T{t}"), swa_full_identity(t, seed + i)?, IDENTITY_TOL));
    }
    for t in [1, 7, 33] {
        out.push(CheckResult::new(format!("unit_gate_mlstm_equals_linear_T{t}"), unit_gate_identity(t, seed + t as u64)?, IDENTITY_TOL));
    }
    for t in [5, 24] {
        out.push(CheckResult::new(format!("student_init_equals_teacher_T{t}"), student_init_identity(t, seed + t as u64)?, STUDENT_INIT_TOL));
    }
    Ok(out)
}

pub fn equivalence_checks(seed: u64) -> Result<Vec<CheckResult>> {
    [1usize, 2, 5, 17, 33, 64]
        .iter()
        .map(|&t| Ok(CheckResult::new(format!("chunkwise_equals_stepwise_T{t}"), chunk_equivalence(t, seed + t as u64)?, IDENTITY_TOL)))
        .collect()
}

pub fn gradient_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for kind in ALL_KINDS {
        out.push(CheckResult::new(format!("grad_{}_parallel", kind.name()), layer_gradcheck(kind, false, seed)?, GRAD_TOL));
        out.push(CheckResult::new(format!("grad_{}_step", kind.name()), layer_gradcheck(kind, true, seed + 1)?, GRAD_TOL));
    }
    out.push(CheckResult::new("grad_align_loss", align_loss_gradcheck(seed)?, GRAD_TOL));
    out.push(CheckResult::new("grad_distill_loss", distill_loss_gradcheck(seed)?, GRAD_TOL));
    Ok(out)
}

/// Every check above.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = identity_checks(seed)?;
    out.extend(equivalence_checks(seed)?);
    out.extend(gradient_checks(seed)?);
    Ok(out)
}
