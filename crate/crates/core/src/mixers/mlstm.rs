//! Gated matrix-memory recurrence with log-space stabilization, in stepwise
//! and chunkwise-parallel form.
//!
//! With `ĩ` the input-gate pre-activation and `f̃ = log σ(·)` the log forget
//! gate, one step is
//!
//! ```text
//! m' = max(f̃ + m, ĩ)
//! S' = e^(f̃+m−m') S + e^(ĩ−m') φ(k)⊗v
//! z' = e^(f̃+m−m') z + e^(ĩ−m') φ(k)
//! h  = φ(q)S' / max(|φ(q)·z'|, ε)
//! ```
//!
//! `S` and `z` are the true memories scaled by `e^(−m)`; the read is a ratio,
//! so the scaling cancels.

use super::linear::normalized_read;
use super::EPS_DEN;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Per-head state: `s: [H, d_qk, d_v]`, `z: [H, d_qk]`, `m: [H]`.
#[derive(Clone)]
pub struct MlstmState<'t, T: Float> {
    pub s: Var<'t, T>,
    pub z: Var<'t, T>,
    pub m: Var<'t, T>,
}

impl<'t, T: Float> MlstmState<'t, T> {
    pub fn zeros(tape: &'t Tape<T>, heads: usize, d_qk: usize, d_v: usize) -> Self {
        Self {
            s: tape.constant(Tensor::zeros(&[heads, d_qk, d_v])),
            z: tape.constant(Tensor::zeros(&[heads, d_qk])),
            m: tape.constant(Tensor::zeros(&[heads])),
        }
    }

    pub fn stored_scalars(&self) -> usize {
        self.s.value().numel() + self.z.value().numel() + self.m.value().numel()
    }

    fn dims(&self) -> (usize, usize, usize) {
        let s = self.s.shape();
        (s[0], s[1], s[2])
    }
}

/// One step on feature-mapped `fq, fk: [H, d_qk]`, `v: [H, d_v]` with gate
/// pre-activations `i_tilde, f_log: [H]` (`f_log` already in log space).
/// Returns the read before the output gate and the advanced state.
pub fn mlstm_step<'t, T: Float>(
    state: &MlstmState<'t, T>,
    fq: &Var<'t, T>,
    fk: &Var<'t, T>,
    v: &Var<'t, T>,
    i_tilde: &Var<'t, T>,
    f_log: &Var<'t, T>,
) -> Result<(Var<'t, T>, MlstmState<'t, T>)> {
    let (h, dk, dv) = state.dims();
    if fq.shape() != [h, dk] || fk.shape() != [h, dk] || v.shape() != [h, dv] {
        return Err(Error::shape("mlstm_step", fq.shape(), state.s.shape()));
    }
    if i_tilde.shape() != [h] || f_log.shape() != [h] {
        return Err(Error::shape("mlstm_step gates", i_tilde.shape(), f_log.shape()));
    }
    let decayed = f_log.add(&state.m)?;
    let m = decayed.maximum(i_tilde)?;
    let a = decayed.sub(&m)?.exp()?.reshape(&[h, 1])?;
    let b = i_tilde.sub(&m)?.exp()?.reshape(&[h, 1])?;
    let a3 = a.reshape(&[h, 1, 1])?.broadcast_to(&[h, dk, dv])?;
    let b3 = b.reshape(&[h, 1, 1])?.broadcast_to(&[h, dk, dv])?;
    let s = state.s.mul(&a3)?.add(&fk.outer(v)?.mul(&b3)?)?;
    let z = state
        .z
        .mul(&a.broadcast_to(&[h, dk])?)?
        .add(&fk.mul(&b.broadcast_to(&[h, dk])?)?)?;
    let out = normalized_read(fq, &s, &z)?;
    Ok((out, MlstmState { s, z, m }))
}

/// Whole-sequence form: `fq, fk: [H, T, d_qk]`, `v: [H, T, d_v]`,
/// `i_tilde, f_log: [H, T]`. Equivalent to running [`mlstm_step`] from `init`
/// for every position; returns reads `[H, T, d_v]` and the final state.
///
/// Within a chunk of length `L` the contribution of position `s` to the read
/// at `t ≥ s` has log weight `F_t − F_s + ĩ_s` (with `F` the running sum of
/// `f̃` inside the chunk) and the carried-in state has log weight `F_t + m₀`;
/// the row maximum of these is exactly the recurrent stabilizer.
pub fn mlstm_parallel<'t, T: Float>(
    fq: &Var<'t, T>,
    fk: &Var<'t, T>,
    v: &Var<'t, T>,
    i_tilde: &Var<'t, T>,
    f_log: &Var<'t, T>,
    chunk_size: usize,
    init: &MlstmState<'t, T>,
) -> Result<(Var<'t, T>, MlstmState<'t, T>)> {
    let (h, dk, dv) = init.dims();
    let t_len = fq.shape().get(1).copied().unwrap_or(0);
    if fq.shape() != [h, t_len, dk] || fk.shape() != fq.shape() || v.shape() != [h, t_len, dv] {
        return Err(Error::shape("mlstm_parallel", fq.shape(), v.shape()));
    }
    if i_tilde.shape() != [h, t_len] || f_log.shape() != [h, t_len] {
        return Err(Error::shape("mlstm_parallel gates", i_tilde.shape(), &[h, t_len]));
    }
    if chunk_size == 0 {
        return Err(Error::Config("chunk_size must be at least 1".into()));
    }
    let mut state = init.clone();
    let mut outs = Vec::with_capacity(t_len.div_ceil(chunk_size));
    let mut c = 0;
    while c < t_len {
        let l = chunk_size.min(t_len - c);
        let (out, next) = chunk(
            &fq.narrow(1, c, l)?,
            &fk.narrow(1, c, l)?,
            &v.narrow(1, c, l)?,
            &i_tilde.narrow(1, c, l)?,
            &f_log.narrow(1, c, l)?,
            &state,
        )?;
        outs.push(out);
        state = next;
        c += l;
    }
    let out = if outs.len() == 1 {
        outs.pop().expect("one chunk")
    } else {
        Var::concat(&outs, 1)?
    };
    Ok((out, state))
}

fn chunk<'t, T: Float>(
    fq: &Var<'t, T>,
    fk: &Var<'t, T>,
    v: &Var<'t, T>,
    it: &Var<'t, T>,
    fl: &Var<'t, T>,
    st: &MlstmState<'t, T>,
) -> Result<(Var<'t, T>, MlstmState<'t, T>)> {
    let (h, dk, dv) = st.dims();
    let l = fq.shape()[1];
    let f_cum = fl.cumsum_last()?;
    // log weight of the carried-in state at each row: [H, L, 1]
    let carry = f_cum
        .add(&st.m.reshape(&[h, 1])?.broadcast_to(&[h, l])?)?
        .reshape(&[h, l, 1])?;
    // d[t, s] = F_t − F_s + ĩ_s
    let d = f_cum
        .reshape(&[h, l, 1])?
        .broadcast_to(&[h, l, l])?
        .add(&it.sub(&f_cum)?.reshape(&[h, 1, l])?.broadcast_to(&[h, l, l])?)?;
    let causal: Vec<bool> = (0..l * l).map(|i| i % l <= i / l).collect();
    let ext_mask: Vec<bool> = (0..l * (l + 1))
        .map(|i| {
            let (t, s) = (i / (l + 1), i % (l + 1));
            s == l || s <= t
        })
        .collect();
    let m = Var::concat(&[d.clone(), carry.clone()], 2)?.max_last(Some(&ext_mask))?;
    let w = d.sub(&m.broadcast_to(&[h, l, l])?)?.exp_masked(&causal)?;
    let carry_w = carry.sub(&m)?.exp()?;
    let c = fq.matmul_t(fk, false, true)?.mul(&w)?;
    let num = c
        .matmul(v)?
        .add(&carry_w.broadcast_to(&[h, l, dv])?.mul(&fq.matmul(&st.s)?)?)?;
    let n = c
        .sum_axis(2, true)?
        .add(&carry_w.mul(&fq.matmul(&st.z.reshape(&[h, dk, 1])?)?)?)?;
    let den = n.abs()?.clamp_min(EPS_DEN)?;
    let out = num.div(&den.broadcast_to(&[h, l, dv])?)?;

    let last_w = w.narrow(1, l - 1, 1)?; // [H, 1, L]
    let last_carry = carry_w.narrow(1, l - 1, 1)?; // [H, 1, 1]
    let weighted_k = fk.mul(&last_w.transpose()?.broadcast_to(&[h, l, dk])?)?;
    let s = st
        .s
        .mul(&last_carry.broadcast_to(&[h, dk, dv])?)?
        .add(&weighted_k.matmul_t(v, true, false)?)?;
    let z = st
        .z
        .mul(&last_carry.reshape(&[h, 1])?.broadcast_to(&[h, dk])?)?
        .add(&last_w.matmul(fk)?.reshape(&[h, dk])?)?;
    let m_last = m.narrow(1, l - 1, 1)?.reshape(&[h])?;
    Ok((out, MlstmState { s, z, m: m_last }))
}
