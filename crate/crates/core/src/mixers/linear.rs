//! Feature maps and the (ungated) linear-attention recurrence.

use super::EPS_DEN;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// `softmax(x · M_h)` over the feature axis for `x: [H, T, d]` and per-head
/// matrices `m: [H, d, d]`; plain `softmax(x)` when `m` is `None`.
pub fn feature_map<'t, T: Float>(x: &Var<'t, T>, m: Option<&Var<'t, T>>) -> Result<Var<'t, T>> {
    match m {
        Some(m) => x.matmul(m)?.softmax(),
        None => x.softmax(),
    }
}

/// Per-head linear-attention state: `s: [H, d_qk, d_v]`, `z: [H, d_qk]`.
#[derive(Clone)]
pub struct LinearState<'t, T: Float> {
    pub s: Var<'t, T>,
    pub z: Var<'t, T>,
}

impl<'t, T: Float> LinearState<'t, T> {
    pub fn zeros(tape: &'t Tape<T>, heads: usize, d_qk: usize, d_v: usize) -> Self {
        Self {
            s: tape.constant(Tensor::zeros(&[heads, d_qk, d_v])),
            z: tape.constant(Tensor::zeros(&[heads, d_qk])),
        }
    }

    pub fn stored_scalars(&self) -> usize {
        self.s.value().numel() + self.z.value().numel()
    }
}

/// Normalized read `φ(q) S / max(|φ(q)·z|, ε)` for `fq: [H, d_qk]`.
pub(crate) fn normalized_read<'t, T: Float>(
    fq: &Var<'t, T>,
    s: &Var<'t, T>,
    z: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (h, dk) = (fq.shape()[0], fq.shape()[1]);
    let dv = s.shape()[2];
    let num = fq.reshape(&[h, 1, dk])?.matmul(s)?.reshape(&[h, dv])?;
    let den = fq.mul(z)?.sum_axis(1, true)?.abs()?.clamp_min(EPS_DEN)?;
    num.div(&den.broadcast_to(&[h, dv])?)
}

/// One step on feature-mapped inputs `fq, fk: [H, d_qk]` and `v: [H, d_v]`:
/// `S' = S + φ(k)⊗v`, `z' = z + φ(k)`, `h = φ(q)S' / max(φ(q)·z', ε)`.
pub fn linear_attention_step<'t, T: Float>(
    state: &LinearState<'t, T>,
    fq: &Var<'t, T>,
    fk: &Var<'t, T>,
    v: &Var<'t, T>,
) -> Result<(Var<'t, T>, LinearState<'t, T>)> {
    if fq.shape() != state.z.shape() || fk.shape() != state.z.shape() {
        return Err(Error::shape("linear_attention_step", fq.shape(), state.z.shape()));
    }
    let s = state.s.add(&fk.outer(v)?)?;
    let z = state.z.add(fk)?;
    let h = normalized_read(fq, &s, &z)?;
    Ok((h, LinearState { s, z }))
}
