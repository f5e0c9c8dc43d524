//! Rotary position embedding on interleaved feature pairs `(2i, 2i+1)`.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor, Var};

/// Rotates `x: [heads, time, d]` where row `t` sits at absolute position
/// `positions[t]`; pair `i` turns by `pos · base^(−2i/d)`.
pub fn rope<'t, T: Float>(x: &Var<'t, T>, positions: &[usize], base: f64) -> Result<Var<'t, T>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != positions.len() {
        return Err(Error::shape("rope", shape, &[positions.len()]));
    }
    let d = shape[2];
    if d % 2 != 0 {
        return Err(Error::Config(format!("rotary embedding needs an even width, got {d}")));
    }
    let n = positions.len();
    let mut cos = Vec::with_capacity(n * d);
    let mut sin = Vec::with_capacity(n * d);
    for &p in positions {
        for i in 0..d / 2 {
            let theta = p as f64 * base.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = theta.sin_cos();
            cos.extend([T::from_f64(c), T::from_f64(c)]);
            sin.extend([T::from_f64(-s), T::from_f64(s)]);
        }
    }
    let tape = x.tape();
    let cos = tape.constant(Tensor::from_parts(vec![n, d], cos));
    let sin = tape.constant(Tensor::from_parts(vec![n, d], sin));
    // swap[j] picks the partner of feature j within its pair
    let swap = tape.constant(Tensor::from_fn(&[d, d], |ix| {
        let (r, c) = (ix / d, ix % d);
        if r == c ^ 1 {
            T::one()
        } else {
            T::zero()
        }
    }));
    x.mul(&cos)?.add(&x.matmul(&swap)?.mul(&sin)?)
}

/// Applies [`rope`] to queries and keys at the same positions.
pub fn apply_rope<'t, T: Float>(
    q: &Var<'t, T>,
    k: &Var<'t, T>,
    positions: &[usize],
    base: f64,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    Ok((rope(q, positions, base)?, rope(k, positions, base)?))
}
