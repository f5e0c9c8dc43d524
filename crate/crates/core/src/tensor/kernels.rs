// Raw slice kernels shared by forward and backward passes.

use super::{counter, Float};
use crate::error::{Error, Result};

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Result shape for a binary elementwise op: equal shapes, scalar broadcast,
/// or one shape a suffix of the other (broadcast along leading axes).
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b || nb == 1 && na >= 1 && (b.len() <= a.len()) {
        return Ok(a.to_vec());
    }
    if na == 1 && a.len() <= b.len() {
        return Ok(b.to_vec());
    }
    if a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::shape(op, a, b))
}

pub(crate) fn zip_broadcast<T: Float>(a: &[T], b: &[T], n: usize, f: impl Fn(T, T) -> T) -> Vec<T> {
    counter::add(n);
    let (la, lb) = (a.len(), b.len());
    if la == n && lb == n {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        (0..n).map(|i| f(a[i % la], b[i % lb])).collect()
    }
}

/// Sums `g` (length `n`) down to a broadcast operand of length `len`.
pub(crate) fn reduce_broadcast<T: Float>(g: &[T], len: usize) -> Vec<T> {
    if g.len() == len {
        return g.to_vec();
    }
    counter::add(g.len());
    let mut out = vec![T::zero(); len];
    for chunk in g.chunks(len) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            *o = *o + x;
        }
    }
    out
}

struct MatView {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
    stride: usize,
}

fn mat_view(shape: &[usize], trans: bool) -> MatView {
    let r = shape.len();
    let (sr, sc) = (shape[r - 2], shape[r - 1]);
    let stride = if r > 2 { sr * sc } else { 0 };
    if trans {
        MatView { rows: sc, cols: sr, rs: 1, cs: sc as isize, stride }
    } else {
        MatView { rows: sr, cols: sc, rs: sc as isize, cs: 1, stride }
    }
}

/// Batched matrix product over the last two axes.
///
/// Leading (batch) axes must match, or one operand may be a plain matrix
/// shared across the other's batch.
pub(crate) fn bmm<T: Float>(
    a: &[T],
    ash: &[usize],
    ta: bool,
    b: &[T],
    bsh: &[usize],
    tb: bool,
) -> Result<(Vec<T>, Vec<usize>)> {
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(Error::shape("matmul", ash, bsh));
    }
    let va = mat_view(ash, ta);
    let vb = mat_view(bsh, tb);
    if va.cols != vb.rows {
        return Err(Error::shape("matmul", ash, bsh));
    }
    let abatch = &ash[..ash.len() - 2];
    let bbatch = &bsh[..bsh.len() - 2];
    let batch: Vec<usize> = if bbatch.is_empty() || abatch == bbatch {
        abatch.to_vec()
    } else if abatch.is_empty() {
        bbatch.to_vec()
    } else {
        return Err(Error::shape("matmul", ash, bsh));
    };
    let nb: usize = batch.iter().product();
    let (m, k, n) = (va.rows, va.cols, vb.cols);
    let mut out = vec![T::zero(); nb * m * n];
    for i in 0..nb {
        // SAFETY: views lie within `a`, `b` and `out` by construction of the strides above.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                a.as_ptr().add(i * va.stride),
                va.rs,
                va.cs,
                b.as_ptr().add(i * vb.stride),
                vb.rs,
                vb.cs,
                out.as_mut_ptr().add(i * m * n),
                n as isize,
                1,
            );
        }
    }
    counter::add(nb * m * k * n);
    let mut shape = batch;
    shape.push(m);
    shape.push(n);
    Ok((out, shape))
}

/// Like [`bmm`] but sums the batched product over the batch axes, producing
/// one matrix. Used for gradients of operands shared across a batch.
pub(crate) fn bmm_sum_batch<T: Float>(
    a: &[T],
    ash: &[usize],
    ta: bool,
    b: &[T],
    bsh: &[usize],
    tb: bool,
) -> Result<Vec<T>> {
    let (full, shape) = bmm(a, ash, ta, b, bsh, tb)?;
    let r = shape.len();
    let mat = shape[r - 2] * shape[r - 1];
    Ok(reduce_broadcast(&full, mat))
}

pub(crate) fn softmax_rows<T: Float>(x: &[T], n: usize, mask: Option<&[bool]>) -> Vec<T> {
    counter::add(3 * x.len());
    let mut out = vec![T::zero(); x.len()];
    let mask_len = mask.map_or(0, |m| m.len());
    for (r, (row, orow)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let allowed = |j: usize| mask.map_or(true, |m| m[(r * n + j) % mask_len]);
        let mut mx = T::neg_infinity();
        for (j, &v) in row.iter().enumerate() {
            if allowed(j) && v > mx {
                mx = v;
            }
        }
        if mx == T::neg_infinity() {
            continue;
        }
        let mut sum = T::zero();
        for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
            if allowed(j) {
                *o = (v - mx).exp();
                sum = sum + *o;
            }
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// Backward of a row softmax given its output `y` and upstream gradient `g`.
pub(crate) fn softmax_rows_backward<T: Float>(y: &[T], g: &[T], n: usize) -> Vec<T> {
    counter::add(3 * y.len());
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), or) in y.chunks(n).zip(g.chunks(n)).zip(out.chunks_mut(n)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    out
}

pub(crate) fn log_softmax_rows<T: Float>(x: &[T], n: usize) -> Vec<T> {
    counter::add(3 * x.len());
    let mut out = vec![T::zero(); x.len()];
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

pub(crate) fn permute<T: Float>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn narrow<T: Float>(x: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * dim * inner;
        out.extend_from_slice(&x[base + start * inner..base + (start + len) * inner]);
    }
    out
}

pub(crate) fn concat<T: Float>(parts: &[(&[T], &[usize])], axis: usize) -> (Vec<T>, Vec<usize>) {
    let first = parts[0].1;
    let (outer, _, inner) = split_axis(first, axis);
    let total: usize = parts.iter().map(|(_, s)| s[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (data, s) in parts {
            let w = s[axis] * inner;
            out.extend_from_slice(&data[o * w..(o + 1) * w]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    (out, shape)
}

pub(crate) fn sum_axis<T: Float>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    counter::add(x.len());
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for d in 0..dim {
            let src = &x[(o * dim + d) * inner..(o * dim + d + 1) * inner];
            for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *acc = *acc + v;
            }
        }
    }
    out
}

/// Inverse of [`sum_axis`]: repeats `g` along `axis`.
pub(crate) fn expand_axis<T: Float>(g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * dim * inner);
    for o in 0..outer {
        for _ in 0..dim {
            out.extend_from_slice(&g[o * inner..(o + 1) * inner]);
        }
    }
    out
}

pub(crate) fn cumsum_last<T: Float>(x: &[T], n: usize, reverse: bool) -> Vec<T> {
    counter::add(x.len());
    let mut out = x.to_vec();
    for row in out.chunks_mut(n) {
        let mut acc = T::zero();
        if reverse {
            for v in row.iter_mut().rev() {
                acc = acc + *v;
                *v = acc;
            }
        } else {
            for v in row.iter_mut() {
                acc = acc + *v;
                *v = acc;
            }
        }
    }
    out
}
