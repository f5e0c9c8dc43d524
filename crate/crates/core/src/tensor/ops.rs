use std::rc::Rc;

use super::kernels;
use super::tape::{broadcast_offsets, padded_shape, Op};
use super::{counter, Float, Tensor, Var};
use crate::error::{Error, Result};

fn unary<'t, T: Float>(
    x: &Var<'t, T>,
    name: &'static str,
    f: impl Fn(T) -> T,
    op: impl FnOnce(Rc<Tensor<T>>, Rc<Tensor<T>>) -> Op<T>,
) -> Result<Var<'t, T>> {
    counter::add(x.value().numel());
    let out = x.value().map(f);
    let xin = x.value_rc();
    x.tape().record(name, out, &[x], |o| op(xin, Rc::clone(o)))
}

impl<'t, T: Float> Var<'t, T> {
    fn binary(
        &self,
        other: &Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, usize, usize)> {
        let shape = kernels::broadcast_shape(name, self.shape(), other.shape())?;
        let n = shape.iter().product();
        let data = kernels::zip_broadcast(self.value().data(), other.value().data(), n, f);
        Ok((
            Tensor::from_parts(shape, data),
            self.value().numel(),
            other.value().numel(),
        ))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (out, a_len, b_len) = self.binary(other, "add", |a, b| a + b)?;
        self.tape()
            .record("add", out, &[self, other], |_| Op::Add { a_len, b_len })
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (out, a_len, b_len) = self.binary(other, "sub", |a, b| a - b)?;
        self.tape()
            .record("sub", out, &[self, other], |_| Op::Sub { a_len, b_len })
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (out, _, _) = self.binary(other, "mul", |a, b| a * b)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        self.tape()
            .record("mul", out, &[self, other], |_| Op::Mul { a, b })
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (out, _, _) = self.binary(other, "div", |a, b| a / b)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        self.tape()
            .record("div", out, &[self, other], |_| Op::Div { a, b })
    }

    /// Elementwise maximum; ties send the gradient to `self`.
    pub fn maximum(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (out, _, _) = self.binary(other, "maximum", |a, b| if a >= b { a } else { b })?;
        let (a, b) = (self.value_rc(), other.value_rc());
        self.tape()
            .record("maximum", out, &[self, other], |_| Op::Maximum { a, b })
    }

    /// `scale * x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Var<'t, T>> {
        let (s, c) = (T::from_f64(scale), T::from_f64(shift));
        counter::add(self.value().numel());
        let out = self.value().map(|x| s * x + c);
        self.tape()
            .record("affine", out, &[self], |_| Op::Affine { scale: s })
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t, T>> {
        self.affine(s, 0.0)
    }

    pub fn neg(&self) -> Result<Var<'t, T>> {
        self.affine(-1.0, 0.0)
    }

    pub fn exp(&self) -> Result<Var<'t, T>> {
        unary(self, "exp", T::exp, |_, out| Op::Exp { out })
    }

    /// `exp(x)` where `mask` is set, zero elsewhere. `mask` covers the
    /// trailing axes and repeats over leading ones; masked inputs are ignored.
    pub fn exp_masked(&self, mask: &[bool]) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        if mask.is_empty() || n % mask.len() != 0 {
            return Err(Error::shape("exp_masked", self.shape(), &[mask.len()]));
        }
        counter::add(n);
        let data: Vec<T> = self
            .value()
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| if mask[i % mask.len()] { x.exp() } else { T::zero() })
            .collect();
        let out = Tensor::from_parts(self.shape().to_vec(), data);
        self.tape().record("exp_masked", out, &[self], |o| Op::Exp {
            out: Rc::clone(o),
        })
    }

    pub fn log(&self) -> Result<Var<'t, T>> {
        unary(self, "log", T::ln, |x, _| Op::Log { x })
    }

    pub fn sigmoid(&self) -> Result<Var<'t, T>> {
        unary(self, "sigmoid", sigmoid, |_, out| Op::Sigmoid { out })
    }

    /// `log σ(x)`, computed without overflow for large `|x|`.
    pub fn log_sigmoid(&self) -> Result<Var<'t, T>> {
        unary(self, "log_sigmoid", log_sigmoid, |x, _| Op::LogSigmoid { x })
    }

    pub fn abs(&self) -> Result<Var<'t, T>> {
        unary(self, "abs", T::abs, |x, _| Op::Abs { x })
    }

    pub fn rsqrt(&self) -> Result<Var<'t, T>> {
        unary(self, "rsqrt", |x| x.sqrt().recip(), |_, out| Op::Rsqrt { out })
    }

    pub fn square(&self) -> Result<Var<'t, T>> {
        unary(self, "square", |x| x * x, |x, _| Op::Square { x })
    }

    pub fn clamp_min(&self, min: f64) -> Result<Var<'t, T>> {
        let m = T::from_f64(min);
        unary(self, "clamp_min", |x| x.max(m), |x, _| Op::ClampMin { x, min: m })
    }

    /// `x · σ(x)`.
    pub fn silu(&self) -> Result<Var<'t, T>> {
        self.mul(&self.sigmoid()?)
    }

    /// Batched matrix product over the last two axes.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_t(other, false, false)
    }

    /// Matrix product with optional transposes of either operand's last two axes.
    pub fn matmul_t(&self, other: &Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let (data, shape) = kernels::bmm(
            self.value().data(),
            self.shape(),
            ta,
            other.value().data(),
            other.shape(),
            tb,
        )?;
        let out = Tensor::from_parts(shape, data);
        let (a, b) = (self.value_rc(), other.value_rc());
        self.tape()
            .record("matmul", out, &[self, other], |_| Op::MatMul { a, ta, b, tb })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", self.shape(), perm));
        }
        let (data, shape) = kernels::permute(self.value().data(), self.shape(), perm);
        let perm = perm.to_vec();
        self.tape().record(
            "permute",
            Tensor::from_parts(shape, data),
            &[self],
            |_| Op::Permute { perm },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        self.tape().record("reshape", out, &[self], |_| Op::Reshape)
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", shape, &[axis, start, len]));
        }
        let data = kernels::narrow(self.value().data(), shape, axis, start, len);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let in_shape = shape.to_vec();
        self.tape().record(
            "narrow",
            Tensor::from_parts(out_shape, data),
            &[self],
            |_| Op::Narrow {
                axis,
                start,
                in_shape,
            },
        )
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let s0 = first.shape();
        for p in parts {
            let s = p.shape();
            let ok = s.len() == s0.len()
                && axis < s.len()
                && s.iter().zip(s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", s0, s));
            }
        }
        let views: Vec<(&[T], &[usize])> = parts
            .iter()
            .map(|p| (p.value().data(), p.shape()))
            .collect();
        let (data, shape) = kernels::concat(&views, axis);
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        let refs: Vec<&Var<'t, T>> = parts.iter().collect();
        first.tape().record(
            "concat",
            Tensor::from_parts(shape, data),
            &refs,
            |_| Op::Concat { axis, shapes },
        )
    }

    /// Expands size-1 axes (and implicit leading axes) to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let in_shape = self.shape();
        if in_shape.len() > shape.len() {
            return Err(Error::shape("broadcast_to", in_shape, shape));
        }
        let padded = padded_shape(in_shape, shape.len());
        if padded.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(Error::shape("broadcast_to", in_shape, shape));
        }
        let src = self.value().data();
        let data: Vec<T> = broadcast_offsets(shape, in_shape)
            .into_iter()
            .map(|o| src[o])
            .collect();
        counter::add(data.len());
        let in_shape = in_shape.to_vec();
        self.tape().record(
            "broadcast_to",
            Tensor::from_parts(shape.to_vec(), data),
            &[self],
            |_| Op::BroadcastTo { in_shape },
        )
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        self.softmax_impl(None)
    }

    /// Softmax over the last axis restricted to entries where `mask` is set;
    /// masked entries get probability zero. `mask` covers the trailing axes.
    pub fn masked_softmax(&self, mask: &[bool]) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        if mask.is_empty() || n % mask.len() != 0 || mask.len() % self.last_dim() != 0 {
            return Err(Error::shape("masked_softmax", self.shape(), &[mask.len()]));
        }
        self.softmax_impl(Some(mask))
    }

    fn last_dim(&self) -> usize {
        *self.shape().last().unwrap_or(&1)
    }

    fn softmax_impl(&self, mask: Option<&[bool]>) -> Result<Var<'t, T>> {
        let n = self.last_dim();
        let data = kernels::softmax_rows(self.value().data(), n, mask);
        let out = Tensor::from_parts(self.shape().to_vec(), data);
        self.tape().record("softmax", out, &[self], |o| Op::Softmax {
            out: Rc::clone(o),
        })
    }

    pub fn log_softmax(&self) -> Result<Var<'t, T>> {
        let n = self.last_dim();
        let data = kernels::log_softmax_rows(self.value().data(), n);
        let out = Tensor::from_parts(self.shape().to_vec(), data);
        self.tape().record("log_softmax", out, &[self], |o| Op::LogSoftmax {
            out: Rc::clone(o),
        })
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", shape, &[axis]));
        }
        let data = kernels::sum_axis(self.value().data(), shape, axis);
        let mut out_shape = shape.to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let in_shape = shape.to_vec();
        self.tape().record(
            "sum_axis",
            Tensor::from_parts(out_shape, data),
            &[self],
            |_| Op::SumAxis { axis, in_shape },
        )
    }

    pub fn sum_all(&self) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        counter::add(n);
        let s: T = self.value().data().iter().copied().sum();
        self.tape()
            .record("sum_all", Tensor::scalar(s), &[self], |_| Op::SumAll { n })
    }

    pub fn mean_all(&self) -> Result<Var<'t, T>> {
        let n = self.value().numel() as f64;
        self.sum_all()?.scale(1.0 / n)
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let n = self.shape().get(axis).copied().unwrap_or(1) as f64;
        self.sum_axis(axis, keepdim)?.scale(1.0 / n)
    }

    /// Maximum over the last axis among entries where `mask` is set
    /// (all entries when `None`); keeps the reduced axis with size 1.
    pub fn max_last(&self, mask: Option<&[bool]>) -> Result<Var<'t, T>> {
        let n = self.last_dim();
        let x = self.value().data();
        if let Some(m) = mask {
            if m.is_empty() || x.len() % m.len() != 0 || m.len() % n != 0 {
                return Err(Error::shape("max_last", self.shape(), &[m.len()]));
            }
        }
        counter::add(x.len());
        let rows = x.len() / n;
        let mut vals = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut best: Option<(usize, T)> = None;
            for j in 0..n {
                let allowed = mask.map_or(true, |m| m[(r * n + j) % m.len()]);
                let v = x[r * n + j];
                if allowed && best.map_or(true, |(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            let (j, v) = best.ok_or_else(|| Error::Contract("max over an empty row".into()))?;
            vals.push(v);
            argmax.push(j);
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = 1;
        self.tape().record(
            "max_last",
            Tensor::from_parts(shape, vals),
            &[self],
            |_| Op::MaxLast { argmax, n },
        )
    }

    /// Inclusive prefix sum along the last axis.
    pub fn cumsum_last(&self) -> Result<Var<'t, T>> {
        let n = self.last_dim();
        let data = kernels::cumsum_last(self.value().data(), n, false);
        self.tape().record(
            "cumsum",
            Tensor::from_parts(self.shape().to_vec(), data),
            &[self],
            |_| Op::Cumsum { n },
        )
    }

    /// Rows of a `[rows, width]` matrix selected by `idx`: `[idx.len(), width]`.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() != 2 || idx.is_empty() {
            return Err(Error::shape("gather_rows", shape, &[idx.len()]));
        }
        let (rows, w) = (shape[0], shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let src = self.value().data();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let idx = idx.to_vec();
        self.tape().record(
            "gather_rows",
            Tensor::from_parts(vec![idx.len(), w], data),
            &[self],
            |_| Op::GatherRows { idx, rows },
        )
    }

    /// Picks `k` entries per row along the last axis: `idx` has `rows·k`
    /// column indices; the result has the last axis replaced by `k`.
    pub fn gather_last(&self, idx: &[usize], k: usize) -> Result<Var<'t, T>> {
        let n = self.last_dim();
        let rows = self.value().numel() / n;
        if k == 0 || idx.len() != rows * k {
            return Err(Error::shape("gather_last", self.shape(), &[idx.len(), k]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "gather_last index {bad} out of range for axis of size {n}"
            )));
        }
        let src = self.value().data();
        let data: Vec<T> = idx
            .iter()
            .enumerate()
            .map(|(i, &c)| src[(i / k) * n + c])
            .collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = k;
        let idx = idx.to_vec();
        self.tape().record(
            "gather_last",
            Tensor::from_parts(shape, data),
            &[self],
            |_| Op::GatherLast { idx, n, k },
        )
    }

    /// Batched outer product: `[..., m] ⊗ [..., n] -> [..., m, n]`.
    pub fn outer(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.is_empty() || sb.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("outer", sa, sb));
        }
        let m = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let batch = self.value().numel() / m;
        let (ad, bd) = (self.value().data(), other.value().data());
        let mut data = Vec::with_capacity(batch * m * n);
        for b in 0..batch {
            let brow = &bd[b * n..(b + 1) * n];
            for &av in &ad[b * m..(b + 1) * m] {
                data.extend(brow.iter().map(|&bv| av * bv));
            }
        }
        counter::add(data.len());
        let mut shape = sa.to_vec();
        shape.push(n);
        let (a, b) = (self.value_rc(), other.value_rc());
        self.tape().record(
            "outer",
            Tensor::from_parts(shape, data),
            &[self, other],
            |_| Op::Outer { a, b },
        )
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sigmoid<T: Float>(x: T) -> T {
    // log σ(x) = -softplus(-x)
    if x >= T::zero() {
        -((-x).exp().ln_1p())
    } else {
        x - x.exp().ln_1p()
    }
}
