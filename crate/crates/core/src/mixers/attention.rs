//! Scaled softmax attention: the full-prefix teacher form with a growing
//! KV cache, and the sliding-window form with permanent sink positions.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::{Float, Var};

/// `softmax(q Kᵀ · scale) V` for `q: [H, n, d_qk]`, `K: [H, m, d_qk]`, `V: [H, m, d_v]`.
fn attend<'t, T: Float>(
    q: &Var<'t, T>,
    k: &Var<'t, T>,
    v: &Var<'t, T>,
    scale: f64,
    mask: Option<&[bool]>,
) -> Result<Var<'t, T>> {
    let scores = q.matmul_t(k, false, true)?.scale(scale)?;
    let p = match mask {
        Some(m) => scores.masked_softmax(m)?,
        None => scores.softmax()?,
    };
    p.matmul(v)
}

/// Query block length used by [`attention_parallel`].
const BLOCK: usize = 64;

/// Causal attention over a whole sequence `q, k: [H, T, d_qk]`, `v: [H, T, d_v]`.
///
/// With `window = Some(w)`, query `t` sees key `s` iff `s ≤ t` and either
/// `t − s < w` or `s < n_sinks`. Queries are processed in blocks and each
/// block only materializes the keys it can see, so the cost is `O(T·(w+block))`
/// for windowed attention.
pub fn attention_parallel<'t, T: Float>(
    q: &Var<'t, T>,
    k: &Var<'t, T>,
    v: &Var<'t, T>,
    window: Option<usize>,
    n_sinks: usize,
) -> Result<Var<'t, T>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || qs != ks || vs.len() != 3 || vs[..2] != qs[..2] {
        return Err(Error::shape("attention", qs, vs));
    }
    let (t_len, d) = (qs[1], qs[2]);
    let scale = 1.0 / (d as f64).sqrt();
    let mut blocks = Vec::with_capacity(t_len.div_ceil(BLOCK));
    let mut a = 0;
    while a < t_len {
        let b = (a + BLOCK).min(t_len);
        let lo = window.map_or(0, |w| (a + 1).saturating_sub(w));
        let ns = n_sinks.min(lo);
        let mut kpos: Vec<usize> = (0..ns).collect();
        kpos.extend(lo..b);
        let (kb, vb) = if ns > 0 {
            (
                Var::concat(&[k.narrow(1, 0, ns)?, k.narrow(1, lo, b - lo)?], 1)?,
                Var::concat(&[v.narrow(1, 0, ns)?, v.narrow(1, lo, b - lo)?], 1)?,
            )
        } else {
            (k.narrow(1, lo, b - lo)?, v.narrow(1, lo, b - lo)?)
        };
        let mut mask = Vec::with_capacity((b - a) * kpos.len());
        for t in a..b {
            for &s in &kpos {
                mask.push(s <= t && window.map_or(true, |w| t - s < w || s < n_sinks));
            }
        }
        blocks.push(attend(&q.narrow(1, a, b - a)?, &kb, &vb, scale, Some(&mask))?);
        a = b;
    }
    if blocks.len() == 1 {
        Ok(blocks.pop().expect("one block"))
    } else {
        Var::concat(&blocks, 1)
    }
}

/// Growing key/value cache of full softmax attention.
#[derive(Clone)]
pub struct KvCache<'t, T: Float> {
    k: Option<Var<'t, T>>,
    v: Option<Var<'t, T>>,
}

impl<'t, T: Float> Default for KvCache<'t, T> {
    fn default() -> Self {
        Self { k: None, v: None }
    }
}

impl<'t, T: Float> KvCache<'t, T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Cache holding a whole prefix `k: [H, t, d_qk]`, `v: [H, t, d_v]`.
    pub fn from_prefix(k: Var<'t, T>, v: Var<'t, T>) -> Result<Self> {
        if k.shape()[..2] != v.shape()[..2] {
            return Err(Error::shape("KvCache", k.shape(), v.shape()));
        }
        Ok(Self {
            k: Some(k),
            v: Some(v),
        })
    }

    pub fn len(&self) -> usize {
        self.k.as_ref().map_or(0, |k| k.shape()[1])
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_none()
    }

    /// Appends one position: `k: [H, 1, d_qk]`, `v: [H, 1, d_v]`.
    pub fn append(&mut self, k: Var<'t, T>, v: Var<'t, T>) -> Result<()> {
        if k.shape().len() != 3 || k.shape()[1] != 1 || v.shape()[..2] != k.shape()[..2] {
            return Err(Error::shape("KvCache::append", k.shape(), v.shape()));
        }
        self.k = Some(match self.k.take() {
            Some(old) => Var::concat(&[old, k], 1)?,
            None => k,
        });
        self.v = Some(match self.v.take() {
            Some(old) => Var::concat(&[old, v], 1)?,
            None => v,
        });
        Ok(())
    }

    pub fn keys(&self) -> Option<&Var<'t, T>> {
        self.k.as_ref()
    }

    pub fn values(&self) -> Option<&Var<'t, T>> {
        self.v.as_ref()
    }

    pub fn stored_scalars(&self) -> usize {
        self.k.as_ref().map_or(0, |k| k.value().numel())
            + self.v.as_ref().map_or(0, |v| v.value().numel())
    }
}

/// `softmax(q_t Kᵀ/√d_qk) V` over every cached position; `q: [H, 1, d_qk]`.
pub fn softmax_attention<'t, T: Float>(q: &Var<'t, T>, cache: &KvCache<'t, T>) -> Result<Var<'t, T>> {
    match (&cache.k, &cache.v) {
        (Some(k), Some(v)) => attend(q, k, v, scale_of(q), None),
        _ => Err(Error::Contract("attention over an empty cache".into())),
    }
}

fn scale_of<T: Float>(q: &Var<'_, T>) -> f64 {
    1.0 / (*q.shape().last().expect("rank 3") as f64).sqrt()
}

#[derive(Clone)]
struct Entry<'t, T: Float> {
    k: Var<'t, T>,
    v: Var<'t, T>,
    pos: usize,
}

/// Sink positions plus a ring of the `window` most recent other positions.
#[derive(Clone)]
pub struct SwaCache<'t, T: Float> {
    window: usize,
    n_sinks: usize,
    sinks: Vec<Entry<'t, T>>,
    ring: VecDeque<Entry<'t, T>>,
    t: usize,
}

impl<'t, T: Float> SwaCache<'t, T> {
    pub fn new(window: usize, n_sinks: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        Ok(Self {
            window,
            n_sinks,
            sinks: Vec::new(),
            ring: VecDeque::with_capacity(window + 1),
            t: 0,
        })
    }

    /// Cache state after a prefix `k: [H, t, d_qk]`, `v: [H, t, d_v]`.
    pub fn from_prefix(window: usize, n_sinks: usize, k: &Var<'t, T>, v: &Var<'t, T>) -> Result<Self> {
        let mut c = Self::new(window, n_sinks)?;
        let t = k.shape()[1];
        let ns = n_sinks.min(t);
        let first_ring = ns.max(t.saturating_sub(window));
        for pos in (0..ns).chain(first_ring..t) {
            c.push(k.narrow(1, pos, 1)?, v.narrow(1, pos, 1)?, pos);
        }
        c.t = t;
        Ok(c)
    }

    fn push(&mut self, k: Var<'t, T>, v: Var<'t, T>, pos: usize) {
        let e = Entry { k, v, pos };
        if self.sinks.len() < self.n_sinks {
            self.sinks.push(e);
        } else {
            self.ring.push_back(e);
            if self.ring.len() > self.window {
                self.ring.pop_front();
            }
        }
    }

    /// Appends the next position: `k: [H, 1, d_qk]`, `v: [H, 1, d_v]`.
    pub fn append(&mut self, k: Var<'t, T>, v: Var<'t, T>) -> Result<()> {
        if k.shape().len() != 3 || k.shape()[1] != 1 || v.shape()[..2] != k.shape()[..2] {
            return Err(Error::shape("SwaCache::append", k.shape(), v.shape()));
        }
        let pos = self.t;
        self.push(k, v, pos);
        self.t += 1;
        Ok(())
    }

    /// Number of positions seen so far.
    pub fn position(&self) -> usize {
        self.t
    }

    /// Number of stored entries.
    pub fn len(&self) -> usize {
        self.sinks.len() + self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Absolute positions of stored entries, sinks first.
    pub fn positions(&self) -> Vec<usize> {
        self.entries().map(|e| e.pos).collect()
    }

    fn entries(&self) -> impl Iterator<Item = &Entry<'t, T>> {
        self.sinks.iter().chain(self.ring.iter())
    }

    pub fn stored_scalars(&self) -> usize {
        self.entries()
            .map(|e| e.k.value().numel() + e.v.value().numel())
            .sum()
    }

    /// Stacked keys and values of all stored entries.
    pub fn gather(&self) -> Result<(Var<'t, T>, Var<'t, T>)> {
        if self.is_empty() {
            return Err(Error::Contract("attention over an empty cache".into()));
        }
        let ks: Vec<_> = self.entries().map(|e| e.k.clone()).collect();
        let vs: Vec<_> = self.entries().map(|e| e.v.clone()).collect();
        Ok((Var::concat(&ks, 1)?, Var::concat(&vs, 1)?))
    }
}

/// Softmax attention restricted to the sinks and the last `window` positions.
pub fn swa_attention<'t, T: Float>(q: &Var<'t, T>, cache: &SwaCache<'t, T>) -> Result<Var<'t, T>> {
    let (k, v) = cache.gather()?;
    attend(q, &k, &v, scale_of(q), None)
}
