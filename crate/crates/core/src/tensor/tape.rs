use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels;
use super::{check_finite, counter, Float, Tensor};
use crate::error::{Error, Result};

/// Backward information for one recorded operation.
pub(crate) enum Op<T> {
    Leaf,
    Add { a_len: usize, b_len: usize },
    Sub { a_len: usize, b_len: usize },
    Mul { a: Rc<Tensor<T>>, b: Rc<Tensor<T>> },
    Div { a: Rc<Tensor<T>>, b: Rc<Tensor<T>> },
    Maximum { a: Rc<Tensor<T>>, b: Rc<Tensor<T>> },
    Affine { scale: T },
    Exp { out: Rc<Tensor<T>> },
    Log { x: Rc<Tensor<T>> },
    Sigmoid { out: Rc<Tensor<T>> },
    LogSigmoid { x: Rc<Tensor<T>> },
    Abs { x: Rc<Tensor<T>> },
    Rsqrt { out: Rc<Tensor<T>> },
    Square { x: Rc<Tensor<T>> },
    ClampMin { x: Rc<Tensor<T>>, min: T },
    MatMul { a: Rc<Tensor<T>>, ta: bool, b: Rc<Tensor<T>>, tb: bool },
    Permute { perm: Vec<usize> },
    Reshape,
    Narrow { axis: usize, start: usize, in_shape: Vec<usize> },
    Concat { axis: usize, shapes: Vec<Vec<usize>> },
    BroadcastTo { in_shape: Vec<usize> },
    Softmax { out: Rc<Tensor<T>> },
    LogSoftmax { out: Rc<Tensor<T>> },
    SumAxis { axis: usize, in_shape: Vec<usize> },
    SumAll { n: usize },
    MaxLast { argmax: Vec<usize>, n: usize },
    Cumsum { n: usize },
    GatherRows { idx: Vec<usize>, rows: usize },
    GatherLast { idx: Vec<usize>, n: usize, k: usize },
    Outer { a: Rc<Tensor<T>>, b: Rc<Tensor<T>> },
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<Option<usize>>,
    shape: Vec<usize>,
}

/// Ordered record of differentiable operations, confined to one thread.
///
/// Only operations with at least one input that requires a gradient are
/// recorded; everything else is evaluated eagerly and forgotten.
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A tensor value bound to a tape. Cloning is cheap (shared value).
#[derive(Clone)]
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    value: Rc<Tensor<T>>,
    id: Option<usize>,
}

/// Gradients of a scalar loss with respect to every leaf on the tape.
pub struct Gradients<T> {
    by_leaf: HashMap<usize, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.by_leaf.get(&id))
    }

    /// Gradient of `var`, or zeros if the loss does not depend on it.
    pub fn get_or_zero(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A leaf that requires a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf_rc(Rc::new(value))
    }

    pub fn leaf_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            shape: value.shape().to_vec(),
        });
        Var {
            tape: self,
            value,
            id: Some(id),
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.constant_rc(Rc::new(value))
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        Var {
            tape: self,
            value,
            id: None,
        }
    }

    pub fn scalar(&self, x: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(x))
    }

    /// Number of recorded operations (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn record(
        &self,
        name: &'static str,
        value: Tensor<T>,
        inputs: &[&Var<'_, T>],
        op: impl FnOnce(&Rc<Tensor<T>>) -> Op<T>,
    ) -> Result<Var<'_, T>> {
        check_finite(name, value.data())?;
        let value = Rc::new(value);
        let tracked = inputs.iter().any(|v| v.id.is_some());
        let id = if tracked {
            let mut nodes = self.nodes.borrow_mut();
            let id = nodes.len();
            nodes.push(Node {
                op: op(&value),
                inputs: inputs.iter().map(|v| v.id).collect(),
                shape: value.shape().to_vec(),
            });
            Some(id)
        } else {
            None
        };
        Ok(Var {
            tape: self,
            value,
            id,
        })
    }

    /// Reverse-mode sweep from a scalar `loss`. Consumes the recorded ops.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let Some(loss_id) = loss.id else {
            return Err(Error::Contract(
                "loss does not depend on any tape leaf".into(),
            ));
        };
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        if loss_id >= nodes.len() {
            return Err(Error::Contract("loss was recorded on another tape".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss_id).map(|_| None).collect();
        grads[loss_id] = Some(vec![T::one()]);
        let mut out = Gradients {
            by_leaf: HashMap::new(),
        };
        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                out.by_leaf
                    .insert(id, Tensor::from_parts(node.shape.clone(), g));
                continue;
            }
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward_op(&node.op, &g, &node.shape, &needs)?;
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let (Some(iid), Some(ig)) = (input, ig) else { continue };
                match &mut grads[*iid] {
                    Some(acc) => {
                        counter::add(acc.len());
                        for (a, b) in acc.iter_mut().zip(&ig) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(out)
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var<'t, T> {
        Var {
            tape: self.tape,
            value: Rc::clone(&self.value),
            id: None,
        }
    }

    pub fn item(&self) -> T {
        self.value.item()
    }
}

fn sq<T: Float>(x: T) -> T {
    x * x
}

fn map2<T: Float>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    counter::add(a.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Computes input gradients for one node. `needs[i]` is false for inputs that
/// do not require a gradient; their slot is returned as `None`.
fn backward_op<T: Float>(
    op: &Op<T>,
    g: &[T],
    out_shape: &[usize],
    needs: &[bool],
) -> Result<Vec<Option<Vec<T>>>> {
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    let res = match op {
        Op::Leaf => vec![],
        Op::Add { a_len, b_len } => vec![
            need(0).then(|| kernels::reduce_broadcast(g, *a_len)),
            need(1).then(|| kernels::reduce_broadcast(g, *b_len)),
        ],
        Op::Sub { a_len, b_len } => vec![
            need(0).then(|| kernels::reduce_broadcast(g, *a_len)),
            need(1).then(|| {
                kernels::reduce_broadcast(g, *b_len)
                    .into_iter()
                    .map(|x| -x)
                    .collect()
            }),
        ],
        Op::Mul { a, b } => {
            let n = g.len();
            vec![
                need(0).then(|| {
                    let full = kernels::zip_broadcast(g, b.data(), n, |x, y| x * y);
                    kernels::reduce_broadcast(&full, a.numel())
                }),
                need(1).then(|| {
                    let full = kernels::zip_broadcast(g, a.data(), n, |x, y| x * y);
                    kernels::reduce_broadcast(&full, b.numel())
                }),
            ]
        }
        Op::Div { a, b } => {
            let n = g.len();
            let (ad, bd) = (a.data(), b.data());
            let (la, lb) = (ad.len(), bd.len());
            vec![
                need(0).then(|| {
                    let full: Vec<T> = (0..n).map(|i| g[i] / bd[i % lb]).collect();
                    kernels::reduce_broadcast(&full, la)
                }),
                need(1).then(|| {
                    let full: Vec<T> = (0..n)
                        .map(|i| -g[i] * ad[i % la] / sq(bd[i % lb]))
                        .collect();
                    kernels::reduce_broadcast(&full, lb)
                }),
            ]
        }
        Op::Maximum { a, b } => {
            let n = g.len();
            let (ad, bd) = (a.data(), b.data());
            let (la, lb) = (ad.len(), bd.len());
            // ties route the gradient to the first operand
            let pick_a: Vec<bool> = (0..n).map(|i| ad[i % la] >= bd[i % lb]).collect();
            vec![
                need(0).then(|| {
                    let full: Vec<T> = (0..n)
                        .map(|i| if pick_a[i] { g[i] } else { T::zero() })
                        .collect();
                    kernels::reduce_broadcast(&full, la)
                }),
                need(1).then(|| {
                    let full: Vec<T> = (0..n)
                        .map(|i| if pick_a[i] { T::zero() } else { g[i] })
                        .collect();
                    kernels::reduce_broadcast(&full, lb)
                }),
            ]
        }
        Op::Affine { scale } => vec![Some(g.iter().map(|&x| x * *scale).collect())],
        Op::Exp { out } => vec![Some(map2(g, out.data(), |x, y| x * y))],
        Op::Log { x } => vec![Some(map2(g, x.data(), |gv, xv| gv / xv))],
        Op::Sigmoid { out } => vec![Some(map2(g, out.data(), |gv, s| {
            gv * s * (T::one() - s)
        }))],
        Op::LogSigmoid { x } => vec![Some(map2(g, x.data(), |gv, xv| {
            // d/dx log σ(x) = σ(-x)
            gv / (T::one() + xv.exp())
        }))],
        Op::Abs { x } => vec![Some(map2(g, x.data(), |gv, xv| {
            if xv > T::zero() {
                gv
            } else if xv < T::zero() {
                -gv
            } else {
                T::zero()
            }
        }))],
        Op::Rsqrt { out } => {
            let half = T::from_f64(0.5);
            vec![Some(map2(g, out.data(), |gv, r| -half * gv * r * r * r))]
        }
        Op::Square { x } => {
            let two = T::from_f64(2.0);
            vec![Some(map2(g, x.data(), |gv, xv| two * gv * xv))]
        }
        Op::ClampMin { x, min } => vec![Some(map2(g, x.data(), |gv, xv| {
            if xv > *min {
                gv
            } else {
                T::zero()
            }
        }))],
        Op::MatMul { a, ta, b, tb } => {
            let gs = out_shape;
            let (ash, bsh) = (a.shape(), b.shape());
            let a_shared = ash.len() == 2 && gs.len() > 2;
            let b_shared = bsh.len() == 2 && gs.len() > 2;
            let da = if need(0) {
                let (l, lt, r, rt) = match (ta, tb) {
                    (false, false) => ((g, gs), false, (b.data(), bsh), true),
                    (false, true) => ((g, gs), false, (b.data(), bsh), false),
                    (true, false) => ((b.data(), bsh), false, (g, gs), true),
                    (true, true) => ((b.data(), bsh), true, (g, gs), true),
                };
                Some(if a_shared {
                    kernels::bmm_sum_batch(l.0, l.1, lt, r.0, r.1, rt)?
                } else {
                    kernels::bmm(l.0, l.1, lt, r.0, r.1, rt)?.0
                })
            } else {
                None
            };
            let db = if need(1) {
                let (l, lt, r, rt) = match (ta, tb) {
                    (false, false) => ((a.data(), ash), true, (g, gs), false),
                    (false, true) => ((g, gs), true, (a.data(), ash), false),
                    (true, false) => ((a.data(), ash), false, (g, gs), false),
                    (true, true) => ((g, gs), true, (a.data(), ash), true),
                };
                Some(if b_shared {
                    kernels::bmm_sum_batch(l.0, l.1, lt, r.0, r.1, rt)?
                } else {
                    kernels::bmm(l.0, l.1, lt, r.0, r.1, rt)?.0
                })
            } else {
                None
            };
            vec![da, db]
        }
        Op::Permute { perm } => {
            let (d, _) = kernels::permute(g, out_shape, &kernels::inverse_perm(perm));
            vec![Some(d)]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Narrow {
            axis,
            start,
            in_shape,
        } => {
            let (outer, dim, inner) = kernels::split_axis(in_shape, *axis);
            let len = out_shape[*axis];
            let mut d = vec![T::zero(); outer * dim * inner];
            for o in 0..outer {
                let dst = o * dim * inner + start * inner;
                d[dst..dst + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(d)]
        }
        Op::Concat { axis, shapes } => {
            let mut start = 0;
            let mut res = Vec::with_capacity(shapes.len());
            for (i, s) in shapes.iter().enumerate() {
                let len = s[*axis];
                res.push(need(i).then(|| kernels::narrow(g, out_shape, *axis, start, len)));
                start += len;
            }
            res
        }
        Op::BroadcastTo { in_shape } => vec![Some(unbroadcast(g, out_shape, in_shape))],
        Op::Softmax { out } => {
            let n = *out_shape.last().unwrap_or(&1);
            vec![Some(kernels::softmax_rows_backward(out.data(), g, n))]
        }
        Op::LogSoftmax { out } => {
            let n = *out_shape.last().unwrap_or(&1);
            let mut d = vec![T::zero(); g.len()];
            for ((yr, gr), dr) in out.data().chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                let gs: T = gr.iter().copied().sum();
                for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = gv - yv.exp() * gs;
                }
            }
            counter::add(3 * g.len());
            vec![Some(d)]
        }
        Op::SumAxis { axis, in_shape } => vec![Some(kernels::expand_axis(g, in_shape, *axis))],
        Op::SumAll { n } => vec![Some(vec![g[0]; *n])],
        Op::MaxLast { argmax, n } => {
            let mut d = vec![T::zero(); argmax.len() * n];
            for (r, &j) in argmax.iter().enumerate() {
                d[r * n + j] = g[r];
            }
            vec![Some(d)]
        }
        Op::Cumsum { n } => vec![Some(kernels::cumsum_last(g, *n, true))],
        Op::GatherRows { idx, rows } => {
            let w = g.len() / idx.len().max(1);
            let mut d = vec![T::zero(); rows * w];
            for (i, &r) in idx.iter().enumerate() {
                for (dv, &gv) in d[r * w..(r + 1) * w].iter_mut().zip(&g[i * w..(i + 1) * w]) {
                    *dv = *dv + gv;
                }
            }
            vec![Some(d)]
        }
        Op::GatherLast { idx, n, k } => {
            let rows = idx.len() / k;
            let mut d = vec![T::zero(); rows * n];
            for r in 0..rows {
                for j in 0..*k {
                    let c = idx[r * k + j];
                    d[r * n + c] = d[r * n + c] + g[r * k + j];
                }
            }
            vec![Some(d)]
        }
        Op::Outer { a, b } => {
            let m = *a.shape().last().unwrap_or(&1);
            let n = *b.shape().last().unwrap_or(&1);
            let batch = a.numel() / m;
            counter::add(2 * g.len());
            let da = need(0).then(|| {
                let mut d = vec![T::zero(); a.numel()];
                for bi in 0..batch {
                    let brow = &b.data()[bi * n..(bi + 1) * n];
                    for i in 0..m {
                        let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                        d[bi * m + i] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                    }
                }
                d
            });
            let db = need(1).then(|| {
                let mut d = vec![T::zero(); b.numel()];
                for bi in 0..batch {
                    for i in 0..m {
                        let av = a.data()[bi * m + i];
                        let grow = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                        for (dv, &gv) in d[bi * n..(bi + 1) * n].iter_mut().zip(grow) {
                            *dv = *dv + av * gv;
                        }
                    }
                }
                d
            });
            vec![da, db]
        }
    };
    Ok(res)
}

/// Left-pads `in_shape` with ones to the rank of `out_shape`.
pub(crate) fn padded_shape(in_shape: &[usize], rank: usize) -> Vec<usize> {
    let mut s = vec![1; rank - in_shape.len()];
    s.extend_from_slice(in_shape);
    s
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offset in the broadcast input for every output element.
pub(crate) fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let ps = padded_shape(in_shape, rank);
    let in_strides = strides(&ps);
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut offs = Vec::with_capacity(n);
    for _ in 0..n {
        let off: usize = (0..rank)
            .map(|d| if ps[d] == 1 { 0 } else { idx[d] * in_strides[d] })
            .sum();
        offs.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    offs
}

fn unbroadcast<T: Float>(g: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
    let n: usize = in_shape.iter().product();
    let mut d = vec![T::zero(); n];
    for (i, off) in broadcast_offsets(out_shape, in_shape).into_iter().enumerate() {
        d[off] = d[off] + g[i];
    }
    counter::add(g.len());
    d
}
