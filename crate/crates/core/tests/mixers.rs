use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlin_core::mixers::attention::{attention_parallel, KvCache, SwaCache};
use xlin_core::mixers::rope::rope;
use xlin_core::mixers::{
    apply_rope, feature_map, linear_attention_step, merge_all_gates, merge_gate_projection,
    mixer_forward, mixer_step, mlstm_parallel, mlstm_step, output_gate, param_shapes,
    project_qkv, softmax_attention, swa_attention, GateInput, GateInputMode, HybridLayerParams,
    LayerCache, LinearState, MixerConfig, MixerKind, MlstmState, Overrides,
};
use xlin_core::tensor::gradcheck::{self, weighted_sum};
use xlin_core::{Error, Result, Tape, Tensor, Var};

type Series = Vec<Vec<f64>>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, r)
}

/// Rows of head `h` of a `[H, T, d]` tensor.
fn head(x: &Tensor<f64>, h: usize) -> Series {
    let (t, d) = (x.shape()[1], x.shape()[2]);
    (0..t)
        .map(|i| (0..d).map(|j| x.at(&[h, i, j])).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_diff(a: &Series, b: &Series) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Attention of every query over the keys allowed by `allowed(t, s)`.
fn naive_attention(q: &Series, k: &Series, v: &Series, allowed: impl Fn(usize, usize) -> bool) -> Series {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    q.iter()
        .enumerate()
        .map(|(t, qt)| {
            let idx: Vec<usize> = (0..k.len()).filter(|&s| allowed(t, s)).collect();
            let logits: Vec<f64> = idx.iter().map(|&s| dot(qt, &k[s]) * scale).collect();
            let w = softmax_vec(&logits);
            let mut out = vec![0.0; v[0].len()];
            for (wi, &s) in w.iter().zip(&idx) {
                for (o, x) in out.iter_mut().zip(&v[s]) {
                    *o += wi * x;
                }
            }
            out
        })
        .collect()
}

/// Unstabilized gated recurrence in true (unscaled) units.
fn naive_mlstm(fq: &Series, fk: &Series, v: &Series, i_pre: &[f64], f_pre: &[f64]) -> Series {
    let (dk, dv) = (fq[0].len(), v[0].len());
    let mut s = vec![vec![0.0; dv]; dk];
    let mut n = vec![0.0; dk];
    let mut out = Vec::new();
    for t in 0..fq.len() {
        let i = i_pre[t].exp();
        let f = 1.0 / (1.0 + (-f_pre[t]).exp());
        for a in 0..dk {
            for b in 0..dv {
                s[a][b] = f * s[a][b] + i * fk[t][a] * v[t][b];
            }
            n[a] = f * n[a] + i * fk[t][a];
        }
        let den = dot(&fq[t], &n).abs().max(1e-12);
        out.push((0..dv).map(|b| (0..dk).map(|a| fq[t][a] * s[a][b]).sum::<f64>() / den).collect());
    }
    out
}

fn small_cfg() -> MixerConfig {
    MixerConfig {
        d_model: 8,
        n_heads: 2,
        d_qk: 4,
        d_v: 3,
        window: 3,
        n_sinks: 2,
        chunk_size: 3,
        rope_base: 10000.0,
        gate_input_mode: GateInputMode::ConcatQkv,
    }
}

fn rand_params(kind: MixerKind, cfg: &MixerConfig, seed: u64) -> HybridLayerParams<Tensor<f64>> {
    let mut r = rng(seed);
    let shapes = param_shapes(kind, cfg);
    HybridLayerParams::from_fn(kind, |name| -> std::result::Result<_, ()> {
        let shape = &shapes.iter().find(|(n, _)| *n == name).unwrap().1;
        Ok(rand_t(shape, -0.6, 0.6, &mut r))
    })
    .unwrap()
}

fn as_vars<'t>(tape: &'t Tape<f64>, p: &HybridLayerParams<Tensor<f64>>) -> HybridLayerParams<Var<'t, f64>> {
    p.try_map(|_, t| Ok::<_, ()>(tape.constant(t.clone()))).unwrap()
}

/// Softmax-normalized random features `[H, T, d]`.
fn rand_features(h: usize, t: usize, d: usize, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let tape = Tape::new();
    tape.constant(rand_t(&[h, t, d], -2.0, 2.0, r))
        .softmax()
        .unwrap()
        .value()
        .clone()
}

// ---------------------------------------------------------------- projections

#[test]
fn project_qkv_identity_zero_and_slicing() {
    let cfg = MixerConfig {
        d_model: 8,
        d_v: 4,
        ..small_cfg()
    };
    let mut p = rand_params(MixerKind::SoftmaxFull, &cfg, 1);
    p.w_q = Tensor::eye(8);
    let tape = Tape::new();
    let mut r = rng(2);
    let x = rand_t(&[5, 8], -1.0, 1.0, &mut r);
    let pv = as_vars(&tape, &p);
    let (q, k, v) = project_qkv(&tape.constant(x.clone()), &pv, &cfg).unwrap();
    for h in 0..2 {
        for t in 0..5 {
            for j in 0..4 {
                assert_eq!(q.value().at(&[h, t, j]), x.at(&[t, h * 4 + j]));
                // slicing oracle for k and v
                let kk: f64 = (0..8).map(|i| x.at(&[t, i]) * p.w_k.at(&[i, h * 4 + j])).sum();
                assert!((k.value().at(&[h, t, j]) - kk).abs() < 1e-12);
                let vv: f64 = (0..8).map(|i| x.at(&[t, i]) * p.w_v.at(&[i, h * 4 + j])).sum();
                assert!((v.value().at(&[h, t, j]) - vv).abs() < 1e-12);
            }
        }
    }
    let (q, k, v) = project_qkv(&tape.constant(Tensor::zeros(&[3, 8])), &pv, &cfg).unwrap();
    for z in [q, k, v] {
        assert!(z.value().data().iter().all(|&a| a == 0.0));
    }
    assert!(project_qkv(&tape.constant(Tensor::zeros(&[3, 7])), &pv, &cfg).is_err());
}

// ----------------------------------------------------------------------- rope

#[test]
fn rope_zero_position_is_identity_and_rotation_is_isometric() {
    let mut r = rng(3);
    let x = rand_t(&[2, 4, 6], -1.0, 1.0, &mut r);
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let at0 = rope(&xv, &[0, 0, 0, 0], 10000.0).unwrap();
    assert!(at0.value().max_abs_diff(&x) < 1e-15);
    let rot = rope(&xv, &[0, 5, 77, 1234], 10000.0).unwrap();
    for h in 0..2 {
        for t in 0..4 {
            for pair in 0..3 {
                let n = |y: &Tensor<f64>| {
                    y.at(&[h, t, 2 * pair]).hypot(y.at(&[h, t, 2 * pair + 1]))
                };
                assert!((n(rot.value()) - n(&x)).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn rope_scores_depend_only_on_relative_position() {
    let mut r = rng(4);
    let tape = Tape::new();
    let q = tape.constant(rand_t(&[1, 1, 8], -1.0, 1.0, &mut r));
    let k = tape.constant(rand_t(&[1, 1, 8], -1.0, 1.0, &mut r));
    let score = |a: usize, b: usize| -> f64 {
        let (qa, _) = apply_rope(&q, &q, &[a], 500.0).unwrap();
        let kb = rope(&k, &[b], 500.0).unwrap();
        dot(qa.value().data(), kb.value().data())
    };
    for (a, b, c) in [(3, 1, 10), (0, 7, 100), (20, 20, 5)] {
        assert!((score(a, b) - score(a + c, b + c)).abs() < 1e-8);
    }
}

#[test]
fn rope_rejects_odd_width() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::<f64>::zeros(&[1, 2, 5]));
    assert!(matches!(rope(&x, &[0, 1], 10000.0), Err(Error::Config(_))));
    let cfg = MixerConfig { d_qk: 5, ..small_cfg() };
    assert!(cfg.validate().is_err());
}

// ------------------------------------------------------------------ attention

fn kv_entries(h: usize, t: usize, dk: usize, dv: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    (rand_t(&[h, t, dk], -1.5, 1.5, &mut r), rand_t(&[h, t, dv], -1.0, 1.0, &mut r))
}

#[test]
fn softmax_attention_examples() {
    let tape = Tape::new();
    let (k, v) = kv_entries(2, 5, 4, 3, 5);
    let (kv, vv) = (tape.constant(k.clone()), tape.constant(v.clone()));
    let mut r = rng(6);
    let q = tape.constant(rand_t(&[2, 1, 4], -1.0, 1.0, &mut r));

    let mut one = KvCache::new();
    one.append(kv.narrow(1, 0, 1).unwrap(), vv.narrow(1, 0, 1).unwrap()).unwrap();
    let h = softmax_attention(&q, &one).unwrap();
    for hd in 0..2 {
        for j in 0..3 {
            assert!((h.value().at(&[hd, 0, j]) - v.at(&[hd, 0, j])).abs() < 1e-15);
        }
    }

    let mut twin = KvCache::new();
    let k0 = kv.narrow(1, 0, 1).unwrap();
    twin.append(k0.clone(), vv.narrow(1, 0, 1).unwrap()).unwrap();
    twin.append(k0, vv.narrow(1, 1, 1).unwrap()).unwrap();
    let h = softmax_attention(&q, &twin).unwrap();
    for hd in 0..2 {
        for j in 0..3 {
            let mean = 0.5 * (v.at(&[hd, 0, j]) + v.at(&[hd, 1, j]));
            assert!((h.value().at(&[hd, 0, j]) - mean).abs() < 1e-12);
        }
    }

    let full = KvCache::from_prefix(kv, vv).unwrap();
    assert_eq!(full.len(), 5);
    let h = softmax_attention(&q, &full).unwrap();
    for hd in 0..2 {
        let qh = head(q.value(), hd);
        let oracle = naive_attention(&qh, &head(&k, hd), &head(&v, hd), |_, _| true);
        assert!(max_diff(&head(h.value(), hd), &oracle) < 1e-10);
    }
    assert!(softmax_attention(&q, &KvCache::new()).is_err());
}

#[test]
fn swa_cache_cardinality_and_eviction() {
    let tape = Tape::new();
    let (w, ns) = (5, 3);
    let (k, v) = kv_entries(1, 40, 2, 2, 7);
    let (kv, vv) = (tape.constant(k), tape.constant(v));
    let mut c = SwaCache::new(w, ns).unwrap();
    assert!(c.is_empty());
    for t in 1..=40usize {
        c.append(kv.narrow(1, t - 1, 1).unwrap(), vv.narrow(1, t - 1, 1).unwrap()).unwrap();
        let expect = t.min(ns) + t.saturating_sub(ns).min(w);
        assert_eq!(c.len(), expect, "t={t}");
        assert_eq!(c.stored_scalars(), expect * 4);
        let mut pos: Vec<usize> = (0..t.min(ns)).collect();
        pos.extend(t.saturating_sub(w).max(ns)..t);
        assert_eq!(c.positions(), pos);
        // prefix construction agrees with stepwise appends
        let pre = SwaCache::from_prefix(w, ns, &kv.narrow(1, 0, t).unwrap(), &vv.narrow(1, 0, t).unwrap()).unwrap();
        assert_eq!(pre.positions(), pos);
    }
}

#[test]
fn swa_matches_full_attention_before_eviction_bitwise() {
    let tape = Tape::new();
    let (w, ns) = (4, 2);
    let (k, v) = kv_entries(2, 6, 4, 3, 8);
    let (kv, vv) = (tape.constant(k), tape.constant(v));
    let mut r = rng(9);
    let mut full = KvCache::new();
    let mut swa = SwaCache::new(w, ns).unwrap();
    for t in 0..w + ns {
        let (kt, vt) = (kv.narrow(1, t, 1).unwrap(), vv.narrow(1, t, 1).unwrap());
        full.append(kt.clone(), vt.clone()).unwrap();
        swa.append(kt, vt).unwrap();
        let q = tape.constant(rand_t(&[2, 1, 4], -1.0, 1.0, &mut r));
        let a = softmax_attention(&q, &full).unwrap();
        let b = swa_attention(&q, &swa).unwrap();
        assert_eq!(a.value(), b.value());
    }
}

#[test]
fn swa_after_eviction_matches_masked_oracle() {
    let tape = Tape::new();
    let (w, ns) = (4, 2);
    let t_len = w + ns + 3;
    let (k, v) = kv_entries(2, t_len, 4, 3, 10);
    let (kv, vv) = (tape.constant(k.clone()), tape.constant(v.clone()));
    let mut swa = SwaCache::new(w, ns).unwrap();
    for t in 0..t_len {
        swa.append(kv.narrow(1, t, 1).unwrap(), vv.narrow(1, t, 1).unwrap()).unwrap();
    }
    let mut r = rng(11);
    let q = tape.constant(rand_t(&[2, 1, 4], -1.0, 1.0, &mut r));
    let h = swa_attention(&q, &swa).unwrap();
    for hd in 0..2 {
        let oracle = naive_attention(&head(q.value(), hd), &head(&k, hd), &head(&v, hd), |_, s| {
            s < ns || s >= t_len - w
        });
        assert!(max_diff(&head(h.value(), hd), &oracle) < 1e-10);
    }
}

#[test]
fn swa_with_degenerate_window_is_full_attention() {
    let tape = Tape::new();
    let t_len = 12;
    let (k, v) = kv_entries(2, t_len, 4, 3, 12);
    let (kv, vv) = (tape.constant(k), tape.constant(v));
    let mut r = rng(13);
    let mut full = KvCache::new();
    let mut swa = SwaCache::new(t_len, 0).unwrap();
    for t in 0..t_len {
        let (kt, vt) = (kv.narrow(1, t, 1).unwrap(), vv.narrow(1, t, 1).unwrap());
        full.append(kt.clone(), vt.clone()).unwrap();
        swa.append(kt, vt).unwrap();
        let q = tape.constant(rand_t(&[2, 1, 4], -1.0, 1.0, &mut r));
        assert_eq!(
            softmax_attention(&q, &full).unwrap().value(),
            swa_attention(&q, &swa).unwrap().value()
        );
    }
}

#[test]
fn parallel_attention_matches_masked_oracles() {
    let mut r = rng(14);
    for &(t_len, window, ns) in &[(1, None, 0), (7, None, 0), (130, None, 0), (150, Some(20), 3), (70, Some(1), 0), (90, Some(64), 4)] {
        let tape = Tape::new();
        let q = rand_t(&[2, t_len, 4], -1.5, 1.5, &mut r);
        let (k, v) = kv_entries(2, t_len, 4, 3, t_len as u64);
        let out = attention_parallel(
            &tape.constant(q.clone()),
            &tape.constant(k.clone()),
            &tape.constant(v.clone()),
            window,
            ns,
        )
        .unwrap();
        for hd in 0..2 {
            let oracle = naive_attention(&head(&q, hd), &head(&k, hd), &head(&v, hd), |t, s| {
                s <= t && window.map_or(true, |w| t - s < w || s < ns)
            });
            assert!(max_diff(&head(out.value(), hd), &oracle) < 1e-10, "T={t_len} W={window:?}");
        }
    }
}

// ------------------------------------------------------------ linear attention

#[test]
fn linear_attention_first_step_returns_value() {
    let tape = Tape::new();
    let mut r = rng(15);
    let fq = tape.constant(rand_t(&[2, 4], -2.0, 2.0, &mut r)).softmax().unwrap();
    let fk = tape.constant(rand_t(&[2, 4], -2.0, 2.0, &mut r)).softmax().unwrap();
    let v = tape.constant(rand_t(&[2, 3], -1.0, 1.0, &mut r));
    let st = LinearState::zeros(&tape, 2, 4, 3);
    let (h, _) = linear_attention_step(&st, &fq, &fk, &v).unwrap();
    assert!(h.value().max_abs_diff(v.value()) < 1e-14);
}

#[test]
fn linear_attention_one_hot_features_accumulate_by_hand() {
    let tape = Tape::new();
    let j = 1;
    let one_hot = tape.constant(Tensor::from_fn(&[1, 3], |i| if i == j { 1.0 } else { 0.0 }));
    let vals = [[1.0, -2.0], [0.5, 4.0], [3.0, 0.0]];
    let mut st = LinearState::zeros(&tape, 1, 3, 2);
    let mut acc = [0.0, 0.0];
    for (t, vt) in vals.iter().enumerate() {
        let v = tape.constant(Tensor::from_f64_slice(&[1, 2], vt).unwrap());
        let (h, next) = linear_attention_step(&st, &one_hot, &one_hot, &v).unwrap();
        acc[0] += vt[0];
        acc[1] += vt[1];
        let n = (t + 1) as f64;
        assert!((h.value().data()[0] - acc[0] / n).abs() < 1e-14);
        assert!((h.value().data()[1] - acc[1] / n).abs() < 1e-14);
        assert_eq!(next.s.value().at(&[0, j, 0]), acc[0]);
        assert_eq!(next.z.value().data(), &[0.0, n, 0.0]);
        st = next;
    }
}

#[test]
fn linear_attention_matches_quadratic_form() {
    let tape = Tape::new();
    let mut r = rng(16);
    let t_len = 6;
    let fq = rand_features(2, t_len, 4, &mut r);
    let fk = rand_features(2, t_len, 4, &mut r);
    let v = rand_t(&[2, t_len, 3], -1.0, 1.0, &mut r);
    let mut st = LinearState::zeros(&tape, 2, 4, 3);
    let mut outs: Vec<Vec<Series>> = vec![vec![]; 2];
    for t in 0..t_len {
        let row = |x: &Tensor<f64>, d: usize| tape.constant(x.clone()).narrow(1, t, 1).unwrap().reshape(&[2, d]).unwrap();
        let (h, next) = linear_attention_step(&st, &row(&fq, 4), &row(&fk, 4), &row(&v, 3)).unwrap();
        for (hd, o) in outs.iter_mut().enumerate() {
            o.push(vec![h.value().row(hd).to_vec()]);
        }
        st = next;
    }
    for hd in 0..2 {
        let (q, k, vv) = (head(&fq, hd), head(&fk, hd), head(&v, hd));
        for t in 0..t_len {
            let w: Vec<f64> = (0..=t).map(|s| dot(&q[t], &k[s])).collect();
            let z: f64 = w.iter().sum();
            let oracle: Vec<f64> = (0..3).map(|j| (0..=t).map(|s| w[s] * vv[s][j]).sum::<f64>() / z).collect();
            assert!(max_diff(&outs[hd][t], &vec![oracle]) < 1e-8);
        }
    }
}

// ---------------------------------------------------------------------- mLSTM

struct Seq {
    fq: Tensor<f64>,
    fk: Tensor<f64>,
    v: Tensor<f64>,
    i_pre: Tensor<f64>,
    f_pre: Tensor<f64>,
}

fn rand_seq(h: usize, t: usize, dk: usize, dv: usize, gate_scale: f64, seed: u64) -> Seq {
    let mut r = rng(seed);
    Seq {
        fq: rand_features(h, t, dk, &mut r),
        fk: rand_features(h, t, dk, &mut r),
        v: rand_t(&[h, t, dv], -1.0, 1.0, &mut r),
        i_pre: rand_t(&[h, t], -gate_scale, gate_scale, &mut r),
        f_pre: rand_t(&[h, t], -gate_scale, gate_scale + 2.0, &mut r),
    }
}

/// Runs `mlstm_step` over every position; returns `[H, T, d_v]` and the final state.
fn run_steps<'t>(
    tape: &'t Tape<f64>,
    s: &Seq,
    unit_gates: bool,
) -> (Tensor<f64>, MlstmState<'t, f64>) {
    let (h, t_len, dk) = (s.fq.shape()[0], s.fq.shape()[1], s.fq.shape()[2]);
    let dv = s.v.shape()[2];
    let mut st = MlstmState::zeros(tape, h, dk, dv);
    let mut outs = Vec::new();
    for t in 0..t_len {
        let row = |x: &Tensor<f64>, shape: &[usize]| {
            tape.constant(x.clone()).narrow(1, t, 1).unwrap().reshape(shape).unwrap()
        };
        let (it, fl) = if unit_gates {
            (tape.constant(Tensor::zeros(&[h])), tape.constant(Tensor::zeros(&[h])))
        } else {
            (row(&s.i_pre, &[h]), row(&s.f_pre, &[h]).log_sigmoid().unwrap())
        };
        let (out, next) = mlstm_step(&st, &row(&s.fq, &[h, dk]), &row(&s.fk, &[h, dk]), &row(&s.v, &[h, dv]), &it, &fl).unwrap();
        outs.push(out.reshape(&[h, 1, dv]).unwrap());
        st = next;
    }
    (Var::concat(&outs, 1).unwrap().value().clone(), st)
}

fn run_parallel<'t>(tape: &'t Tape<f64>, s: &Seq, chunk: usize) -> (Tensor<f64>, MlstmState<'t, f64>) {
    let (h, _, dk) = (s.fq.shape()[0], s.fq.shape()[1], s.fq.shape()[2]);
    let c = |x: &Tensor<f64>| tape.constant(x.clone());
    let init = MlstmState::zeros(tape, h, dk, s.v.shape()[2]);
    let fl = c(&s.f_pre).log_sigmoid().unwrap();
    let (out, st) = mlstm_parallel(&c(&s.fq), &c(&s.fk), &c(&s.v), &c(&s.i_pre), &fl, chunk, &init).unwrap();
    (out.value().clone(), st)
}

#[test]
fn mlstm_with_unit_gates_is_linear_attention() {
    let tape = Tape::new();
    let s = rand_seq(2, 10, 4, 3, 1.0, 17);
    let (gated, _) = run_steps(&tape, &s, true);
    let mut st = LinearState::zeros(&tape, 2, 4, 3);
    for t in 0..10 {
        let row = |x: &Tensor<f64>, d: usize| tape.constant(x.clone()).narrow(1, t, 1).unwrap().reshape(&[2, d]).unwrap();
        let (h, next) = linear_attention_step(&st, &row(&s.fq, 4), &row(&s.fk, 4), &row(&s.v, 3)).unwrap();
        for hd in 0..2 {
            for j in 0..3 {
                assert!((h.value().at(&[hd, j]) - gated.at(&[hd, t, j])).abs() < 1e-10);
            }
        }
        st = next;
    }
}

#[test]
fn mlstm_full_forget_is_memoryless() {
    let tape = Tape::new();
    let mut s = rand_seq(2, 6, 4, 3, 1.0, 18);
    s.f_pre = Tensor::full(&[2, 6], -60.0);
    let (out, _) = run_steps(&tape, &s, false);
    for hd in 0..2 {
        for t in 0..6 {
            for j in 0..3 {
                assert!((out.at(&[hd, t, j]) - s.v.at(&[hd, t, j])).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn mlstm_stabilized_matches_unstabilized_reference() {
    let tape = Tape::new();
    let s = rand_seq(2, 8, 4, 3, 1.0, 19);
    let (out, _) = run_steps(&tape, &s, false);
    for hd in 0..2 {
        let i_pre: Vec<f64> = (0..8).map(|t| s.i_pre.at(&[hd, t])).collect();
        let f_pre: Vec<f64> = (0..8).map(|t| s.f_pre.at(&[hd, t])).collect();
        let oracle = naive_mlstm(&head(&s.fq, hd), &head(&s.fk, hd), &head(&s.v, hd), &i_pre, &f_pre);
        assert!(max_diff(&head(&out, hd), &oracle) < 1e-8);
    }
}

#[test]
fn mlstm_state_size_is_constant() {
    let tape = Tape::new();
    let s = rand_seq(2, 30, 4, 3, 2.0, 20);
    let (_, st) = run_steps(&tape, &s, false);
    assert_eq!(st.stored_scalars(), MlstmState::zeros(&tape, 2, 4, 3).stored_scalars());
    assert_eq!(st.stored_scalars(), 2 * (4 * 3 + 4 + 1));
    assert!(st.s.value().is_finite() && st.z.value().is_finite() && st.m.value().is_finite());
}

#[test]
fn mlstm_parallel_equals_recurrence_for_all_chunk_sizes() {
    for &t_len in &[1usize, 2, 5, 17, 33, 64] {
        let s = rand_seq(2, t_len, 4, 3, 3.0, 100 + t_len as u64);
        let tape = Tape::new();
        let (rec, rst) = run_steps(&tape, &s, false);
        for chunk in [1, 3, 4, 8, t_len] {
            let (par, pst) = run_parallel(&tape, &s, chunk);
            let d = rec.max_abs_diff(&par);
            assert!(d < 1e-10, "T={t_len} chunk={chunk}: {d:e}");
            assert!(rst.s.value().max_abs_diff(pst.s.value()) < 1e-10);
            assert!(rst.z.value().max_abs_diff(pst.z.value()) < 1e-10);
            assert!(rst.m.value().max_abs_diff(pst.m.value()) < 1e-10);
        }
    }
}

#[test]
fn mlstm_parallel_single_chunk_in_32_bit() {
    let s = rand_seq(2, 24, 4, 3, 3.0, 21);
    let tape = Tape::<f64>::new();
    let (rec, _) = run_steps(&tape, &s, false);
    let t32 = Tape::<f32>::new();
    let c = |x: &Tensor<f64>| t32.constant(x.cast::<f32>());
    let init = MlstmState::zeros(&t32, 2, 4, 3);
    let fl = c(&s.f_pre).log_sigmoid().unwrap();
    for chunk in [24, 5] {
        let (out, _) = mlstm_parallel(&c(&s.fq), &c(&s.fk), &c(&s.v), &c(&s.i_pre), &fl, chunk, &init).unwrap();
        assert!(out.value().cast::<f64>().max_abs_diff(&rec) < 1e-6);
    }
}

#[test]
fn mlstm_survives_large_input_gates() {
    // unstabilized exp(80) overflows f32; the stabilized form must not
    let t32 = Tape::<f32>::new();
    let mut s = rand_seq(1, 12, 4, 3, 1.0, 22);
    s.i_pre = Tensor::full(&[1, 12], 80.0);
    let c = |x: &Tensor<f64>| t32.constant(x.cast::<f32>());
    let init = MlstmState::zeros(&t32, 1, 4, 3);
    let fl = c(&s.f_pre).log_sigmoid().unwrap();
    let (out, st) = mlstm_parallel(&c(&s.fq), &c(&s.fk), &c(&s.v), &c(&s.i_pre), &fl, 5, &init).unwrap();
    assert!(out.value().is_finite() && st.s.value().is_finite());
}

// ---------------------------------------------------------------------- gates

#[test]
fn output_gate_examples() {
    let cfg = small_cfg();
    let tape = Tape::new();
    let mut r = rng(23);
    let g = cfg.gate_dim();
    let gi_t = rand_t(&[2, 5, g], -1.0, 1.0, &mut r);
    let gi = GateInput::Heads(tape.constant(gi_t.clone()));
    let zero = output_gate(&gi, &tape.constant(Tensor::zeros(&[2, g]))).unwrap();
    assert!(zero.value().data().iter().all(|&o| o == 0.5));

    let w = rand_t(&[2, g], -1.0, 1.0, &mut r);
    let o = output_gate(&gi, &tape.constant(w.clone())).unwrap();
    for h in 0..2 {
        for t in 0..5 {
            let z: f64 = (0..g).map(|j| gi_t.at(&[h, t, j]) * w.at(&[h, j])).sum();
            assert!((o.value().at(&[h, t]) - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
        }
    }
    // scaling the weights along the input direction drives the gate to 1
    let one = Tensor::from_fn(&[1, 1, g], |j| gi_t.at(&[0, 0, j]));
    let gi1 = GateInput::Heads(tape.constant(one.clone()));
    let mut last = 0.0;
    for scale in [0.0, 0.5, 1.0, 4.0, 16.0, 64.0] {
        let w = tape.constant(one.clone().reshape(&[1, g]).unwrap().map(|x| x * scale));
        let o = output_gate(&gi1, &w).unwrap().item();
        assert!(o >= last && o < 1.0 + 1e-15);
        last = o;
    }
    assert!(last > 1.0 - 1e-9);
}

#[test]
fn merged_gate_projection_matches_concat_gate() {
    let cfg = small_cfg();
    let mut p = rand_params(MixerKind::Hybrid, &cfg, 24);
    let tape = Tape::new();
    let mut r = rng(25);
    let x = rand_t(&[100, cfg.d_model], -1.0, 1.0, &mut r);
    let xv = tape.constant(x.clone());
    let pv = as_vars(&tape, &p);
    let (q, k, v) = project_qkv(&xv, &pv, &cfg).unwrap();
    let gi = GateInput::assemble(cfg.gate_input_mode, &xv, &q, &k, &v).unwrap();
    let direct = output_gate(&gi, &pv.gates.as_ref().unwrap().w_og).unwrap();
    let m = merge_gate_projection(&cfg, &p).unwrap();
    let merged = xv.matmul(&tape.constant(m.clone())).unwrap().sigmoid().unwrap().transpose().unwrap();
    assert!(direct.value().max_abs_diff(merged.value()) < 1e-10);

    let g = p.gates.as_mut().unwrap();
    g.w_og = Tensor::zeros(g.w_og.shape());
    assert!(merge_gate_projection(&cfg, &p).unwrap().data().iter().all(|&a| a == 0.0));

    let mut p2 = rand_params(MixerKind::Hybrid, &cfg, 26);
    p2.w_k = Tensor::zeros(p2.w_k.shape());
    p2.w_v = Tensor::zeros(p2.w_v.shape());
    let m = merge_gate_projection(&cfg, &p2).unwrap();
    let w_og = &p2.gates.as_ref().unwrap().w_og;
    for h in 0..cfg.n_heads {
        for row in 0..cfg.d_model {
            let e: f64 = (0..cfg.d_qk).map(|j| p2.w_q.at(&[row, h * cfg.d_qk + j]) * w_og.at(&[h, j])).sum();
            assert!((m.at(&[row, h]) - e).abs() < 1e-14);
        }
    }
    let lay = MixerConfig { gate_input_mode: GateInputMode::LayerInput, ..cfg };
    assert!(matches!(merge_gate_projection(&lay, &p2), Err(Error::Config(_))));
}

#[test]
fn merging_all_gates_preserves_the_layer() {
    let cfg = small_cfg();
    let p = rand_params(MixerKind::Hybrid, &cfg, 27);
    let (mcfg, mp) = merge_all_gates(&cfg, &p).unwrap();
    assert_eq!(mcfg.gate_input_mode, GateInputMode::LayerInput);
    let tape = Tape::new();
    let mut r = rng(28);
    let x = tape.constant(rand_t(&[9, cfg.d_model], -1.0, 1.0, &mut r));
    let a = mixer_forward(MixerKind::Hybrid, &cfg, &as_vars(&tape, &p), &x, &Overrides::default()).unwrap();
    let b = mixer_forward(MixerKind::Hybrid, &mcfg, &as_vars(&tape, &mp), &x, &Overrides::default()).unwrap();
    assert!(a.out.value().max_abs_diff(b.out.value()) < 1e-10);
}

// --------------------------------------------------------------------- hybrid

fn step_all<'t>(
    tape: &'t Tape<f64>,
    kind: MixerKind,
    cfg: &MixerConfig,
    p: &HybridLayerParams<Var<'t, f64>>,
    x: &Tensor<f64>,
    ov: &Overrides,
) -> Vec<xlin_core::mixers::StepOutput<'t, f64>> {
    let mut cache = LayerCache::new(kind, cfg, tape).unwrap();
    (0..x.shape()[0])
        .map(|t| {
            let xt = tape.constant(x.clone()).narrow(0, t, 1).unwrap();
            mixer_step(kind, cfg, p, &xt, &mut cache, ov).unwrap()
        })
        .collect()
}

#[test]
fn forced_output_gate_selects_a_branch_exactly() {
    let cfg = small_cfg();
    let p = rand_params(MixerKind::Hybrid, &cfg, 29);
    let tape = Tape::new();
    let pv = as_vars(&tape, &p);
    let attn_only = HybridLayerParams {
        phi_q: None,
        phi_k: None,
        gates: None,
        ..pv.clone()
    };
    let mut r = rng(30);
    let x = rand_t(&[10, cfg.d_model], -1.0, 1.0, &mut r);
    let o = |c: f64| Overrides {
        output_gate: Some(c),
        unit_gates: false,
    };
    let hy1 = step_all(&tape, MixerKind::Hybrid, &cfg, &pv, &x, &o(1.0));
    let ml = step_all(&tape, MixerKind::MlstmOnly, &cfg, &pv, &x, &o(1.0));
    let hy0 = step_all(&tape, MixerKind::Hybrid, &cfg, &pv, &x, &o(0.0));
    let sw = step_all(&tape, MixerKind::SwaOnly, &cfg, &attn_only, &x, &Overrides::default());
    for t in 0..10 {
        assert_eq!(hy1[t].out.value(), ml[t].out.value());
        assert_eq!(hy0[t].out.value(), sw[t].out.value());
    }
}

#[test]
fn fused_output_is_a_convex_combination() {
    let cfg = MixerConfig { d_v: 1, ..small_cfg() };
    let p = rand_params(MixerKind::Hybrid, &cfg, 31);
    let tape = Tape::new();
    let pv = as_vars(&tape, &p);
    let mut r = rng(32);
    let x = rand_t(&[12, cfg.d_model], -1.0, 1.0, &mut r);
    let ov = |c: Option<f64>| Overrides {
        output_gate: c,
        unit_gates: false,
    };
    let mix = step_all(&tape, MixerKind::Hybrid, &cfg, &pv, &x, &ov(None));
    let a = step_all(&tape, MixerKind::Hybrid, &cfg, &pv, &x, &ov(Some(1.0)));
    let b = step_all(&tape, MixerKind::Hybrid, &cfg, &pv, &x, &ov(Some(0.0)));
    for t in 0..12 {
        for h in 0..cfg.n_heads {
            let (m, lo, hi) = (
                mix[t].pre_out.value().data()[h],
                a[t].pre_out.value().data()[h],
                b[t].pre_out.value().data()[h],
            );
            assert!(m >= lo.min(hi) - 1e-15 && m <= lo.max(hi) + 1e-15);
            let o = mix[t].gate.as_ref().unwrap().value().data()[h];
            assert!((m - (o * lo + (1.0 - o) * hi)).abs() < 1e-12);
        }
    }
}

#[test]
fn cache_desync_is_a_contract_error() {
    let cfg = small_cfg();
    let p = rand_params(MixerKind::Hybrid, &cfg, 33);
    let tape = Tape::new();
    let pv = as_vars(&tape, &p);
    let x = tape.constant(Tensor::zeros(&[1, cfg.d_model]));
    let mut wrong = LayerCache::new(MixerKind::SoftmaxFull, &cfg, &tape).unwrap();
    let err = mixer_step(MixerKind::Hybrid, &cfg, &pv, &x, &mut wrong, &Overrides::default());
    assert!(matches!(err, Err(Error::Contract(_))));
    let mut cache = LayerCache::new(MixerKind::Hybrid, &cfg, &tape).unwrap();
    cache.swa.as_mut().unwrap().append(
        tape.constant(Tensor::zeros(&[2, 1, 4])),
        tape.constant(Tensor::zeros(&[2, 1, 3])),
    ).unwrap();
    let err = mixer_step(MixerKind::Hybrid, &cfg, &pv, &x, &mut cache, &Overrides::default());
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn parallel_and_stepwise_layers_agree_for_every_kind() {
    let kinds = [
        MixerKind::SoftmaxFull,
        MixerKind::SwaOnly,
        MixerKind::LinearAttn,
        MixerKind::MlstmOnly,
        MixerKind::Hybrid,
    ];
    for mode in [GateInputMode::ConcatQkv, GateInputMode::LayerInput] {
        let cfg = MixerConfig { gate_input_mode: mode, ..small_cfg() };
        for kind in kinds {
            let p = rand_params(kind, &cfg, 34);
            let tape = Tape::new();
            let pv = as_vars(&tape, &p);
            let mut r = rng(35);
            let x = rand_t(&[11, cfg.d_model], -1.0, 1.0, &mut r);
            let par = mixer_forward(kind, &cfg, &pv, &tape.constant(x.clone()), &Overrides::default()).unwrap();
            let steps = step_all(&tape, kind, &cfg, &pv, &x, &Overrides::default());
            for (t, s) in steps.iter().enumerate() {
                let row = par.out.narrow(0, t, 1).unwrap();
                let d = row.value().max_abs_diff(s.out.value());
                assert!(d < 1e-10, "{kind:?} t={t}: {d:e}");
            }
            // continuing from a prefill cache matches continuing stepwise
            let mut cache = LayerCache::from_prefill(kind, &cfg, &mixer_forward(kind, &cfg, &pv, &tape.constant(x.narrow_rows(7)), &Overrides::default()).unwrap()).unwrap();
            assert_eq!(cache.position(), 7);
            for t in 7..11 {
                let xt = tape.constant(x.clone()).narrow(0, t, 1).unwrap();
                let s = mixer_step(kind, &cfg, &pv, &xt, &mut cache, &Overrides::default()).unwrap();
                assert!(s.out.value().max_abs_diff(steps[t].out.value()) < 1e-10, "{kind:?} resume t={t}");
            }
        }
    }
}

trait NarrowRows {
    fn narrow_rows(&self, n: usize) -> Tensor<f64>;
}

impl NarrowRows for Tensor<f64> {
    fn narrow_rows(&self, n: usize) -> Tensor<f64> {
        let w = self.shape()[1];
        Tensor::new(vec![n, w], self.data()[..n * w].to_vec()).unwrap()
    }
}

#[test]
fn feature_maps_are_positive_and_normalized() {
    let tape = Tape::new();
    let mut r = rng(36);
    for _ in 0..20 {
        let scale = r.gen_range(0.1..20.0);
        let x = tape.constant(rand_t(&[3, 5, 4], -scale, scale, &mut r));
        let m = tape.constant(rand_t(&[3, 4, 4], -2.0, 2.0, &mut r));
        let f = feature_map(&x, Some(&m)).unwrap();
        for row in f.value().data().chunks(4) {
            assert!(row.iter().all(|&a| a > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

// ------------------------------------------------------------------ gradients

fn gradcheck_layer(kind: MixerKind, stepwise: bool, seed: u64) -> gradcheck::GradCheckReport {
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
    let p = rand_params(kind, &cfg, seed);
    let names: Vec<&str> = p.named().iter().map(|(n, _)| *n).collect();
    let inputs: Vec<Tensor<f64>> = p.named().iter().map(|(_, t)| (*t).clone()).collect();
    let mut r = rng(seed + 1);
    let x = rand_t(&[5, cfg.d_model], -1.0, 1.0, &mut r);
    gradcheck::check(
        |tape, vars| -> Result<Var<'_, f64>> {
            let pv = HybridLayerParams::from_fn(kind, |name| -> Result<_> {
                let i = names.iter().position(|n| *n == name).unwrap();
                Ok(vars[i].clone())
            })?;
            let xv = tape.constant(x.clone());
            if stepwise {
                let mut cache = LayerCache::new(kind, &cfg, tape)?;
                let mut total: Option<Var<'_, f64>> = None;
                for t in 0..5 {
                    let s = mixer_step(kind, &cfg, &pv, &xv.narrow(0, t, 1)?, &mut cache, &Overrides::default())?;
                    let l = weighted_sum(&s.out, 40 + t as u64)?;
                    total = Some(match total {
                        Some(a) => a.add(&l)?,
                        None => l,
                    });
                }
                Ok(total.unwrap())
            } else {
                weighted_sum(&mixer_forward(kind, &cfg, &pv, &xv, &Overrides::default())?.out, 41)
            }
        },
        &inputs,
        1e-5,
    )
    .unwrap()
}

#[test]
fn hybrid_step_gradients_match_finite_differences() {
    let rep = gradcheck_layer(MixerKind::Hybrid, true, 50);
    assert_eq!(rep.checked, param_shapes(MixerKind::Hybrid, &MixerConfig {
        d_model: 4, n_heads: 2, d_qk: 2, d_v: 2, window: 2, n_sinks: 1, chunk_size: 2,
        rope_base: 100.0, gate_input_mode: GateInputMode::ConcatQkv,
    }).iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>());
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn parallel_layer_gradients_match_finite_differences() {
    for kind in [MixerKind::SoftmaxFull, MixerKind::SwaOnly, MixerKind::LinearAttn, MixerKind::MlstmOnly, MixerKind::Hybrid] {
        let rep = gradcheck_layer(kind, false, 60);
        assert!(rep.passes(1e-4), "{kind:?}: {rep:?}");
    }
}

#[test]
fn mlstm_parallel_input_gradients_match_finite_differences() {
    let s = rand_seq(2, 7, 3, 2, 1.5, 70);
    let inputs = vec![s.fq.clone(), s.fk.clone(), s.v.clone(), s.i_pre.clone(), s.f_pre.clone()];
    let rep = gradcheck::check(
        |tape, v| {
            let init = MlstmState::zeros(tape, 2, 3, 2);
            let fl = v[4].log_sigmoid()?;
            let (out, st) = mlstm_parallel(&v[0], &v[1], &v[2], &v[3], &fl, 3, &init)?;
            weighted_sum(&out, 1)?.add(&weighted_sum(&st.s, 2)?)?.add(&weighted_sum(&st.z, 3)?)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}
