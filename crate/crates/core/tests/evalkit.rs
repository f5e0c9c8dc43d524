use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xlin_core::evalkit::{
    alpha_star, curve_csv, curve_export, fixtures, gate_statistics, indicator, median, recovery_rate, summarize,
    threshold, uniform_grid, win_tie_rate, ScoreRow, ScoreTable,
};
use xlin_core::mixers::{GateInputMode, MixerConfig, MixerKind};
use xlin_core::model::{init_student_from_teacher, Model, ModelConfig};
use xlin_core::Tape;

fn table(name: &str) -> ScoreTable {
    fixtures::table(name).unwrap().unwrap()
}

fn row<'a>(t: &'a ScoreTable, name: &str) -> &'a ScoreRow {
    t.rows().iter().find(|r| r.benchmark == name).unwrap()
}

#[test]
fn recovery_rates() {
    let llama = table("llama_base");
    assert!((recovery_rate(row(&llama, "MMLU")).unwrap() - 1.003).abs() < 5e-4);
    let gsm = recovery_rate(row(&llama, "GSM8K")).unwrap();
    assert!((gsm - 1.194).abs() < 1e-3, "{gsm}");
    assert_eq!(recovery_rate(&ScoreRow::new("x", 42.5, 42.5)).unwrap(), 1.0);
    assert!(recovery_rate(&ScoreRow::new("x", 0.0, 3.0)).is_err());
}

#[test]
fn indicator_definition() {
    let he = ScoreRow::new("HumanEval+", 29.9, 23.8);
    assert!(!indicator(&he, 0.0).unwrap());
    assert!(indicator(&he, 0.21).unwrap());
    assert!((threshold(&he) - (1.0 - 23.8 / 29.9)).abs() < 1e-15);
    assert!((threshold(&he) - 0.204).abs() < 1e-3);
    let zero = ScoreRow::new("z", 0.0, 0.0);
    for a in [0.0, 0.3, 1.0] {
        assert!(indicator(&zero, a).unwrap());
    }
    let bad = ScoreRow::new("b", 90.0, 0.0);
    assert!(indicator(&bad, 1.0).unwrap());
    assert!(!indicator(&bad, 0.999).unwrap());
    assert!(indicator(&he, 1.5).is_err());
    assert!(indicator(&he, -0.1).is_err());
    // the literal inequality agrees away from the threshold itself
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let row = ScoreRow::new("r", r.gen_range(0.0..100.0), r.gen_range(0.0..100.0));
        let a: f64 = r.gen_range(0.0..1.0);
        if (a - threshold(&row)).abs() > 1e-12 {
            assert_eq!(indicator(&row, a).unwrap(), row.student >= (1.0 - a) * row.teacher);
        }
    }
}

#[test]
fn win_tie_rate_examples() {
    let gen = table("llama_base").filter_domain("generation");
    assert_eq!(gen.len(), 7);
    assert!((win_tie_rate(&gen, 0.0).unwrap() - 4.0 / 7.0).abs() < 1e-15);
    assert_eq!(win_tie_rate(&gen, 1.0).unwrap(), 1.0);
    let same = ScoreTable::new(vec![ScoreRow::new("a", 3.0, 3.0), ScoreRow::new("b", 0.5, 0.5)]).unwrap();
    assert_eq!(win_tie_rate(&same, 0.0).unwrap(), 1.0);
    let empty = ScoreTable::new(vec![]).unwrap();
    assert!(win_tie_rate(&empty, 0.5).is_err());
    assert!(alpha_star(&empty).is_err());
}

#[test]
fn llama_base_alpha_star_is_zero() {
    let t = table("llama_base");
    assert_eq!(t.len(), 13);
    assert_eq!(win_tie_rate(&t, 0.0).unwrap(), 8.0 / 13.0);
    assert_eq!(alpha_star(&t).unwrap(), 0.0);
}

#[test]
fn olmo_base_alpha_star() {
    let t = table("olmo_base");
    let a = alpha_star(&t).unwrap();
    assert!((0.010..=0.011).contains(&a), "{a}");
    // oracle: the seventh smallest of the thirteen thresholds is MMLU's
    let mut th: Vec<f64> = t
        .rows()
        .iter()
        .map(|r| if r.student >= r.teacher { 0.0 } else { (r.teacher - r.student) / r.teacher })
        .collect();
    th.sort_by(|x, y| x.partial_cmp(y).unwrap());
    assert!((a - th[6]).abs() < 1e-15);
    assert!((a - (1.0 - 65.7 / 66.4)).abs() < 1e-15);
    assert!(win_tie_rate(&t, a).unwrap() >= 0.5);
    assert!(win_tie_rate(&t, a - 1e-9).unwrap() < 0.5);
}

#[test]
fn all_wins_give_zero() {
    let t = ScoreTable::new(vec![ScoreRow::new("a", 1.0, 2.0), ScoreRow::new("b", 5.0, 5.0)]).unwrap();
    assert_eq!(alpha_star(&t).unwrap(), 0.0);
    let s = summarize(&t).unwrap();
    assert_eq!((s.alpha_star, s.c0, s.n_benchmarks), (0.0, 1.0, 2));
}

#[test]
fn lolcats_thresholds_do_not_reach_one() {
    // the sorted-threshold value over these rows stays below 1.0
    let t = table("lolcats_llama_base");
    let gen = alpha_star(&t.filter_domain("generation")).unwrap();
    assert!((gen - (1.0 - 3.87 / 48.4)).abs() < 1e-12, "{gen}");
    assert!((gen - 0.92).abs() < 1e-2);
    let all = alpha_star(&t).unwrap();
    assert!((all - 0.83).abs() < 1e-2, "{all}");
}

#[test]
fn generation_curve_jumps_only_at_thresholds() {
    let gen = table("llama_base").filter_domain("generation");
    let mut jumps: Vec<f64> = gen.rows().iter().map(threshold).collect();
    jumps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    jumps.dedup();
    let want = [0.0, 0.0808, 0.1157, 0.204];
    assert_eq!(jumps.len(), 4);
    for (j, w) in jumps.iter().zip(want) {
        assert!((j - w).abs() < 1e-3, "{j} vs {w}");
    }
    let grid = uniform_grid(10_000);
    let pts = curve_export(&gen, &grid).unwrap();
    for w in pts.windows(2) {
        assert!(w[1].c_alpha >= w[0].c_alpha);
        if w[1].c_alpha > w[0].c_alpha {
            assert!(jumps.iter().any(|&j| j > w[0].alpha && j <= w[1].alpha));
        }
    }
    assert_eq!(pts[0].c_alpha, 4.0 / 7.0);
    let ends = curve_export(&gen, &[0.0, 1.0]).unwrap();
    assert_eq!((ends[0].c_alpha, ends[1].c_alpha), (4.0 / 7.0, 1.0));
    let csv = curve_csv(&ends);
    assert!(csv.starts_with("alpha,c_alpha\n0,0.5714"));
    assert!(curve_export(&gen, &[0.5, 0.2]).is_err());
}

fn random_table(r: &mut ChaCha8Rng) -> ScoreTable {
    let n = r.gen_range(1..20);
    ScoreTable::new(
        (0..n)
            .map(|i| {
                let t = if r.gen_bool(0.1) { 0.0 } else { r.gen_range(0.0..100.0) };
                ScoreRow::new(&format!("b{i}"), t, r.gen_range(0.0..100.0))
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn curves_are_monotone_on_random_tables() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let grid = uniform_grid(50);
    for _ in 0..1000 {
        let t = random_table(&mut r);
        let pts = curve_export(&t, &grid).unwrap();
        assert!(pts.windows(2).all(|w| w[1].c_alpha >= w[0].c_alpha));
        assert_eq!(pts.last().unwrap().c_alpha, 1.0);
        for p in &pts {
            let k = p.c_alpha * t.len() as f64;
            assert!((k - k.round()).abs() < 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn alpha_star_is_the_exact_infimum(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t = random_table(&mut r);
        let a = alpha_star(&t).unwrap();
        prop_assert!(win_tie_rate(&t, a).unwrap() >= 0.5);
        if a > 0.0 {
            let mut th: Vec<f64> = t.rows().iter().map(threshold).filter(|&x| x < a).collect();
            th.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let below = th.last().map_or(0.0, |&x| x.max(a - 1e-9));
            let eps_point = (a + below) / 2.0;
            prop_assert!(win_tie_rate(&t, eps_point.min(a - 1e-15)).unwrap() < 0.5);
        }
    }

    #[test]
    fn metrics_are_invariant_to_row_scaling(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t = random_table(&mut r);
        let scaled = ScoreTable::new(
            t.rows().iter().map(|x| ScoreRow::new(&x.benchmark, x.teacher * c, x.student * c)).collect(),
        ).unwrap();
        prop_assert!((alpha_star(&t).unwrap() - alpha_star(&scaled).unwrap()).abs() < 1e-12);
        let a: f64 = r.gen_range(0.0..1.0);
        let near = t.rows().iter().any(|x| (threshold(x) - a).abs() < 1e-9);
        if !near {
            prop_assert_eq!(win_tie_rate(&t, a).unwrap(), win_tie_rate(&scaled, a).unwrap());
        }
    }
}

#[test]
fn csv_validation() {
    let ok = "benchmark,teacher,student\nA, 1.5 ,2\nB,0,0\n";
    let t = ScoreTable::from_csv(ok.as_bytes()).unwrap();
    assert_eq!(t.len(), 2);
    assert_eq!(t.rows()[0].domain, None);
    assert!(ScoreTable::from_csv("bench,teacher,student\nA,1,2\n".as_bytes()).is_err());
    assert!(ScoreTable::from_csv("benchmark,teacher,student\nA,1,2\nA,3,4\n".as_bytes()).is_err());
    assert!(ScoreTable::from_csv("benchmark,teacher,student\nA,-1,2\n".as_bytes()).is_err());
    assert!(ScoreTable::from_csv("benchmark,teacher,student\nA,x,2\n".as_bytes()).is_err());
    for (name, _) in fixtures::ALL {
        assert!(table(name).len() >= 13, "{name}");
    }
}

// ------------------------------------------------------------------- gates

fn student(jitter: f64) -> Model<f64> {
    let cfg = ModelConfig {
        vocab_size: 15,
        n_layers: 2,
        mlp_hidden: 16,
        max_seq_len: 32,
        mixer_kind: MixerKind::SoftmaxFull,
        mixer: MixerConfig {
            d_model: 8,
            n_heads: 3,
            d_qk: 2,
            d_v: 2,
            window: 4,
            n_sinks: 0,
            chunk_size: 4,
            rope_base: 10000.0,
            gate_input_mode: GateInputMode::ConcatQkv,
        },
        norm_eps: 1e-6,
    };
    let teacher = Model::<f64>::init(cfg.clone(), 3).unwrap();
    let mut m = init_student_from_teacher(&teacher, &cfg.with_kind(MixerKind::Hybrid)).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    for i in 0..m.params.len() {
        if m.params.name_at(i).ends_with("w_og") {
            for x in m.params.tensor_at_mut(i).data_mut() {
                *x += r.gen_range(-jitter..=jitter);
            }
        }
    }
    m
}

#[test]
fn closed_gate_weights_give_one_half() {
    let m = student(0.0);
    let probes = vec![vec![1, 2, 3, 4, 5], vec![7, 7, 7]];
    let g = gate_statistics(&m, &probes).unwrap();
    assert_eq!(g.medians.len(), 2);
    assert!(g.medians.iter().flatten().all(|&x| x == 0.5));
    assert!(g.to_csv().starts_with("layer,head,median\n0,0,0.5\n"));
}

#[test]
fn gate_medians_match_a_sort_oracle() {
    let m = student(2.0);
    let probes = vec![vec![1, 2, 3, 4, 5, 9], vec![7, 3, 14]];
    let g = gate_statistics(&m, &probes).unwrap();
    let mut cells = vec![vec![Vec::new(); 3]; 2];
    for s in &probes {
        let tape = Tape::new();
        let tr = m.bind_frozen(&tape).unwrap().forward(s).unwrap();
        for l in 0..2 {
            let v = tr.gates[l].as_ref().unwrap().value();
            for h in 0..3 {
                for t in 0..s.len() {
                    cells[l][h].push(v.at(&[h, t]));
                }
            }
        }
    }
    for l in 0..2 {
        for h in 0..3 {
            let mut c = cells[l][h].clone();
            c.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // nine values: the fifth
            assert_eq!(c.len(), 9);
            assert_eq!(g.medians[l][h], c[4]);
            assert!(g.medians[l][h] > 0.0 && g.medians[l][h] < 1.0);
        }
    }
    assert_eq!(gate_statistics(&m, &probes).unwrap(), g);
    assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
}

#[test]
fn gate_statistics_need_an_output_gate() {
    let m = student(0.0);
    let teacher = Model::<f64>::init(m.config.with_kind(MixerKind::SoftmaxFull), 0).unwrap();
    assert!(gate_statistics(&teacher, &[vec![1, 2]]).is_err());
    assert!(gate_statistics(&m, &[]).is_err());
}

#[test]
fn accuracy_scores_against_hand_counts() {
    use xlin_core::corpus::RecallPair;
    use xlin_core::evalkit::{next_token_accuracy, recall_accuracy};
    use xlin_core::mixers::{GateInputMode, MixerConfig, MixerKind};
    use xlin_core::model::{Model, ModelConfig};
    use xlin_core::Tape;

    let cfg = ModelConfig {
        vocab_size: 7,
        n_layers: 1,
        mlp_hidden: 8,
        max_seq_len: 16,
        mixer_kind: MixerKind::SoftmaxFull,
        mixer: MixerConfig {
            d_model: 4,
            n_heads: 1,
            d_qk: 4,
            d_v: 4,
            window: 4,
            n_sinks: 0,
            chunk_size: 4,
            rope_base: 10000.0,
            gate_input_mode: GateInputMode::ConcatQkv,
        },
        norm_eps: 1e-6,
    };
    let m = Model::<f64>::init(cfg, 3).unwrap();
    let seq: Vec<u32> = vec![1, 4, 2, 6, 0, 3, 5, 5, 2];
    let tape = Tape::new();
    let logits = m.bind_frozen(&tape).unwrap().forward(&seq[..8]).unwrap().logits;
    let preds: Vec<usize> = logits
        .value()
        .data()
        .chunks(7)
        .map(|r| {
            let mut best = 0;
            for (i, &x) in r.iter().enumerate() {
                if x > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    let want = preds.iter().zip(&seq[1..]).filter(|(p, s)| **p == **s as usize).count() as f64 / 8.0;
    assert_eq!(next_token_accuracy(&m, &[seq.clone()]).unwrap(), want);

    let pairs: Vec<RecallPair> = [3usize, 6, 8]
        .iter()
        .map(|&a| RecallPair { seq: 0, key_pos: 0, answer_pos: a, key: 1, value: preds[a - 1] as u32 })
        .chain([RecallPair { seq: 0, key_pos: 0, answer_pos: 5, key: 1, value: (preds[4] as u32 + 1) % 7 }])
        .collect();
    assert_eq!(recall_accuracy(&m, &[seq.clone()], &pairs).unwrap(), 0.75);
    let bad = [RecallPair { seq: 1, ..pairs[0] }];
    assert!(recall_accuracy(&m, &[seq], &bad).is_err());
}
