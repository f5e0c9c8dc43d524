use xlin_core::complexity::{
    cache_accounting, instrumented_cache_scalars, loglog_slope, op_profile, run_bench, BenchMode, BenchOptions,
    Scenario,
};
use xlin_core::mixers::{GateInputMode, MixerConfig, MixerKind};
use xlin_core::model::{Model, ModelConfig};

const KINDS: [MixerKind; 5] = [
    MixerKind::SoftmaxFull,
    MixerKind::SwaOnly,
    MixerKind::LinearAttn,
    MixerKind::MlstmOnly,
    MixerKind::Hybrid,
];

fn cfg(kind: MixerKind, layers: usize, heads: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        n_layers: layers,
        mlp_hidden: 8,
        max_seq_len,
        mixer_kind: kind,
        mixer: MixerConfig {
            d_model: 4 * heads,
            n_heads: heads,
            d_qk: 4,
            d_v: 4,
            window: 8,
            n_sinks: 2,
            chunk_size: 16,
            rope_base: 10000.0,
            gate_input_mode: GateInputMode::ConcatQkv,
        },
        norm_eps: 1e-6,
    }
}

#[test]
fn analytic_cache_formula() {
    let c = cfg(MixerKind::SoftmaxFull, 2, 3, 64);
    assert_eq!(cache_accounting(&c, 0), 0);
    assert_eq!(cache_accounting(&c, 10), 10 * 2 * 3 * 8);
    let h = c.with_kind(MixerKind::Hybrid);
    let state = 2 * 3 * (16 + 4 + 1);
    assert_eq!(cache_accounting(&h, 0), state);
    let full = (8 + 2) * 2 * 3 * 8 + state;
    for t in [8 + 4, 4 * 8, 16 * 8, 1 << 20] {
        assert_eq!(cache_accounting(&h, t), full, "t={t}");
    }
    assert_eq!(cache_accounting(&c.with_kind(MixerKind::MlstmOnly), 1000), state);
    assert_eq!(cache_accounting(&c.with_kind(MixerKind::SwaOnly), 1000), 10 * 2 * 3 * 8);
}

#[test]
fn analytic_matches_instrumented() {
    for kind in KINDS {
        let c = cfg(kind, 2, 2, 160);
        let m = Model::<f64>::init(c.clone(), 3).unwrap();
        for t in [0, 1, 5, 8 + 4, 4 * 8, 16 * 8] {
            let live = instrumented_cache_scalars(&m, t, 9).unwrap();
            assert_eq!(live, cache_accounting(&c, t), "{} t={t}", kind.name());
        }
        // prefill-built caches agree too
        for p in op_profile(&m, &[3, 40], 1).unwrap() {
            assert_eq!(p.cache_scalars, cache_accounting(&c, p.t), "{} prefill t={}", kind.name(), p.t);
        }
    }
}

#[test]
fn operation_count_scaling() {
    let ts = [256usize, 512, 1024, 2048, 4096];
    let xs: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let teacher = Model::<f32>::init(cfg(MixerKind::SoftmaxFull, 1, 1, 4097), 0).unwrap();
    let student = Model::<f32>::init(cfg(MixerKind::Hybrid, 1, 1, 4097), 0).unwrap();
    let tp = op_profile(&teacher, &ts, 0).unwrap();
    let sp = op_profile(&student, &ts, 0).unwrap();

    let prefill = |p: &[xlin_core::complexity::OpProfile]| {
        loglog_slope(&xs, &p.iter().map(|p| p.prefill_ops as f64).collect::<Vec<_>>())
    };
    let (te, se) = (prefill(&tp), prefill(&sp));
    assert!(te >= 1.8, "teacher prefill exponent {te}");
    assert!(se <= 1.2, "student prefill exponent {se}");

    let steps: Vec<u64> = sp.iter().map(|p| p.step_ops).collect();
    assert!(steps.iter().all(|&s| s == steps[0]), "student step ops vary: {steps:?}");
    let ts_slope = loglog_slope(&xs, &tp.iter().map(|p| p.step_ops as f64).collect::<Vec<_>>());
    assert!(ts_slope >= 0.9, "teacher step slope {ts_slope}");
}

#[test]
fn loglog_slope_recovers_power_laws() {
    let xs = [1.0, 2.0, 4.0, 8.0, 16.0];
    for p in [0.5, 1.0, 2.0] {
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(p)).collect();
        assert!((loglog_slope(&xs, &ys) - p).abs() < 1e-12);
    }
}

#[test]
fn bench_rows_and_run_counts() {
    let teacher = Model::<f32>::init(cfg(MixerKind::SoftmaxFull, 1, 2, 80), 0).unwrap();
    let student = Model::<f32>::init(cfg(MixerKind::Hybrid, 1, 2, 80), 0).unwrap();
    let scen = vec![
        Scenario {
            mode: BenchMode::Generate,
            model: "teacher".into(),
            batch: 2,
            context: 16,
            gen: 48,
            checkpoints: vec![16, 32, 64],
        },
        Scenario {
            mode: BenchMode::Prefill,
            model: "student".into(),
            batch: 1,
            context: 0,
            gen: 0,
            checkpoints: vec![16, 64],
        },
    ];
    let opts = BenchOptions {
        warmups: 2,
        repeats: 3,
        seed: 1,
    };
    let res = run_bench(&[("teacher", &teacher), ("student", &student)], &scen, &opts).unwrap();
    assert_eq!(res.rows.len(), 5);
    assert_eq!(res.runs_executed % 5, 0);
    assert!(res.runs_executed >= 5 * 5);
    for r in &res.rows {
        assert!(r.step_latency_s > 0.0 && r.throughput_tps > 0.0);
        let c = if r.model == "teacher" { &teacher.config } else { &student.config };
        assert_eq!(r.cache_scalars, cache_accounting(c, r.t));
    }
    let csv = res.to_csv();
    assert!(csv.starts_with("mode,model,B,C,G,t,step_latency_s,cache_scalars,throughput_tps\n"));
    assert_eq!(csv.lines().count(), 6);

    let bad = [Scenario {
        model: "nope".into(),
        ..scen[0].clone()
    }];
    assert!(run_bench(&[("teacher", &teacher)], &bad, &opts).is_err());
    // decoding past the position limit is refused
    let long = [Scenario {
        checkpoints: vec![79],
        ..scen[0].clone()
    }];
    assert!(run_bench(&[("teacher", &teacher)], &long, &opts).is_err());
}
