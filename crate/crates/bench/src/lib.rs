//! Model configurations shared by the benchmark targets.

use xlin_core::mixers::{GateInputMode, MixerConfig, MixerKind};
use xlin_core::model::{Model, ModelConfig};
use xlin_core::Result;

/// Small teacher/student geometry: timings are dominated by the mixers.
pub fn bench_config(kind: MixerKind, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        n_layers: 2,
        mlp_hidden: 64,
        max_seq_len,
        mixer_kind: kind,
        mixer: MixerConfig {
            d_model: 32,
            n_heads: 2,
            d_qk: 16,
            d_v: 16,
            window: 64,
            n_sinks: 4,
            chunk_size: 32,
            rope_base: 10000.0,
            gate_input_mode: GateInputMode::ConcatQkv,
        },
        norm_eps: 1e-6,
    }
}

/// `(teacher, hybrid student)` with random weights.
pub fn bench_models(max_seq_len: usize, seed: u64) -> Result<(Model<f32>, Model<f32>)> {
    Ok((
        Model::init(bench_config(MixerKind::SoftmaxFull, max_seq_len), seed)?,
        Model::init(bench_config(MixerKind::Hybrid, max_seq_len), seed)?,
    ))
}
