//! Sequence mixers: softmax attention (full and sliding-window with sinks),
//! linear attention, the gated mLSTM in recurrent and chunkwise form, and
//! the hybrid that fuses an mLSTM branch with a local attention branch.
//!
//! Per-head tensors use the layout `[heads, time, features]` throughout.

pub mod attention;
pub mod hybrid;
pub mod linear;
pub mod mlstm;
pub mod rope;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use attention::{attention_parallel, softmax_attention, swa_attention, KvCache, SwaCache};
pub use hybrid::{
    hybrid_forward, hybrid_step, init_new_param, merge_all_gates, merge_gate_projection,
    merge_gate_vector, mixer_forward, mixer_step, output_gate, param_shapes, project_qkv,
    GateInput, GateParams, HybridLayerParams, LayerCache, LayerOutput, Overrides, StepOutput,
};
pub use linear::{feature_map, linear_attention_step, LinearState};
pub use mlstm::{mlstm_parallel, mlstm_step, MlstmState};
pub use rope::apply_rope;

/// Hard floor on normalizer denominators.
pub const EPS_DEN: f64 = 1e-12;

/// What the input, forget and output gates read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInputMode {
    /// Per head: `concat(q, k, v)` before rotary embedding.
    #[default]
    ConcatQkv,
    /// The layer input `x_t`, shared by all heads.
    LayerInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    SoftmaxFull,
    SwaOnly,
    LinearAttn,
    MlstmOnly,
    Hybrid,
}

impl MixerKind {
    pub fn has_feature_maps(self) -> bool {
        matches!(self, MixerKind::LinearAttn | MixerKind::MlstmOnly | MixerKind::Hybrid)
    }

    pub fn has_gates(self) -> bool {
        matches!(self, MixerKind::MlstmOnly | MixerKind::Hybrid)
    }

    pub fn has_window(self) -> bool {
        matches!(self, MixerKind::SwaOnly | MixerKind::Hybrid)
    }

    pub fn has_recurrent_state(self) -> bool {
        self.has_feature_maps()
    }

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::SoftmaxFull => "softmax_full",
            MixerKind::SwaOnly => "swa_only",
            MixerKind::LinearAttn => "linear_attn",
            MixerKind::MlstmOnly => "mlstm_only",
            MixerKind::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown mixer kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_qk: usize,
    pub d_v: usize,
    /// Sliding window length in tokens, including the current one.
    pub window: usize,
    pub n_sinks: usize,
    pub chunk_size: usize,
    pub rope_base: f64,
    #[serde(default)]
    pub gate_input_mode: GateInputMode,
}

impl MixerConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_qk", self.d_qk),
            ("d_v", self.d_v),
            ("window", self.window),
            ("chunk_size", self.chunk_size),
        ];
        for (name, v) in pos {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_qk % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary embedding needs an even d_qk, got {}",
                self.d_qk
            )));
        }
        if !(self.rope_base > 1.0) {
            return Err(Error::Config("rope_base must exceed 1".into()));
        }
        Ok(())
    }

    /// Length of one head's gate input vector.
    pub fn gate_dim(&self) -> usize {
        match self.gate_input_mode {
            GateInputMode::ConcatQkv => 2 * self.d_qk + self.d_v,
            GateInputMode::LayerInput => self.d_model,
        }
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.d_qk as f64).sqrt()
    }
}
