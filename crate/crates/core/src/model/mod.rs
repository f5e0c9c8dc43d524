//! Decoder stacks: embedding, `L` pre-norm blocks of mixer + gated MLP,
//! final norm and unembedding. The teacher uses full softmax attention; the
//! students swap in another [`MixerKind`] while keeping every shared tensor.

mod checkpoint;
mod forward;
mod init;
pub mod train;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixers::hybrid::param_shapes;
use crate::mixers::{GateInputMode, MixerConfig, MixerKind};
use crate::tensor::{Float, Tensor};

pub use checkpoint::FORMAT_VERSION;
pub use forward::{argmax_lowest, generate, LayerVars, ModelVars, Sampling, Trace};
pub use init::{init_student_from_teacher, merge_model_gates, new_param_count};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    pub mixer_kind: MixerKind,
    pub mixer: MixerConfig,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_norm_eps() -> f64 {
    1e-6
}

impl ModelConfig {
    /// Desk-scale default: vocab 256, width 128, 4 layers of 4 heads.
    pub fn desk(kind: MixerKind) -> Self {
        Self {
            vocab_size: 256,
            n_layers: 4,
            mlp_hidden: 512,
            max_seq_len: 512,
            mixer_kind: kind,
            mixer: MixerConfig {
                d_model: 128,
                n_heads: 4,
                d_qk: 32,
                d_v: 32,
                window: 64,
                n_sinks: 4,
                chunk_size: 32,
                rope_base: 10000.0,
                gate_input_mode: GateInputMode::ConcatQkv,
            },
            norm_eps: default_norm_eps(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.mixer.d_model
    }

    pub fn validate(&self) -> Result<()> {
        self.mixer.validate()?;
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("mlp_hidden", self.mlp_hidden),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// The same architecture with a different mixer.
    pub fn with_kind(&self, kind: MixerKind) -> Self {
        Self {
            mixer_kind: kind,
            ..self.clone()
        }
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, hid) = (self.vocab_size, self.d_model(), self.mlp_hidden);
        let mut out = vec![("embed".to_string(), vec![v, d])];
        for l in 0..self.n_layers {
            out.push((format!("layers.{l}.norm1"), vec![d]));
            for (name, shape) in param_shapes(self.mixer_kind, &self.mixer) {
                out.push((format!("layers.{l}.mixer.{name}"), shape));
            }
            out.push((format!("layers.{l}.norm2"), vec![d]));
            out.push((format!("layers.{l}.mlp.w_gate"), vec![d, hid]));
            out.push((format!("layers.{l}.mlp.w_up"), vec![d, hid]));
            out.push((format!("layers.{l}.mlp.w_down"), vec![hid, d]));
        }
        out.push(("norm_f".to_string(), vec![d]));
        out.push(("unembed".to_string(), vec![d, v]));
        out
    }
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: Float> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Float> Params<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn into_entries(self) -> Vec<(String, Tensor<T>)> {
        self.entries
    }
}

/// Where a set of weights came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lineage {
    /// Seeds of every stage that produced these weights, oldest first.
    pub seeds: Vec<u64>,
    /// Content hashes of parent checkpoints, oldest first.
    pub parents: Vec<String>,
}

/// A model's configuration, weights and provenance; what a checkpoint holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Float> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub lineage: Lineage,
    /// Free-form provenance (e.g. merge weights), stored in the manifest.
    pub provenance: Option<serde_json::Value>,
}

impl<T: Float> Model<T> {
    /// Random initialization: unit norms, `N(0, 1/fan_in)` projections with
    /// residual-output projections additionally scaled by `1/√(2L)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let entries = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let local = name.rsplit('.').next().unwrap_or(&name);
                let t = if name.contains("norm") {
                    Tensor::ones(&shape)
                } else if name.contains(".mixer.") && !matches!(local, "w_q" | "w_k" | "w_v" | "w_out") {
                    crate::mixers::init_new_param(local, &shape)
                } else {
                    let fan_in = if name == "embed" { 1 } else { shape[shape.len() - 2] };
                    let mut std = (1.0 / fan_in as f64).sqrt();
                    if matches!(local, "w_out" | "w_down") {
                        std *= depth_scale;
                    }
                    Tensor::randn(&shape, std, &mut rng)
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            config,
            params: Params::new(entries)?,
            lineage: Lineage {
                seeds: vec![seed],
                parents: vec![],
            },
            provenance: None,
        })
    }

    /// Checks that exactly the parameters of the architecture are present.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let specs = self.config.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::Format(format!(
                "architecture has {} tensors, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for (name, shape) in specs {
            let t = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        let entries = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.cast::<U>()))
            .collect();
        Model {
            config: self.config.clone(),
            params: Params::new(entries).expect("names already unique"),
            lineage: self.lineage.clone(),
            provenance: self.provenance.clone(),
        }
    }
}
