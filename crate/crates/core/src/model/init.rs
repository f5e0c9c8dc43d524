use super::{Lineage, Model, ModelConfig, Params};
use crate::error::{Error, Result};
use crate::mixers::{init_new_param, merge_all_gates, HybridLayerParams};
use crate::tensor::Tensor;
use crate::tensor::Float;

fn is_transferred(name: &str) -> bool {
    match name.split_once(".mixer.") {
        Some((_, local)) => matches!(local, "w_q" | "w_k" | "w_v" | "w_out"),
        None => true,
    }
}

/// Scalars a student adds on top of the teacher's tensors.
pub fn new_param_count(cfg: &ModelConfig) -> usize {
    cfg.param_specs()
        .iter()
        .filter(|(n, _)| !is_transferred(n))
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Copies every shared tensor from `teacher` verbatim and initializes the
/// student-only ones (feature maps to identity, gates to `i ≈ 1`, `f ≈ 0.99`,
/// `o = 0.5`).
pub fn init_student_from_teacher<T: Float>(teacher: &Model<T>, student: &ModelConfig) -> Result<Model<T>> {
    student.validate()?;
    let (a, b) = (&teacher.config, student);
    let shared = [
        ("vocab_size", a.vocab_size, b.vocab_size),
        ("n_layers", a.n_layers, b.n_layers),
        ("mlp_hidden", a.mlp_hidden, b.mlp_hidden),
        ("d_model", a.mixer.d_model, b.mixer.d_model),
        ("n_heads", a.mixer.n_heads, b.mixer.n_heads),
        ("d_qk", a.mixer.d_qk, b.mixer.d_qk),
        ("d_v", a.mixer.d_v, b.mixer.d_v),
    ];
    for (name, x, y) in shared {
        if x != y {
            return Err(Error::Config(format!(
                "student {name} = {y} differs from teacher {name} = {x}"
            )));
        }
    }
    let entries = student
        .param_specs()
        .into_iter()
        .map(|(name, shape)| {
            if is_transferred(&name) {
                let t = teacher.params.require(&name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape("init_student", t.shape(), &shape));
                }
                Ok((name, t.clone()))
            } else {
                let local = name.rsplit('.').next().unwrap_or(&name).to_string();
                Ok((name, init_new_param(&local, &shape)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut parents = teacher.lineage.parents.clone();
    parents.push(teacher.content_hash()?);
    Ok(Model {
        config: student.clone(),
        params: Params::new(entries)?,
        lineage: Lineage {
            seeds: teacher.lineage.seeds.clone(),
            parents,
        },
        provenance: None,
    })
}

/// Folds every layer's gate projections over `concat(q, k, v)` into weights
/// that read the layer input directly. The result computes the same function.
pub fn merge_model_gates<T: Float>(model: &Model<T>) -> Result<Model<T>> {
    let cfg = &model.config;
    if !cfg.mixer_kind.has_gates() {
        return Err(Error::Config(format!("{} layers have no gates", cfg.mixer_kind.name())));
    }
    let mut merged_cfg = cfg.clone();
    let mut replaced: Vec<(String, Tensor<T>)> = Vec::new();
    for l in 0..cfg.n_layers {
        let layer = HybridLayerParams::from_fn(cfg.mixer_kind, |name| {
            model.params.require(&format!("layers.{l}.mixer.{name}")).cloned()
        })?;
        let (mcfg, mp) = merge_all_gates(&cfg.mixer, &layer)?;
        merged_cfg.mixer = mcfg;
        for (name, t) in mp.named() {
            replaced.push((format!("layers.{l}.mixer.{name}"), t.clone()));
        }
    }
    let entries = merged_cfg
        .param_specs()
        .into_iter()
        .map(|(name, _)| match replaced.iter().position(|(n, _)| *n == name) {
            Some(i) => Ok((name, replaced[i].1.clone())),
            None => Ok((name.clone(), model.params.require(&name)?.clone())),
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = Model {
        config: merged_cfg,
        params: Params::new(entries)?,
        lineage: model.lineage.clone(),
        provenance: model.provenance.clone(),
    };
    merged.validate()?;
    Ok(merged)
}
