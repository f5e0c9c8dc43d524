//! Linear weight-space merging of experts that share one architecture.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::model::{Lineage, Model, Params};
use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

/// Tolerance on Σλ = 1 in strict mode.
pub const STRICT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Weights must already sum to one.
    #[default]
    Strict,
    /// Weights are divided by their sum.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeEntry {
    pub path: PathBuf,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSpec {
    pub experts: Vec<MergeEntry>,
    #[serde(default)]
    pub normalization: Normalization,
}

/// Validates raw weights and returns the ones actually applied.
pub fn normalized_weights(lambdas: &[f64], mode: Normalization) -> Result<Vec<f64>> {
    if lambdas.is_empty() {
        return Err(Error::Config("merge needs at least one expert".into()));
    }
    if let Some(bad) = lambdas.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(Error::Config(format!("merge weight {bad} is not a nonnegative number")));
    }
    let sum: f64 = lambdas.iter().sum();
    match mode {
        Normalization::Strict => {
            if (sum - 1.0).abs() > STRICT_SUM_TOL {
                return Err(Error::Config(format!(
                    "merge weights sum to {sum}; strict mode requires 1 (use auto normalization to rescale)"
                )));
            }
            Ok(lambdas.to_vec())
        }
        Normalization::Auto => {
            if sum <= 0.0 {
                return Err(Error::Config("merge weights sum to zero".into()));
            }
            Ok(lambdas.iter().map(|l| l / sum).collect())
        }
    }
}

fn check_compatible<T: Float>(a: &Model<T>, b: &Model<T>, which: usize) -> Result<()> {
    if a.config != b.config {
        return Err(Error::Contract(format!("expert {which} has a different model configuration")));
    }
    if a.params.len() != b.params.len() {
        return Err(Error::Contract(format!("expert {which} has a different tensor set")));
    }
    for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
        if na != nb || ta.shape() != tb.shape() {
            return Err(Error::Contract(format!(
                "expert {which}: tensor {nb} {:?} does not match {na} {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
    }
    Ok(())
}

/// `Σ λ_i θ_i` over in-memory experts, accumulated in 64-bit. Configuration
/// and seeds come from expert 0; provenance records every expert's hash and
/// weight.
pub fn merge_models<T: Float>(experts: &[&Model<T>], lambdas: &[f64], mode: Normalization) -> Result<Model<T>> {
    if experts.len() != lambdas.len() {
        return Err(Error::Config("one weight per expert required".into()));
    }
    let w = normalized_weights(lambdas, mode)?;
    let first = experts[0];
    for (i, e) in experts.iter().enumerate().skip(1) {
        check_compatible(first, e, i)?;
    }
    let mut entries = Vec::with_capacity(first.params.len());
    for (j, (name, t0)) in first.params.iter().enumerate() {
        let mut acc = vec![0.0f64; t0.numel()];
        for (e, &wi) in experts.iter().zip(&w) {
            for (a, x) in acc.iter_mut().zip(e.params.tensor_at(j).data()) {
                *a += wi * x.as_f64();
            }
        }
        entries.push((name.to_string(), Tensor::<T>::from_f64_slice(t0.shape(), &acc)?));
    }
    let hashes = experts.iter().map(|e| e.content_hash()).collect::<Result<Vec<_>>>()?;
    let provenance = json!({
        "merge": {
            "normalization": mode,
            "experts": hashes.iter().zip(lambdas).zip(&w).map(|((h, l), wi)| json!({
                "hash": h, "lambda": l, "weight": wi,
            })).collect::<Vec<_>>(),
        }
    });
    let merged = Model {
        config: first.config.clone(),
        params: Params::new(entries)?,
        lineage: Lineage {
            seeds: first.lineage.seeds.clone(),
            parents: hashes,
        },
        provenance: Some(provenance),
    };
    merged.validate()?;
    Ok(merged)
}

fn load_all<T: Float>(spec: &MergeSpec) -> Result<Vec<Model<T>>> {
    spec.experts.iter().map(|e| Model::<T>::load(&e.path)).collect()
}

/// Merges the checkpoints listed in `spec`.
pub fn linear_merge<T: Float>(spec: &MergeSpec) -> Result<Model<T>> {
    let models = load_all::<T>(spec)?;
    let refs: Vec<&Model<T>> = models.iter().collect();
    let lambdas: Vec<f64> = spec.experts.iter().map(|e| e.lambda).collect();
    merge_models(&refs, &lambdas, spec.normalization)
}

/// Replaces expert `index` with `replacement` and re-merges.  Returns the
/// edited spec along with the merge.
pub fn patch_merge<T: Float>(prev: &MergeSpec, index: usize, replacement: PathBuf) -> Result<(MergeSpec, Model<T>)> {
    if index >= prev.experts.len() {
        return Err(Error::Config(format!(
            "expert index {index} out of range for {} experts",
            prev.experts.len()
        )));
    }
    let mut spec = prev.clone();
    spec.experts[index].path = replacement;
    let merged = linear_merge(&spec)?;
    Ok((spec, merged))
}
