//! Training checkpoints: one tensor file per parameter plus a manifest.

use std::path::Path;

use fbev_core::learn::{Model, TrainState};
use fbev_core::pool::{PoolParams, PoolStrategy};
use fbev_core::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fsutil::{read_text, write_text};
use crate::tensor_io::{read_tensor, write_tensor, Tensor, TensorData};

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub step: usize,
    pub seed: u64,
    /// SHA-256 of the canonical training configuration.
    pub config_hash: String,
    pub strategy: PoolStrategy,
    pub tensors: Vec<String>,
}

/// Hex SHA-256 of `text`.
pub fn hash_text(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn param_file(name: &str) -> String {
    format!("param.{name}.fbvt")
}

fn vector(v: &[f64]) -> Tensor {
    Tensor {
        dims: vec![v.len()],
        data: TensorData::F64(v.to_vec()),
    }
}

fn read_vector(path: &Path) -> Result<Vec<f64>, Error> {
    let t = read_tensor(path)?;
    match t.data {
        TensorData::F64(v) if t.dims.len() == 1 => Ok(v),
        _ => Err(Error::File {
            path: path.display().to_string(),
            message: "expected a rank-1 f64 tensor".into(),
        }),
    }
}

pub fn save(dir: &Path, state: &TrainState, config_hash: &str) -> Result<(), Error> {
    let mut names = Vec::new();
    for (name, values) in state.model.tensors() {
        write_tensor(&dir.join(param_file(name)), &vector(values))?;
        names.push(name.to_string());
    }
    write_tensor(&dir.join("adam_m.fbvt"), &vector(&state.adam_m))?;
    write_tensor(&dir.join("adam_v.fbvt"), &vector(&state.adam_v))?;
    write_tensor(&dir.join("loss_history.fbvt"), &vector(&state.loss_history))?;
    let manifest = Manifest {
        step: state.step,
        seed: state.rng_seed,
        config_hash: config_hash.to_string(),
        strategy: state.model.pool.strategy,
        tensors: names,
    };
    write_text(&dir.join(MANIFEST), &toml::to_string(&manifest).expect("manifest serializes"))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, Error> {
    let path = dir.join(MANIFEST);
    toml::from_str(&read_text(&path)?).map_err(|e| Error::File {
        path: path.display().to_string(),
        message: e.message().to_string(),
    })
}

fn check_strategy(manifest: &Manifest, strategy: PoolStrategy) -> Result<(), Error> {
    if manifest.strategy != strategy {
        return Err(Error::Config(format!(
            "checkpoint was trained with '{}', not '{}'",
            manifest.strategy.name(),
            strategy.name()
        )));
    }
    Ok(())
}

/// Overwrites every tensor of `model` from the checkpoint.
pub fn load_params(dir: &Path, manifest: &Manifest, model: &mut Model) -> Result<(), Error> {
    check_strategy(manifest, model.pool.strategy)?;
    fill(dir, manifest, model.tensors_mut())
}

/// Overwrites the pooling tensors only.
pub fn load_pool_params(dir: &Path, manifest: &Manifest, params: &mut PoolParams) -> Result<(), Error> {
    check_strategy(manifest, params.strategy)?;
    fill(dir, manifest, params.tensors_mut())
}

fn fill(dir: &Path, manifest: &Manifest, slots: Vec<(&'static str, &mut [f64])>) -> Result<(), Error> {
    for (name, slot) in slots {
        if !manifest.tensors.iter().any(|n| n == name) {
            return Err(Error::Config(format!("checkpoint lacks tensor '{name}'")));
        }
        let path = dir.join(param_file(name));
        let v = read_vector(&path)?;
        if v.len() != slot.len() {
            return Err(Error::File {
                path: path.display().to_string(),
                message: format!("{} values, model expects {}", v.len(), slot.len()),
            });
        }
        slot.copy_from_slice(&v);
    }
    Ok(())
}

/// Restores a full training state on top of a freshly initialized `model`.
pub fn load_state(dir: &Path, model: Model) -> Result<(TrainState, Manifest), Error> {
    let manifest = load_manifest(dir)?;
    let mut state = TrainState::new(model, manifest.seed);
    load_params(dir, &manifest, &mut state.model)?;
    let n = state.adam_m.len();
    state.adam_m = read_vector(&dir.join("adam_m.fbvt"))?;
    state.adam_v = read_vector(&dir.join("adam_v.fbvt"))?;
    state.loss_history = read_vector(&dir.join("loss_history.fbvt"))?;
    if state.adam_m.len() != n || state.adam_v.len() != n || state.loss_history.len() != manifest.step {
        return Err(Error::File {
            path: dir.display().to_string(),
            message: "optimizer state or loss history does not match the manifest".into(),
        });
    }
    state.step = manifest.step;
    Ok((state, manifest))
}
