use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, HistoryEntry, Model, ModelSpec, RngState, Stage, TrainConfig};
use crate::data::{read_f32, write_f32};
use crate::error::{Error, Result};
use crate::params::{ParameterStore, TensorInfo};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Element offset into `tensors.bin`.
    offset: usize,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    spec: ModelSpec,
    stage: Stage,
    config: TrainConfig,
    history: String,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

/// Writes `manifest.json`, `tensors.bin` and `history.jsonl` into `dir`.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let data: Vec<f32> = ckpt.store.flat().iter().map(|&v| v as f32).collect();
    write_f32(&dir.join("tensors.bin"), &data)?;
    let mut hist = String::new();
    for h in &ckpt.history {
        hist.push_str(&serde_json::to_string(&h.to_json())?);
        hist.push('\n');
    }
    fs::write(dir.join("history.jsonl"), hist)?;
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        spec: ckpt.spec.clone(),
        stage: ckpt.stage,
        config: ckpt.config.clone(),
        history: "history.jsonl".into(),
        rng: ckpt.rng,
        tensors: ckpt
            .store
            .tensors()
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
                offset: t.offset,
                frozen: t.frozen,
            })
            .collect(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let raw = fs::read(dir.join("manifest.json"))
        .map_err(|e| Error::Format(format!("manifest: cannot read {}: {e}", dir.display())))?;
    let m: Manifest = serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("manifest.json: {e}")))?;
    if m.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint format_version {}", m.format_version)));
    }
    if let Some(t) = m.tensors.iter().find(|t| t.dtype != "f32") {
        return Err(Error::Format(format!("tensor {}: unsupported dtype {}", t.name, t.dtype)));
    }
    let total: usize = m.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let data = read_f32(&dir.join("tensors.bin"), total, "tensors")?;
    let infos = m
        .tensors
        .into_iter()
        .map(|t| TensorInfo { name: t.name, shape: t.shape, offset: t.offset, frozen: t.frozen })
        .collect();
    let store = ParameterStore::from_parts(infos, data.into_iter().map(f64::from).collect())?;
    // Validates the tensor index against what the spec builds.
    Model::from_store(&m.spec, store.clone())?;
    let hist_path = dir.join(&m.history);
    let text = fs::read_to_string(&hist_path)
        .map_err(|e| Error::Format(format!("history: cannot read {}: {e}", hist_path.display())))?;
    let history = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).map_err(|e| Error::Format(format!("history: {e}")))?;
            HistoryEntry::from_json(&v)
        })
        .collect::<Result<Vec<_>>>()?;
    m.config.validate()?;
    Ok(Checkpoint { spec: m.spec, store, config: m.config, history, stage: m.stage, rng: m.rng })
}
