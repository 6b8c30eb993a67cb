//! Checkpoint container: a safetensors file whose header metadata holds one
//! JSON document under the key `phs`.
//!
//! The document records the stage tag, the freeze flags, the model and
//! schedule configuration, the hash of the run configuration that produced
//! it and, for stage-2 checkpoints, the sha256 of the stage-1 parent file.
//! Tensors are stored as little-endian `f32` under their parameter names
//! (`unet.*`, `control.*`, `text_encoder.*`).

use std::collections::HashMap;
use std::path::Path;

use phs_tensor::Tensor;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::bundle::{DenoiserBundle, FreezeFlags, ModelConfig};
use crate::error::{Error, Result};
use crate::fsutil::{read, sha256_hex, write_atomic};

const META_KEY: &str = "phs";
const FORMAT: &str = "phs-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub stage: Stage,
    pub model: ModelConfig,
    pub freeze: FreezeFlags,
    pub schedule_steps: usize,
    pub config_hash: String,
    pub parent_hash: Option<String>,
    pub train_steps: u64,
}

impl CheckpointMeta {
    pub fn new(stage: Stage, bundle: &DenoiserBundle<f32>, config_hash: &str, parent_hash: Option<String>, train_steps: u64) -> Self {
        Self {
            format: FORMAT.to_string(),
            stage,
            model: bundle.config.clone(),
            freeze: bundle.freeze,
            schedule_steps: bundle.schedule.steps(),
            config_hash: config_hash.to_string(),
            parent_hash,
            train_steps,
        }
    }
}

/// Serializes to bytes. Output is a pure function of the parameters and
/// metadata.
pub fn checkpoint_bytes(bundle: &DenoiserBundle<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let blobs: Vec<(String, Vec<usize>, Vec<u8>)> = bundle
        .store
        .iter()
        .map(|(_, e)| (e.name.clone(), e.value.shape().to_vec(), e.value.data().iter().flat_map(|v| v.to_le_bytes()).collect()))
        .collect();
    let views = blobs
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let json = serde_json::to_string(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let info = HashMap::from([(META_KEY.to_string(), json)]);
    safetensors::tensor::serialize(views, Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Writes atomically and returns the sha256 of the file.
pub fn save_checkpoint(path: &Path, bundle: &DenoiserBundle<f32>, meta: &CheckpointMeta) -> Result<String> {
    let bytes = checkpoint_bytes(bundle, meta)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint("missing checkpoint metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if meta.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", meta.format)));
    }
    Ok(meta)
}

/// Loads a checkpoint, checking the stage tag when `expected` is given.
/// Returns the bundle, its metadata and the file's sha256.
pub fn load_checkpoint(path: &Path, expected: Option<Stage>) -> Result<(DenoiserBundle<f32>, CheckpointMeta, String)> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(format!("checkpoint {}", path.display())));
    }
    let bytes = read(path)?;
    let meta = read_meta(&bytes)?;
    if let Some(want) = expected {
        if meta.stage != want {
            return Err(Error::StageMismatch { expected: want.to_string(), found: meta.stage.to_string() });
        }
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bundle = DenoiserBundle::<f32>::new(&meta.model)?;
    if st.names().iter().any(|n| n.starts_with("control.")) {
        bundle.attach_control()?;
    }
    if st.len() != bundle.store.len() {
        return Err(Error::Checkpoint(format!("checkpoint holds {} tensors, model expects {}", st.len(), bundle.store.len())));
    }
    let ids: Vec<_> = bundle.store.iter().map(|(id, e)| (id, e.name.clone(), e.value.shape().to_vec())).collect();
    for (id, name, shape) in ids {
        let view = st.tensor(&name).map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
        if view.dtype() != Dtype::F32 || view.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {shape:?}", view.shape())));
        }
        let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        *bundle.store.get_mut(id) = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    bundle.apply_freeze(meta.freeze);
    Ok((bundle, meta, sha256_hex(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bit_exact_and_deterministic() {
        let mut cfg = ModelConfig::desk();
        cfg.base_channels = 8;
        cfg.groups = 4;
        cfg.image_size = 16;
        let mut b = DenoiserBundle::<f32>::new(&cfg).unwrap();
        b.attach_control().unwrap();
        b.apply_freeze(FreezeFlags::stage2());
        let meta = CheckpointMeta::new(Stage::Stage2, &b, "abc", Some("parent".into()), 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.safetensors");
        let h1 = save_checkpoint(&p, &b, &meta).unwrap();
        assert_eq!(checkpoint_bytes(&b, &meta).unwrap(), read(&p).unwrap());
        let (back, m, h2) = load_checkpoint(&p, Some(Stage::Stage2)).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m, meta);
        for ((_, a), (_, c)) in b.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, c.name);
            assert_eq!(a.value.data(), c.value.data());
            assert_eq!(a.frozen, c.frozen);
        }
        assert!(matches!(load_checkpoint(&p, Some(Stage::Stage1)), Err(Error::StageMismatch { .. })));
    }
}
