//! Checkpoint archive: one file holding a JSON manifest (schema version,
//! config snapshot, tensor names and shapes, metric history) followed by raw
//! little-endian f64 payloads. Round-trips are bit-exact and carry the
//! optimizer state, so training resumes deterministically.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::EpochRecord;
use crate::config::RunConfig;
use crate::nn::{Matrix, ParamStore};

const MAGIC: &[u8; 8] = b"CISPERCK";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Complete training state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub label_set: Vec<String>,
    pub vocab: Vec<String>,
    pub epoch: usize,
    pub params: ParamStore,
    pub adam_m: ParamStore,
    pub adam_v: ParamStore,
    pub adam_step: u64,
    pub metric_history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    role: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    config: RunConfig,
    label_set: Vec<String>,
    vocab: Vec<String>,
    epoch: usize,
    adam_step: u64,
    metric_history: Vec<EpochRecord>,
    dtype: String,
    endianness: String,
    tensors: Vec<TensorEntry>,
}

fn push_store(tensors: &mut Vec<TensorEntry>, payload: &mut Vec<u8>, store: &ParamStore, role: &str) {
    for (name, m) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: m.rows,
            cols: m.cols,
            role: role.to_string(),
        });
        for v in &m.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Writes the checkpoint atomically (temp file, then rename).
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    push_store(&mut tensors, &mut payload, &checkpoint.params, "param");
    push_store(&mut tensors, &mut payload, &checkpoint.adam_m, "adam_m");
    push_store(&mut tensors, &mut payload, &checkpoint.adam_v, "adam_v");
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config: checkpoint.config.clone(),
        label_set: checkpoint.label_set.clone(),
        vocab: checkpoint.vocab.clone(),
        epoch: checkpoint.epoch,
        adam_step: checkpoint.adam_step,
        metric_history: checkpoint.metric_history.clone(),
        dtype: "float64".to_string(),
        endianness: "little".to_string(),
        tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");

    let tmp_path = path.with_extension("ckpt.tmp");
    {
        let mut file = fs::File::create(&tmp_path).map_err(io_err)?;
        file.write_all(MAGIC).map_err(io_err)?;
        file.write_all(&SCHEMA_VERSION.to_le_bytes()).map_err(io_err)?;
        file.write_all(&(manifest_json.len() as u64).to_le_bytes()).map_err(io_err)?;
        file.write_all(&manifest_json).map_err(io_err)?;
        file.write_all(&payload).map_err(io_err)?;
        file.flush().map_err(io_err)?;
    }
    fs::rename(&tmp_path, path).map_err(io_err)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != SCHEMA_VERSION {
        return Err(CheckpointError::SchemaVersion {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let manifest_end = 20usize
        .checked_add(manifest_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| CheckpointError::Corrupt("manifest extends past end of file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..manifest_end])
        .map_err(|e| CheckpointError::Corrupt(format!("manifest json: {e}")))?;
    if manifest.dtype != "float64" || manifest.endianness != "little" {
        return Err(CheckpointError::Corrupt(format!(
            "unsupported payload encoding {}/{}",
            manifest.dtype, manifest.endianness
        )));
    }

    let expected_floats: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
    let payload = &bytes[manifest_end..];
    if payload.len() != expected_floats * 8 {
        return Err(CheckpointError::Corrupt(format!(
            "payload holds {} bytes, manifest requires {}",
            payload.len(),
            expected_floats * 8
        )));
    }

    let mut params = ParamStore::new();
    let mut adam_m = ParamStore::new();
    let mut adam_v = ParamStore::new();
    let mut offset = 0usize;
    for entry in &manifest.tensors {
        let count = entry.rows * entry.cols;
        let mut data = Vec::with_capacity(count);
        for chunk in payload[offset..offset + count * 8].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        offset += count * 8;
        let matrix = Matrix::from_vec(entry.rows, entry.cols, data);
        match entry.role.as_str() {
            "param" => params.insert(&entry.name, matrix),
            "adam_m" => adam_m.insert(&entry.name, matrix),
            "adam_v" => adam_v.insert(&entry.name, matrix),
            other => {
                return Err(CheckpointError::Corrupt(format!("unknown tensor role '{other}'")))
            }
        }
    }

    Ok(Checkpoint {
        config: manifest.config,
        label_set: manifest.label_set,
        vocab: manifest.vocab,
        epoch: manifest.epoch,
        params,
        adam_m,
        adam_v,
        adam_step: manifest.adam_step,
        metric_history: manifest.metric_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded_normal;

    fn sample_checkpoint() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", seeded_normal(3, 4, 1.0, 1, "a.w"));
        params.insert("b.w", seeded_normal(2, 2, 0.3, 1, "b.w"));
        let adam_m = params.zeros_like();
        let mut adam_v = params.zeros_like();
        adam_v.get_mut("a.w").data[0] = 0.25;
        Checkpoint {
            config: RunConfig::default(),
            label_set: vec!["joy".to_string(), "anger".to_string()],
            vocab: vec!["[CLS]".to_string(), "[SEP]".to_string(), "[MASK]".to_string(), "[UNK]".to_string()],
            epoch: 3,
            params,
            adam_m,
            adam_v,
            adam_step: 17,
            metric_history: vec![EpochRecord {
                epoch: 0,
                train_loss: 1.25,
                val_weighted_f1: 0.5,
            }],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let original = sample_checkpoint();
        save_checkpoint(&original, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.adam_step, 17);
        assert_eq!(loaded.label_set, original.label_set);
        assert_eq!(loaded.metric_history, original.metric_history);
        for (name, m) in original.params.iter() {
            assert_eq!(loaded.params.get(name), m);
        }
        assert_eq!(loaded.adam_v.get("a.w").data[0], 0.25);
    }

    #[test]
    fn truncated_file_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, CheckpointError::Corrupt(_)));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_checkpoint(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, CheckpointError::SchemaVersion { found: 99, .. }));
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        fs::write(&path, b"NOTACKPTxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic)));
    }
}
