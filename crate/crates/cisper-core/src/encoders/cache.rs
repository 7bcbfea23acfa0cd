//! On-disk feature cache: a JSON manifest plus one little-endian float32 blob
//! per conversation (x block first, then the commonsense block).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ConversationFeatures, Relation, RELATION_COUNT};

const MANIFEST_FILE: &str = "manifest.json";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cache manifest is invalid: {0}")]
    Manifest(String),
    #[error("conversation '{id}' not in cache; available: {available:?}")]
    NotFound { id: String, available: Vec<String> },
    #[error("corrupt cache blob '{blob}': checksum mismatch")]
    ChecksumMismatch { blob: String },
    #[error("cache schema error on blob '{blob}': {reason}")]
    Schema { blob: String, reason: String },
    #[error("feature dimensions disagree: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlobEntry {
    pub file: String,
    /// Conversation length L.
    pub len: usize,
    /// Hex SHA-256 of the blob bytes.
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CacheManifest {
    pub schema_version: u32,
    pub d_u: usize,
    pub d_c: usize,
    pub relations: Vec<String>,
    pub dtype: String,
    pub endianness: String,
    pub semantic_backend: String,
    pub commonsense_backend: String,
    pub blobs: BTreeMap<String, BlobEntry>,
}

impl CacheManifest {
    pub fn conversation_ids(&self) -> Vec<String> {
        self.blobs.keys().cloned().collect()
    }
}

fn blob_dir(root: &Path) -> PathBuf {
    root.join("blobs")
}

/// Filesystem-safe blob name: filtered id plus a short hash so distinct ids
/// never collide.
fn blob_file_name(conversation_id: &str) -> String {
    let safe: String = conversation_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .take(48)
        .collect();
    let digest = Sha256::digest(conversation_id.as_bytes());
    format!("{safe}-{:08x}.bin", u32::from_be_bytes([digest[0], digest[1], digest[2], digest[3]]))
}

fn encode_blob(features: &ConversationFeatures) -> Vec<u8> {
    let mut bytes = Vec::with_capacity((features.x.len() + features.c.len()) * 4);
    for v in features.x.iter().chain(features.c.iter()) {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn checksum_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes all feature blocks under `root` and returns the manifest.
pub fn write_feature_cache(
    features: &[ConversationFeatures],
    root: &Path,
    semantic_backend: &str,
    commonsense_backend: &str,
) -> Result<CacheManifest, CacheError> {
    let io_err = |path: &Path, source| CacheError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::create_dir_all(blob_dir(root)).map_err(|e| io_err(root, e))?;

    let (d_u, d_c) = match features.first() {
        Some(f) => (f.d_u, f.d_c),
        None => (0, 0),
    };
    let mut blobs = BTreeMap::new();
    for f in features {
        if f.d_u != d_u || f.d_c != d_c {
            return Err(CacheError::DimensionMismatch(format!(
                "conversation '{}' has (d_u={}, d_c={}), cache has (d_u={d_u}, d_c={d_c})",
                f.conversation_id, f.d_u, f.d_c
            )));
        }
        let file = blob_file_name(&f.conversation_id);
        let bytes = encode_blob(f);
        let path = blob_dir(root).join(&file);
        fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
        blobs.insert(
            f.conversation_id.clone(),
            BlobEntry {
                file,
                len: f.len,
                checksum: checksum_hex(&bytes),
            },
        );
    }
    let manifest = CacheManifest {
        schema_version: SCHEMA_VERSION,
        d_u,
        d_c,
        relations: Relation::ALL.iter().map(|r| r.token().to_string()).collect(),
        dtype: "float32".to_string(),
        endianness: "little".to_string(),
        semantic_backend: semantic_backend.to_string(),
        commonsense_backend: commonsense_backend.to_string(),
        blobs,
    };
    let manifest_path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<CacheManifest, CacheError> {
    let manifest_path = root.join(MANIFEST_FILE);
    let bytes = fs::read(&manifest_path).map_err(|source| CacheError::Io {
        path: manifest_path.display().to_string(),
        source,
    })?;
    let manifest: CacheManifest =
        serde_json::from_slice(&bytes).map_err(|e| CacheError::Manifest(e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(CacheError::Manifest(format!(
            "unsupported schema version {} (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

/// Reads the named conversations back, verifying checksums and blob sizes
/// against the manifest.
pub fn read_feature_cache(
    root: &Path,
    ids: &[String],
) -> Result<Vec<ConversationFeatures>, CacheError> {
    let manifest = read_manifest(root)?;
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let entry = manifest.blobs.get(id).ok_or_else(|| CacheError::NotFound {
            id: id.clone(),
            available: manifest.conversation_ids(),
        })?;
        let path = blob_dir(root).join(&entry.file);
        let bytes = fs::read(&path).map_err(|source| CacheError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if checksum_hex(&bytes) != entry.checksum {
            return Err(CacheError::ChecksumMismatch {
                blob: entry.file.clone(),
            });
        }
        let expected_floats = entry.len * manifest.d_u + entry.len * RELATION_COUNT * manifest.d_c;
        if bytes.len() != expected_floats * 4 {
            return Err(CacheError::Schema {
                blob: entry.file.clone(),
                reason: format!(
                    "blob holds {} bytes but manifest dims (L={}, d_u={}, d_c={}) require {}",
                    bytes.len(),
                    entry.len,
                    manifest.d_u,
                    manifest.d_c,
                    expected_floats * 4
                ),
            });
        }
        let mut floats = Vec::with_capacity(expected_floats);
        for chunk in bytes.chunks_exact(4) {
            floats.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let x_len = entry.len * manifest.d_u;
        let c = floats.split_off(x_len);
        out.push(ConversationFeatures {
            conversation_id: id.clone(),
            len: entry.len,
            d_u: manifest.d_u,
            d_c: manifest.d_c,
            x: floats,
            c,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{extract_conversation_features, ReferenceBackend};

    fn sample_features(n: usize) -> Vec<ConversationFeatures> {
        let sem = ReferenceBackend::new(6, 2);
        let cs = ReferenceBackend::new(3, 4);
        (0..n)
            .map(|i| {
                let conversation = crate::corpus::Conversation {
                    id: format!("conv-{i}"),
                    utterances: (0..=i % 3)
                        .map(|t| crate::corpus::Utterance {
                            conversation_id: format!("conv-{i}"),
                            index: t,
                            speaker: "s".to_string(),
                            text: format!("text {i} {t}"),
                            emotion: None,
                        })
                        .collect(),
                };
                extract_conversation_features(&conversation, &sem, &cs).unwrap()
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let features = sample_features(5);
        write_feature_cache(&features, dir.path(), "ref-sem", "ref-cs").unwrap();
        let ids: Vec<String> = features.iter().map(|f| f.conversation_id.clone()).collect();
        let reloaded = read_feature_cache(dir.path(), &ids).unwrap();
        assert_eq!(features, reloaded);
    }

    #[test]
    fn unknown_id_lists_available() {
        let dir = tempfile::tempdir().unwrap();
        let features = sample_features(2);
        write_feature_cache(&features, dir.path(), "a", "b").unwrap();
        let err = read_feature_cache(dir.path(), &["missing".to_string()]).unwrap_err();
        match err {
            CacheError::NotFound { id, available } => {
                assert_eq!(id, "missing");
                assert_eq!(available, vec!["conv-0".to_string(), "conv-1".to_string()]);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let features = sample_features(1);
        let manifest = write_feature_cache(&features, dir.path(), "a", "b").unwrap();
        let entry = manifest.blobs.values().next().unwrap();
        let blob_path = dir.path().join("blobs").join(&entry.file);
        let mut bytes = fs::read(&blob_path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&blob_path, bytes).unwrap();
        let err = read_feature_cache(dir.path(), &["conv-0".to_string()]).unwrap_err();
        assert!(matches!(err, CacheError::ChecksumMismatch { .. }));
    }

    #[test]
    fn dimension_mismatch_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let features = sample_features(1);
        write_feature_cache(&features, dir.path(), "a", "b").unwrap();
        // shrink d_c in the manifest but recompute nothing else
        let manifest_path = dir.path().join("manifest.json");
        let mut manifest: CacheManifest =
            serde_json::from_slice(&fs::read(&manifest_path).unwrap()).unwrap();
        manifest.d_c = 2;
        fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = read_feature_cache(dir.path(), &["conv-0".to_string()]).unwrap_err();
        assert!(matches!(err, CacheError::Schema { .. }));
    }

    #[test]
    fn rewriting_identical_features_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let features = sample_features(3);
        write_feature_cache(&features, dir_a.path(), "a", "b").unwrap();
        write_feature_cache(&features, dir_b.path(), "a", "b").unwrap();
        let manifest_a = fs::read(dir_a.path().join("manifest.json")).unwrap();
        let manifest_b = fs::read(dir_b.path().join("manifest.json")).unwrap();
        assert_eq!(manifest_a, manifest_b);
        for entry in fs::read_dir(dir_a.path().join("blobs")).unwrap() {
            let name = entry.unwrap().file_name();
            let a = fs::read(dir_a.path().join("blobs").join(&name)).unwrap();
            let b = fs::read(dir_b.path().join("blobs").join(&name)).unwrap();
            assert_eq!(a, b);
        }
    }
}
