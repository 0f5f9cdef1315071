//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! bytes 0..4    magic "NIRC"
//! bytes 4..8    u32 format version (currently 1)
//! bytes 8..16   u64 metadata length M
//! bytes 16..16+M  metadata, JSON (see [`CheckpointMeta`])
//! bytes 16+M..  payload: every parameter tensor's f64 values, in
//!               manifest order
//! ```
//!
//! The metadata carries the model config, a manifest locating each named
//! tensor inside the payload, the run seed, the training history, and a
//! SHA-256 digest of the payload. Loading rebuilds the model through the
//! same validation path as a fresh initialization, so a checkpoint whose
//! shapes or names drifted from its config is rejected, as is any payload
//! corruption.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use nirec_tensor::Tensor;

use crate::model::{Model, ModelConfig, ModelError, ParamEntry, ParamStore};
use crate::train::EpochStats;

const MAGIC: [u8; 4] = *b"NIRC";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Errors from writing or reading a checkpoint.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint: magic {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("payload length mismatch: manifest expects {expected} bytes, file holds {found}")]
    PayloadLength { expected: usize, found: usize },
    #[error("payload digest does not match the manifest")]
    ChecksumMismatch,
    #[error("manifest inconsistent: {0}")]
    ManifestMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Locates one tensor inside the payload. Offsets and lengths count f64
/// values, not bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

/// Everything stored beside the raw parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
    pub seed: u64,
    pub history: Vec<EpochStats>,
    pub payload_sha256: String,
}

/// A loaded checkpoint: the reconstructed model plus its metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: CheckpointMeta,
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes `model` (plus provenance) to `path`, writing to a sibling
/// temporary file first so an interrupted save never leaves a half-written
/// checkpoint behind.
pub fn save(
    path: &Path,
    model: &Model,
    seed: u64,
    history: &[EpochStats],
) -> Result<(), CheckpointError> {
    let mut manifest = Vec::with_capacity(model.params().len());
    let mut payload = Vec::new();
    let mut offset = 0u64;
    for entry in model.params().entries() {
        let len = entry.value.len() as u64;
        manifest.push(ManifestEntry {
            name: entry.name.clone(),
            shape: entry.value.shape().to_vec(),
            offset,
            len,
        });
        for v in entry.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += len;
    }
    let meta = CheckpointMeta {
        config: model.config().clone(),
        manifest,
        seed,
        history: history.to_vec(),
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;

    let mut bytes = Vec::with_capacity(HEADER_LEN + meta_bytes.len() + payload.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&meta_bytes);
    bytes.extend_from_slice(&payload);

    let tmp = path.with_extension("part");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint and rebuilds its model, verifying the header, the
/// payload digest, and the manifest against the stored config.
pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(CheckpointError::Truncated {
            needed: HEADER_LEN,
            got: bytes.len(),
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[0..4]);
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = HEADER_LEN
        .checked_add(meta_len)
        .ok_or(CheckpointError::Truncated {
            needed: usize::MAX,
            got: bytes.len(),
        })?;
    if bytes.len() < payload_start {
        return Err(CheckpointError::Truncated {
            needed: payload_start,
            got: bytes.len(),
        });
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])?;
    let payload = &bytes[payload_start..];

    let total: u64 = meta.manifest.iter().map(|m| m.len).sum();
    let expected = total as usize * 8;
    if payload.len() != expected {
        return Err(CheckpointError::PayloadLength {
            expected,
            found: payload.len(),
        });
    }
    if hex(&Sha256::digest(payload)) != meta.payload_sha256 {
        return Err(CheckpointError::ChecksumMismatch);
    }

    let mut entries = Vec::with_capacity(meta.manifest.len());
    let mut running = 0u64;
    for m in &meta.manifest {
        if m.offset != running {
            return Err(CheckpointError::ManifestMismatch(format!(
                "tensor {} at offset {}, expected {running}",
                m.name, m.offset
            )));
        }
        let count: usize = m.shape.iter().product();
        if count as u64 != m.len {
            return Err(CheckpointError::ManifestMismatch(format!(
                "tensor {} shape {:?} does not hold {} values",
                m.name, m.shape, m.len
            )));
        }
        let start = m.offset as usize * 8;
        let data: Vec<f64> = payload[start..start + m.len as usize * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(&m.shape, data).map_err(ModelError::from)?;
        entries.push(ParamEntry {
            name: m.name.clone(),
            value,
        });
        running += m.len;
    }
    let model = Model::from_params(meta.config.clone(), ParamStore::from_entries(entries))?;
    Ok(Checkpoint { model, meta })
}
