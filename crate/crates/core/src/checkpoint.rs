//! Binary checkpoint container.
//!
//! Layout: 4-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as row-major little-endian `f64` in header
//! order. Values round-trip bit-exactly.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Mat;
use crate::model::{DistilMos, ModelConfig};
use crate::params::{ParamStore, TensorKind};
use crate::ssl_backend::{BackendSpec, SyntheticBackend};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub group: String,
    pub name: String,
    pub kind: TensorKind,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    meta: M,
    tensors: Vec<TensorHeader>,
}

/// Serializes `meta` plus named tensor groups.
pub fn write_container<M: Serialize>(magic: &[u8; 4], meta: &M, groups: &[(&str, &ParamStore)]) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut data: Vec<&Mat> = Vec::new();
    for (group, store) in groups {
        for e in store.entries() {
            tensors.push(TensorHeader {
                group: group.to_string(),
                name: e.name.clone(),
                kind: e.kind,
                rows: e.value.nrows(),
                cols: e.value.ncols(),
            });
            data.push(&e.value);
        }
    }
    let header = serde_json::to_vec(&Envelope { meta, tensors }).expect("header serializes");
    let payload: usize = data.iter().map(|m| m.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + header.len() + payload);
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for m in data {
        // iter() walks logical row-major order regardless of memory layout
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Inverse of [`write_container`]; groups come back in file order.
pub fn read_container<M: DeserializeOwned>(magic: &[u8; 4], bytes: &[u8]) -> Result<(M, Vec<(String, ParamStore)>), CheckpointError> {
    let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let envelope: Envelope<M> = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let mut pos = header_end;
    let mut groups: Vec<(String, ParamStore)> = Vec::new();
    for t in &envelope.tensors {
        let n = t.rows.checked_mul(t.cols).ok_or_else(|| corrupt("tensor size overflow"))?;
        let end = n
            .checked_mul(8)
            .and_then(|b| pos.checked_add(b))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated tensor data"))?;
        let values: Vec<f64> = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        pos = end;
        let mat = Mat::from_shape_vec((t.rows, t.cols), values).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        if groups.last().map(|g| &g.0) != Some(&t.group) {
            groups.push((t.group.clone(), ParamStore::new()));
        }
        let store = &mut groups.last_mut().expect("pushed").1;
        if store.id(&t.name).is_some() {
            return Err(corrupt("duplicate tensor name"));
        }
        store.add(t.name.clone(), mat, t.kind);
    }
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((envelope.meta, groups))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| CheckpointError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    // write-then-rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_config: ModelConfig,
    pub backend_spec: BackendSpec,
    /// Hash of the codebook file the model was trained against.
    pub codebook_hash: Option<String>,
    pub step: usize,
    pub valid_srcc: Option<f64>,
}

/// Model parameters, running statistics and the (possibly fine-tuned)
/// encoder.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: ParamStore,
    pub backend: ParamStore,
}

impl Checkpoint {
    pub fn capture(model: &DistilMos, backend: &SyntheticBackend, codebook_hash: Option<String>, step: usize, valid_srcc: Option<f64>) -> Self {
        use crate::ssl_backend::SslBackend;
        Self {
            meta: CheckpointMeta {
                model_config: model.config().clone(),
                backend_spec: backend.spec().clone(),
                codebook_hash,
                step,
                valid_srcc,
            },
            model: model.params().clone(),
            backend: backend.params().clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        write_container(CHECKPOINT_MAGIC, &self.meta, &[("model", &self.model), ("backend", &self.backend)])
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let (meta, groups): (CheckpointMeta, _) = read_container(CHECKPOINT_MAGIC, bytes)?;
        let mut model = None;
        let mut backend = None;
        for (group, store) in groups {
            match group.as_str() {
                "model" if model.is_none() => model = Some(store),
                "backend" if backend.is_none() => backend = Some(store),
                other => return Err(CheckpointError::Corrupt(format!("unexpected tensor group {other}"))),
            }
        }
        Ok(Self {
            meta,
            model: model.ok_or_else(|| CheckpointError::Corrupt("no model tensors".into()))?,
            backend: backend.unwrap_or_default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Rebuilds the network. With `with_aux = false` auxiliary heads are
    /// not constructed even if their tensors are stored.
    pub fn build_model(&self, with_aux: bool) -> Result<DistilMos, CheckpointError> {
        DistilMos::from_params(self.meta.model_config.clone(), &self.model, with_aux)
            .map_err(|e| CheckpointError::IncompatibleCheckpoint(e.to_string()))
    }

    pub fn build_backend(&self) -> Result<SyntheticBackend, CheckpointError> {
        SyntheticBackend::from_params(self.meta.backend_spec.clone(), &self.backend)
            .map_err(|e| CheckpointError::IncompatibleCheckpoint(e.to_string()))
    }

    /// Fails unless the checkpoint was trained against `hash`. Checkpoints
    /// trained without codebooks accept anything.
    pub fn check_codebooks(&self, hash: &str) -> Result<(), CheckpointError> {
        match &self.meta.codebook_hash {
            Some(stored) if stored != hash => Err(CheckpointError::IncompatibleCheckpoint(format!(
                "trained against codebooks {stored}, given {hash}"
            ))),
            _ => Ok(()),
        }
    }

    /// Fails unless the stored encoder matches `spec` in shape.
    pub fn check_backend(&self, spec: &BackendSpec) -> Result<(), CheckpointError> {
        let own = &self.meta.backend_spec;
        if own.n_layers != spec.n_layers || own.dim != spec.dim {
            return Err(CheckpointError::IncompatibleCheckpoint(format!(
                "checkpoint encoder {}x{}, expected {}x{}",
                own.n_layers, own.dim, spec.n_layers, spec.dim
            )));
        }
        Ok(())
    }
}
