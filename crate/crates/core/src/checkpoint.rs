//! Checkpoint file: 8-byte magic, JSON header (architecture, parameter
//! names, shapes, byte offsets), then raw little-endian f64 parameter
//! blocks. Round-trips bit-exactly.

use crate::model::{ModelConfig, ModelState, PARAM_NAMES};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"DEVIALB1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt checkpoint {path}: {detail}")]
    Corrupt { path: String, detail: String },
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the parameter block region (starts right after the
    /// header's terminating newline).
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

pub fn save(path: &Path, state: &ModelState) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(state.params.len());
    let mut offset = 0u64;
    for (name, p) in PARAM_NAMES.iter().zip(&state.params) {
        entries.push(ParamEntry { name: name.to_string(), shape: p.shape().to_vec(), offset });
        offset += (p.len() * 8) as u64;
    }
    let header = Header { config: state.config.clone(), params: entries };
    let header_json = serde_json::to_string(&header).expect("header serializes");

    let mut buf = Vec::with_capacity(16 + header_json.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(header_json.as_bytes());
    buf.push(b'\n');
    for p in &state.params {
        for &v in p.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })
}

pub fn load(path: &Path) -> Result<ModelState, CheckpointError> {
    let corrupt = |detail: &str| CheckpointError::Corrupt {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let newline = bytes[8..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing header terminator"))?;
    let header: Header =
        serde_json::from_slice(&bytes[8..8 + newline]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    let data_start = 8 + newline + 1;
    let mut params = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let start = data_start + entry.offset as usize;
        let end = start + n * 8;
        let block = bytes.get(start..end).ok_or_else(|| corrupt("truncated parameter block"))?;
        let data: Vec<f64> = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Tensor::new(entry.shape.clone(), data));
    }
    if params.len() != PARAM_NAMES.len() {
        return Err(corrupt("unexpected parameter count"));
    }
    Ok(ModelState { config: header.config, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let state = ModelState::init(ModelConfig::default());
        save(&path, &state).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.config, state.config);
        for (a, b) in loaded.params.iter().zip(&state.params) {
            assert_eq!(a, b);
        }
        // saving the loaded state reproduces identical bytes
        let path2 = dir.path().join("model2.bin");
        save(&path2, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = dir.path().join("bad.bin");
        fs::write(&bad_magic, b"NOTMAGIC{}\n").unwrap();
        assert!(matches!(load(&bad_magic), Err(CheckpointError::Corrupt { .. })));

        let state = ModelState::init(ModelConfig::default());
        let good = dir.path().join("good.bin");
        save(&good, &state).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 100);
        let truncated = dir.path().join("trunc.bin");
        fs::write(&truncated, bytes).unwrap();
        assert!(matches!(load(&truncated), Err(CheckpointError::Corrupt { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load(&dir.path().join("absent.bin")),
            Err(CheckpointError::Io { .. })
        ));
    }
}
