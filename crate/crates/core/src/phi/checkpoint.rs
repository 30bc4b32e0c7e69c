//! Checkpoint layout: 8-byte magic, `u32` format version, `u32` header length,
//! a JSON header, then every parameter as little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PhiArchitecture, PhiNetwork};
use crate::error::{Error, Result};
use crate::store::write_atomic;

const MAGIC: &[u8; 8] = b"ZSCIRPHI";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    dropout: f64,
    param_count: usize,
    config_digest: String,
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub phi: PhiNetwork,
    pub config_digest: String,
    /// Set when an expected digest was supplied and differs from the stored one.
    pub digest_mismatch: bool,
}

pub fn save_checkpoint(phi: &PhiNetwork, config_digest: &str, path: &Path) -> Result<()> {
    let arch = phi.architecture();
    let header = serde_json::to_vec(&Header {
        version: CHECKPOINT_VERSION,
        input_dim: arch.input_dim,
        hidden_dim: arch.hidden_dim,
        output_dim: arch.output_dim,
        dropout: arch.dropout,
        param_count: arch.param_count(),
        config_digest: config_digest.to_string(),
    })?;
    let mut bytes = Vec::with_capacity(16 + header.len() + phi.params().len() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for p in phi.params() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("checkpoint truncated"))
}

pub fn load_checkpoint(path: &Path, expected_digest: Option<&str>) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(format!("{} is not a checkpoint", path.display())));
    }
    let version = read_u32(&bytes, 8)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = read_u32(&bytes, 12)? as usize;
    let header_bytes = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| Error::format("checkpoint header truncated"))?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    if header.version != version {
        return Err(Error::format("checkpoint header version disagrees with preamble"));
    }
    let arch = PhiArchitecture {
        input_dim: header.input_dim,
        hidden_dim: header.hidden_dim,
        output_dim: header.output_dim,
        dropout: header.dropout,
    };
    arch.validate()
        .map_err(|e| Error::format(format!("checkpoint architecture: {e}")))?;
    if arch.param_count() != header.param_count {
        return Err(Error::format("checkpoint parameter count disagrees with its dimensions"));
    }
    let body = &bytes[16 + header_len..];
    if body.len() != header.param_count * 8 {
        return Err(Error::format(format!(
            "checkpoint body has {} bytes, expected {}",
            body.len(),
            header.param_count * 8
        )));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let digest_mismatch = expected_digest.is_some_and(|d| d != header.config_digest);
    if digest_mismatch {
        log::warn!(
            "checkpoint {} was trained with config {}, expected {}",
            path.display(),
            header.config_digest,
            expected_digest.unwrap_or_default()
        );
    }
    Ok(LoadedCheckpoint {
        phi: PhiNetwork::from_params(arch, params)?,
        config_digest: header.config_digest,
        digest_mismatch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ImageFeature;
    use crate::phi::Mode;

    fn net() -> PhiNetwork {
        PhiNetwork::init(PhiArchitecture::new(8, 12, 0.5).unwrap(), 21).unwrap()
    }

    #[test]
    fn round_trip_reproduces_eval_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.ckpt");
        let phi = net();
        save_checkpoint(&phi, "d1", &path).unwrap();
        let loaded = load_checkpoint(&path, Some("d1")).unwrap();
        assert!(!loaded.digest_mismatch);
        for i in 0..100 {
            let f = ImageFeature((0..8).map(|j| ((i * 8 + j) as f64 * 0.113).sin()).collect());
            assert_eq!(
                phi.forward("x", &f, Mode::Eval).unwrap(),
                loaded.phi.forward("x", &f, Mode::Eval).unwrap()
            );
        }
    }

    #[test]
    fn digest_mismatch_is_flagged_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.ckpt");
        save_checkpoint(&net(), "d1", &path).unwrap();
        let loaded = load_checkpoint(&path, Some("other")).unwrap();
        assert!(loaded.digest_mismatch);
        assert_eq!(loaded.config_digest, "d1");
    }

    #[test]
    fn corrupted_or_foreign_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.ckpt");
        save_checkpoint(&net(), "d1", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Format(_))));

        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Format(_))));

        save_checkpoint(&net(), "d1", &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(Error::Format(_))));
    }
}
