//! Model checkpoint files: `KI67MDL1`, a little-endian u32 header length,
//! a JSON header, then every parameter as a little-endian f32 in
//! architecture order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::net::{MiniDetector, ARCHITECTURE, PARAM_COUNT};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KI67MDL1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: String,
    pub param_count: usize,
    pub seed: u64,
    pub regime: String,
    pub parent_hash: Option<String>,
}

impl CheckpointHeader {
    pub fn new(seed: u64, regime: impl Into<String>, parent_hash: Option<String>) -> Self {
        Self { architecture: ARCHITECTURE.to_string(), param_count: PARAM_COUNT, seed, regime: regime.into(), parent_hash }
    }
}

pub fn encode(model: &MiniDetector<f32>, header: &CheckpointHeader) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * PARAM_COUNT);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(MiniDetector<f32>, CheckpointHeader)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing KI67MDL1 magic"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.architecture != ARCHITECTURE || header.param_count != PARAM_COUNT {
        return Err(bad(&format!("unsupported architecture {}", header.architecture)));
    }
    let data = &bytes[12 + len..];
    if data.len() != 4 * PARAM_COUNT {
        return Err(bad(&format!("expected {} parameter bytes, found {}", 4 * PARAM_COUNT, data.len())));
    }
    let params: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mut model = MiniDetector::zeros();
    model.set_params(&params)?;
    Ok((model, header))
}

/// Hex SHA-256 of an encoded checkpoint.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the checkpoint and returns its content hash.
pub fn save(path: &Path, model: &MiniDetector<f32>, header: &CheckpointHeader) -> Result<String> {
    let bytes = encode(model, header);
    fs::write(path, &bytes)?;
    Ok(content_hash(&bytes))
}

pub fn load(path: &Path) -> Result<(MiniDetector<f32>, CheckpointHeader)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regimes::net::random_model;

    #[test]
    fn round_trip() {
        let m = random_model::<f32>(4);
        let h = CheckpointHeader::new(4, "ss+gs", Some("abc".into()));
        let bytes = encode(&m, &h);
        assert_eq!(&bytes[..8], b"KI67MDL1");
        let (m2, h2) = decode(&bytes).unwrap();
        assert_eq!(m2, m);
        assert_eq!(h2, h);
    }

    #[test]
    fn rejects_corruption() {
        let m = random_model::<f32>(4);
        let bytes = encode(&m, &CheckpointHeader::new(0, "gs", None));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode(&wrong), Err(Error::Checkpoint(_))));
    }
}
