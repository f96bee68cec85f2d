//! Checkpoint container: the 8-byte tag `DNICKPT\0`, a little-endian `u32`
//! format version, a little-endian `u64` payload length, then the payload
//! as JSON.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::TrainerState;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DNICKPT\0";
pub const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub state: TrainerState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContainerInfo {
    pub version: u32,
    pub payload_len: u64,
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(ckpt)?;
    let mut out = Vec::with_capacity(HEADER + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn container_info(bytes: &[u8]) -> Result<ContainerInfo> {
    if bytes.len() < HEADER || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad tag)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let payload_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
    }
    if (bytes.len() - HEADER) as u64 != payload_len {
        return Err(Error::Format(format!(
            "checkpoint payload is {} bytes, header says {payload_len}",
            bytes.len() - HEADER
        )));
    }
    Ok(ContainerInfo { version, payload_len })
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    container_info(bytes)?;
    Ok(serde_json::from_slice(&bytes[HEADER..])?)
}

/// Writes via a temporary file and a rename so a crash never leaves a
/// truncated checkpoint behind.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&encode(ckpt)?)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
