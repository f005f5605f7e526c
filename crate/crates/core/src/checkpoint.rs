//! `SBCK` checkpoints: magic, the config as JSON, then named tensor records.
//!
//! ```text
//! "SBCK" | u32 json_len | json | u32 count | count × (u16 name_len | name | SBTN record)
//! ```

use std::path::Path;

use sbanet_autograd::codec::ByteReader;
use sbanet_autograd::{Tensor, TensorError};

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::model::Model;
use crate::params::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SBCK";

pub fn encode_checkpoint(cfg: &ModelConfig, store: &ParamStore) -> Vec<u8> {
    let json = cfg.to_json();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        t.encode_into(&mut out);
    }
    out
}

/// Parses a checkpoint and verifies its tensors against the architecture
/// its config describes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamStore)> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let len = r.u32()? as usize;
    let at = r.position();
    let json = r.bytes(len)?;
    let fmt = |msg: String| CoreError::from(TensorError::Format { offset: at, msg });
    let text = std::str::from_utf8(json).map_err(|e| fmt(format!("config is not UTF-8: {e}")))?;
    let cfg: ModelConfig = serde_json::from_str(text).map_err(|e| fmt(format!("config: {e}")))?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new(cfg.seed);
    for _ in 0..count {
        let at = r.position();
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.bytes(n)?)
            .map_err(|e| CoreError::from(TensorError::Format { offset: at, msg: format!("tensor name: {e}") }))?
            .to_string();
        if store.id(&name).is_some() {
            return Err(TensorError::Format { offset: at, msg: format!("duplicate tensor {name:?}") }.into());
        }
        let t = Tensor::decode_from(&mut r)?;
        store.insert(name, t);
    }
    if !r.is_empty() {
        return Err(r.error(format!("{} trailing bytes", r.remaining())).into());
    }
    Model::attach(&cfg, &store)?;
    Ok((cfg, store))
}

pub fn write_checkpoint(path: &Path, cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    std::fs::write(path, encode_checkpoint(cfg, store)).map_err(|e| CoreError::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ParamStore)> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_checkpoint(&bytes)
}
