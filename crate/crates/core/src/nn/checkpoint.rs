//! Weight checkpoints in the safetensors container layout: an 8-byte
//! little-endian header length, a JSON header mapping tensor names to
//! `{dtype, shape, data_offsets}`, then the raw little-endian tensor bytes.
//! Model configuration travels as a JSON string under `__metadata__.config`.

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const CONFIG_KEY: &str = "config";

pub fn to_bytes<T: Real>(params: &ParamSet<T>, config: &Value) -> Vec<u8> {
    let mut header = Map::new();
    let mut meta = Map::new();
    meta.insert(CONFIG_KEY.into(), Value::String(config.to_string()));
    header.insert("__metadata__".into(), Value::Object(meta));
    let mut body = Vec::new();
    for (_, name, t) in params.iter() {
        let bytes = T::to_le_bytes_vec(t.data());
        let start = body.len();
        body.extend_from_slice(&bytes);
        header.insert(
            name.to_string(),
            json!({"dtype": T::DTYPE, "shape": t.shape(), "data_offsets": [start, body.len()]}),
        );
    }
    let mut head = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    while head.len() % 8 != 0 {
        head.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + head.len() + body.len());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&body);
    out
}

/// Parse a checkpoint. Tensors come back in header order sorted by name.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(ParamSet<T>, Value)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("file shorter than header length prefix"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let head = bytes.get(8..8 + n).ok_or_else(|| bad("truncated header"))?;
    let body = &bytes[8 + n..];
    let header: BTreeMap<String, Value> =
        serde_json::from_slice(head).map_err(|e| Error::Checkpoint(format!("header JSON: {e}")))?;
    let width = std::mem::size_of::<T>();
    let mut config = Value::Null;
    let mut params = ParamSet::new();
    for (name, entry) in header {
        if name == "__metadata__" {
            if let Some(s) = entry.get(CONFIG_KEY).and_then(Value::as_str) {
                config = serde_json::from_str(s).map_err(|e| Error::Checkpoint(format!("config JSON: {e}")))?;
            }
            continue;
        }
        let dtype = entry.get("dtype").and_then(Value::as_str).unwrap_or_default();
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has dtype {dtype}, expected {}",
                T::DTYPE
            )));
        }
        let shape: Vec<usize> = serde_json::from_value(entry.get("shape").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("{name} shape: {e}")))?;
        let offs: [usize; 2] = serde_json::from_value(entry.get("data_offsets").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("{name} offsets: {e}")))?;
        let raw = body
            .get(offs[0]..offs[1])
            .ok_or_else(|| Error::Checkpoint(format!("{name} data out of range")))?;
        let count: usize = shape.iter().product();
        if raw.len() != count * width {
            return Err(Error::Checkpoint(format!("{name} byte length does not match shape")));
        }
        let data = raw.chunks_exact(width).map(T::from_le_chunk).collect();
        params.add(name, Tensor::from_vec(&shape, data));
    }
    Ok((params, config))
}

pub fn save<T: Real>(path: &Path, params: &ParamSet<T>, config: &Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, to_bytes(params, config)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<(ParamSet<T>, Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
