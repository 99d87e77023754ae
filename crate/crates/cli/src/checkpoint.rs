//! Named-tensor checkpoint container.
//!
//! Layout: the 8-byte magic, a little-endian `u32` schema version, a
//! little-endian `u64` header length, the JSON header, then every tensor's
//! values as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xlpolicy_core::model::{Model, ModelConfig};
use xlpolicy_core::numerics::Tensor;
use xlpolicy_core::policy::ActionSpec;
use xlpolicy_core::sim::write_atomic;
use xlpolicy_core::Error;

use crate::error::CliResult;

pub const MAGIC: &[u8; 8] = b"XLPCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub model: ModelConfig,
    pub action_spec: ActionSpec,
    pub tensors: Vec<TensorEntry>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn encode(model: &Model) -> Vec<u8> {
    let header = Header {
        model: model.config().clone(),
        action_spec: model.action_spec().clone(),
        tensors: model.params().iter().map(|(name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header always serializes");
    let mut out = Vec::with_capacity(20 + json.len() + model.params().num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params().iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> CliResult<Model> {
    let (header, mut rest) = read_header(bytes)?;
    let mut named = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        if rest.len() < n * 8 {
            return Err(format_err(format!("checkpoint truncated inside tensor {}", entry.name)).into());
        }
        let (chunk, tail) = rest.split_at(n * 8);
        let data = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk"))).collect();
        named.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        rest = tail;
    }
    if !rest.is_empty() {
        return Err(format_err(format!("checkpoint has {} trailing bytes", rest.len())).into());
    }
    Ok(Model::from_named(&header.model, header.action_spec, named)?)
}

/// Parses the header and returns it with the remaining tensor bytes.
pub fn read_header(bytes: &[u8]) -> CliResult<(Header, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(format_err("not a checkpoint file").into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")).into());
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(format_err("checkpoint header truncated").into());
    }
    let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| format_err(format!("checkpoint header: {e}")))?;
    Ok((header, &body[len..]))
}

pub fn save(path: &Path, model: &Model) -> CliResult<()> {
    Ok(write_atomic(path, &encode(model))?)
}

pub fn load(path: &Path) -> CliResult<Model> {
    let bytes = fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    decode(&bytes).map_err(|e| match e {
        crate::error::CliError::Core(Error::Format(msg)) => Error::Format(format!("{}: {msg}", path.display())).into(),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use xlpolicy_core::fusion::FusionConfig;
    use xlpolicy_core::xl::XlConfig;

    fn tiny() -> Model {
        let fusion = FusionConfig { conv_channels: [2, 2], d_rgbd: 4, d_lidar: 4, d_touch: 2, mlp_hidden: 4, ..FusionConfig::default() };
        let xl = XlConfig { d_model: 8, n_heads: 2, n_layers: 1, mem_len: 4, seg_len: 4, ff_mult: 1, ..XlConfig::default() };
        let cfg = ModelConfig { fusion, xl, head_hidden: 4 };
        Model::new(&cfg, ActionSpec::grid(0.5, 1.0), 7).unwrap()
    }

    #[test]
    fn encode_decode_is_exact() {
        let m = tiny();
        let bytes = encode(&m);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let bytes = encode(&tiny());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(decode(&bad_version).unwrap_err().to_string().contains("version"));
        assert!(decode(b"hello").is_err());
    }
}
