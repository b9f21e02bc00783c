//! Self-describing weight file.
//!
//! Layout: the 8-byte magic `SCANCKPT`, a little-endian `u32` format version,
//! a `u32` header length, the JSON header, then every tensor as consecutive
//! little-endian `f32` values in header order.

use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Architecture, NetworkWeights, ParamKind};
use crate::dataio::{write_file, LabelRegistry};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SCANCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Param(ParamKind),
    RunningStat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    architecture: Architecture,
    labels: LabelRegistry,
    train_config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub weights: NetworkWeights,
    pub labels: LabelRegistry,
    pub train_config: serde_json::Value,
    /// Hex SHA-256 of the file bytes.
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_checkpoint(
    weights: &NetworkWeights,
    labels: &LabelRegistry,
    train_config: &serde_json::Value,
) -> Result<Vec<u8>> {
    if labels.len() != weights.num_classes() {
        return Err(Error::Label(format!(
            "{} label names for a {}-class network",
            labels.len(),
            weights.num_classes()
        )));
    }
    let mut tensors = Vec::new();
    for p in weights.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            role: TensorRole::Param(p.kind),
            shape: p.value.shape().to_vec(),
        });
    }
    for b in weights.buffers() {
        tensors.push(TensorEntry {
            name: b.name.clone(),
            role: TensorRole::RunningStat,
            shape: vec![b.value.len()],
        });
    }
    let header = Header {
        architecture: weights.architecture().clone(),
        labels: labels.clone(),
        train_config: train_config.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Encode(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * weights.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let values = weights
        .params()
        .iter()
        .flat_map(|p| p.value.iter())
        .chain(weights.buffers().iter().flat_map(|b| b.value.iter()));
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Writes the checkpoint and returns its hash.
pub fn save_checkpoint(
    path: &Path,
    weights: &NetworkWeights,
    labels: &LabelRegistry,
    train_config: &serde_json::Value,
) -> Result<String> {
    let bytes = encode_checkpoint(weights, labels, train_config)?;
    write_file(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(bytes, &mut pos)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = read_u32(bytes, &mut pos)? as usize;
    let header: Header = serde_json::from_slice(take(bytes, &mut pos, header_len)?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut weights = NetworkWeights::zeroed(header.architecture)
        .map_err(|e| Error::Format(format!("checkpoint architecture: {e}")))?;
    if header.labels.len() != weights.num_classes() {
        return Err(Error::Format("label count does not match the output layer".into()));
    }
    let floats = |shape: &[usize], pos: &mut usize| -> Result<Vec<f32>> {
        let n: usize = shape.iter().product();
        let raw = take(bytes, pos, 4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let n_params = weights.params().len();
    if header.tensors.len() != n_params + weights.buffers().len() {
        return Err(Error::Format("tensor table does not match the architecture".into()));
    }
    let (params, buffers) = weights.params_and_buffers_mut();
    for (entry, p) in header.tensors[..n_params].iter().zip(params.iter_mut()) {
        if entry.name != p.name || entry.shape != p.value.shape() || entry.role != TensorRole::Param(p.kind) {
            return Err(Error::Format(format!("unexpected tensor {:?}", entry.name)));
        }
        p.value = ArrayD::from_shape_vec(IxDyn(&entry.shape), floats(&entry.shape, &mut pos)?)
            .expect("length checked");
    }
    for (entry, b) in header.tensors[n_params..].iter().zip(buffers.iter_mut()) {
        if entry.name != b.name || entry.shape != [b.value.len()] || entry.role != TensorRole::RunningStat {
            return Err(Error::Format(format!("unexpected tensor {:?}", entry.name)));
        }
        b.value = Array1::from(floats(&entry.shape, &mut pos)?);
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Ok(Checkpoint {
        weights,
        labels: header.labels,
        train_config: header.train_config,
        hash: sha256_hex(bytes),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::build_network;

    fn labels(n: usize) -> LabelRegistry {
        LabelRegistry::new((0..n).map(|i| format!("s{i}")).collect()).unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let net = build_network(3, 5).unwrap();
        let cfg = serde_json::json!({"epochs": 2});
        let bytes = encode_checkpoint(&net, &labels(3), &cfg).unwrap();
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.weights.params(), net.params());
        assert_eq!(ck.weights.buffers(), net.buffers());
        assert_eq!(ck.train_config, cfg);
        assert_eq!(encode_checkpoint(&ck.weights, &ck.labels, &cfg).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let net = build_network(2, 1).unwrap();
        let bytes = encode_checkpoint(&net, &labels(2), &serde_json::Value::Null).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        assert!(encode_checkpoint(&net, &labels(3), &serde_json::Value::Null).is_err());
    }
}
