//! Checkpoint files: the magic `OSTR1`, a newline, a one-line JSON header
//! with the config and the ordered `{name, shape}` list, a newline, then the
//! raw little-endian `f32` data of every tensor in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::params::layout;
use crate::net::{init_params, NetConfig, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8] = b"OSTR1";
const MAGIC_PREFIX: &[u8] = b"OSTR";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: NetConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn checkpoint_bytes<T: Scalar>(params: &ParamStore<T>, config: &NetConfig) -> Result<Vec<u8>> {
    let header = Header {
        config: config.clone(),
        tensors: params
            .iter()
            .map(|(name, p)| TensorEntry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let mut out = Vec::with_capacity(params.num_scalars() * 4 + 4096);
    out.extend_from_slice(MAGIC);
    out.push(b'\n');
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for (_, p) in params.iter() {
        for &v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(params: &ParamStore<T>, config: &NetConfig, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(params, config)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, trusting the config stored in its header.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, NetConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, None)
}

/// Reads a checkpoint that must match `expected` tensor for tensor.
pub fn load_checkpoint_for<T: Scalar>(path: &Path, expected: &NetConfig) -> Result<ParamStore<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_checkpoint(&bytes, Some(expected))?.0)
}

pub fn parse_checkpoint<T: Scalar>(
    bytes: &[u8],
    expected: Option<&NetConfig>,
) -> Result<(ParamStore<T>, NetConfig)> {
    if bytes.len() < MAGIC.len() || !bytes.starts_with(MAGIC_PREFIX) {
        return Err(Error::Format("missing OSTR magic".into()));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Version {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..MAGIC.len()]).into_owned(),
        });
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.first() != Some(&b'\n') {
        return Err(Error::Format("expected newline after magic".into()));
    }
    let rest = &rest[1..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Truncated("header is not terminated".into()))?;
    let header: Header = serde_json::from_slice(&rest[..end])?;
    let mut data = &rest[end + 1..];

    let config = expected.cloned().unwrap_or_else(|| header.config.clone());
    config.validate()?;
    let template = layout(&config);
    for (i, (name, shape, _, _)) in template.iter().enumerate() {
        let found = header.tensors.get(i).ok_or_else(|| {
            Error::Format(format!("checkpoint lacks tensor `{name}`"))
        })?;
        if &found.name != name {
            return Err(Error::Format(format!(
                "tensor {i} is `{}`, config expects `{name}`",
                found.name
            )));
        }
        if &found.shape != shape {
            return Err(Error::ParamShape {
                name: name.clone(),
                expected: shape.clone(),
                found: found.shape.clone(),
            });
        }
    }
    if header.tensors.len() != template.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, config expects {}",
            header.tensors.len(),
            template.len()
        )));
    }

    let mut store = init_params::<T>(&config, 0)?;
    for (_, p) in store.iter_mut() {
        let n = p.value.len();
        if data.len() < 4 * n {
            return Err(Error::Truncated(format!(
                "{} bytes left, {} needed",
                data.len(),
                4 * n
            )));
        }
        let values: Vec<T> = data[..4 * n]
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        p.value = Tensor::from_vec(p.value.shape(), values)?;
        data = &data[4 * n..];
    }
    if !data.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", data.len())));
    }
    Ok((store, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let config = NetConfig::tiny();
        let store = init_params::<f32>(&config, 11).unwrap();
        let bytes = checkpoint_bytes(&store, &config).unwrap();
        let (loaded, cfg) = parse_checkpoint::<f32>(&bytes, None).unwrap();
        assert_eq!(cfg, config);
        for ((_, a), (_, b)) in store.iter().zip(loaded.iter()) {
            assert_eq!(a.value, b.value);
            assert_eq!(a.kind, b.kind);
        }
        assert_eq!(checkpoint_bytes(&loaded, &cfg).unwrap(), bytes);
    }

    #[test]
    fn tampered_magic_is_a_format_error() {
        let config = NetConfig::tiny();
        let store = init_params::<f32>(&config, 1).unwrap();
        let mut bytes = checkpoint_bytes(&store, &config).unwrap();
        bytes[0] = b'X';
        assert!(matches!(parse_checkpoint::<f32>(&bytes, None), Err(Error::Format(_))));
        bytes[0] = b'O';
        bytes[4] = b'9';
        assert!(matches!(parse_checkpoint::<f32>(&bytes, None), Err(Error::Version { .. })));
    }

    #[test]
    fn truncated_data_is_detected() {
        let config = NetConfig::tiny();
        let store = init_params::<f32>(&config, 1).unwrap();
        let bytes = checkpoint_bytes(&store, &config).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(parse_checkpoint::<f32>(cut, None), Err(Error::Truncated(_))));
    }

    #[test]
    fn mismatched_config_names_first_offending_tensor() {
        let big = NetConfig::tiny();
        let mut small = NetConfig::tiny();
        small.backbone_channels = 32;
        small.dir_branch_channels = 4;
        let store = init_params::<f32>(&big, 1).unwrap();
        let bytes = checkpoint_bytes(&store, &big).unwrap();
        match parse_checkpoint::<f32>(&bytes, Some(&small)) {
            Err(Error::ParamShape { name, .. }) => assert_eq!(name, "encoder.stage0.down.weight"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }
}
