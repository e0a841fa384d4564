//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                  |
//! |--------------|------------------------------------------|
//! | 4            | magic `DLFM`                             |
//! | 4            | format version (`u32`)                   |
//! | 4            | header length `n` (`u32`)                |
//! | `n`          | UTF-8 JSON header                        |
//! | rest         | tensor payload, `f64` little-endian      |
//!
//! The header records the model configuration, the normalization
//! statistics and a manifest of `(name, shape, offset)` entries, offsets
//! counted in bytes from the start of the payload. The positional table is
//! not stored; it is rebuilt from the configuration on load.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::pipeline::NormalizerStats;

use super::write_atomic;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DLFM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model together with the statistics its inputs were scaled by.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub stats: NormalizerStats,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    stats: NormalizerStats,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let params = &ckpt.params;
    if ckpt.stats.n_channels() != params.config.n_channels {
        return Err(Error::contract(format!(
            "statistics for {} channels, model has {}",
            ckpt.stats.n_channels(),
            params.config.n_channels
        )));
    }
    let mut offset = 0;
    let tensors = params
        .trainable_names()
        .into_iter()
        .zip(params.trainable())
        .map(|(name, t)| {
            let e = ManifestEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len() * 8;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: params.config.clone(),
        stats: ckpt.stats.clone(),
        tensors,
    })?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::contract("checkpoint header too large"))?;
    let mut out = Vec::with_capacity(12 + header.len() + offset);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.trainable() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing DLFM magic".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::Integrity("file ends inside the preamble".into()));
    }
    let version = read_u32(bytes, 4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = read_u32(bytes, 8) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Integrity(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let header: Header =
        serde_json::from_slice(&bytes[12..header_end]).map_err(|e| Error::Integrity(format!("bad header: {e}")))?;
    header.config.validate()?;
    if header.stats.n_channels() != header.config.n_channels || header.stats.means.len() != header.stats.stds.len() {
        return Err(Error::Integrity("statistics do not match the channel count".into()));
    }
    let payload = &bytes[header_end..];

    let mut params = init_params(&header.config, 0)?;
    let names = params.trainable_names();
    if names.len() != header.tensors.len() {
        return Err(Error::Integrity(format!(
            "manifest lists {} tensors, configuration implies {}",
            header.tensors.len(),
            names.len()
        )));
    }
    let mut expected_offset = 0usize;
    for ((entry, name), slot) in header.tensors.iter().zip(&names).zip(params.trainable_mut()) {
        if &entry.name != name || entry.shape != slot.shape() {
            return Err(Error::Integrity(format!(
                "manifest entry {:?} {:?} does not match expected {name:?} {:?}",
                entry.name,
                entry.shape,
                slot.shape()
            )));
        }
        if entry.offset != expected_offset {
            return Err(Error::Integrity(format!(
                "tensor {name:?} at offset {}, expected {expected_offset}",
                entry.offset
            )));
        }
        let end = entry.offset + slot.len() * 8;
        let raw = payload
            .get(entry.offset..end)
            .ok_or_else(|| Error::Integrity(format!("payload truncated inside tensor {name:?}")))?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        expected_offset = end;
    }
    if payload.len() != expected_offset {
        return Err(Error::Integrity(format!(
            "{} trailing payload bytes",
            payload.len() - expected_offset
        )));
    }
    Ok(Checkpoint {
        params,
        stats: header.stats,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            n_channels: 2,
            w_in: 12,
            horizon: 4,
            embed_dim: 5,
            p1: 4,
            p2: 5,
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
            seed: 3,
        };
        Checkpoint {
            params: init_params(&cfg, 3).unwrap(),
            stats: NormalizerStats {
                channel_names: vec!["a".into(), "b".into()],
                means: vec![0.5, -1.0],
                stds: vec![2.0, 1e-8],
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        assert_eq!(decode_checkpoint(&encode_checkpoint(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut b = encode_checkpoint(&sample()).unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        b[4] = 99;
        assert!(matches!(
            decode_checkpoint(&b),
            Err(Error::UnsupportedVersion { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let b = encode_checkpoint(&sample()).unwrap();
        assert!(matches!(decode_checkpoint(&b[..b.len() - 8]), Err(Error::Integrity(_))));
        assert!(matches!(decode_checkpoint(&b[..20]), Err(Error::Integrity(_))));
        let mut long = b.clone();
        long.extend_from_slice(&[0; 8]);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Integrity(_))));
    }
}
