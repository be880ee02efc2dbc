//! Checkpoint container: versioned named parameters with shape metadata and
//! the structural configuration they belong to. Loading refuses streams
//! whose configuration or parameter shapes do not match the build.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic "HDCK" | u8 version=1 | u32 meta_json_len | meta json |
//! u32 param_count | params... | u32 crc32 of everything before it
//! ```
//!
//! Each parameter: u16 name_len | name | 4 x u32 extents | f32 data.

use super::{Codec, RdLambda};
use crate::entropy::crc32;
use crate::error::{Error, Result};
use crate::nets::{CodecConfig, Params};
use crate::tensor::{Shape, Tensor};

const MAGIC: [u8; 4] = *b"HDCK";
const VERSION: u8 = 1;

/// Everything about a checkpoint besides the weights.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub config: CodecConfig,
    pub lambda: RdLambda,
    /// Last completed training stage (0 = fresh initialization).
    pub stage: u8,
    pub steps_trained: u64,
}

pub fn save(config: &CodecConfig, lambda: RdLambda, params: &Params, stage: u8, steps: u64) -> Vec<u8> {
    let meta = CheckpointMeta {
        config: *config,
        lambda,
        stage,
        steps_trained: steps,
    };
    let json = serde_json::to_vec(&meta).expect("meta serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let s = tensor.shape();
        for d in [s.b, s.c, s.h, s.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn load(bytes: &[u8]) -> Result<(CheckpointMeta, Params)> {
    if bytes.len() < 13 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic, not an HDCK checkpoint".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            bytes[4]
        )));
    }
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let body = &bytes[..bytes.len() - 4];
    if crc32(body) != stored_crc {
        return Err(Error::Format("checkpoint checksum mismatch".into()));
    }
    let mut pos = 5usize;
    let json_len = read_u32(body, &mut pos)? as usize;
    if pos + json_len > body.len() {
        return Err(Error::Format("checkpoint meta overruns".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&body[pos..pos + json_len])
        .map_err(|e| Error::Format(format!("bad checkpoint meta: {e}")))?;
    pos += json_len;
    let count = read_u32(body, &mut pos)? as usize;
    let mut params = Params::new();
    for _ in 0..count {
        let name_len = read_u16(body, &mut pos)? as usize;
        if pos + name_len > body.len() {
            return Err(Error::Format("parameter name overruns".into()));
        }
        let name = std::str::from_utf8(&body[pos..pos + name_len])
            .map_err(|_| Error::Format("parameter name is not utf-8".into()))?
            .to_string();
        pos += name_len;
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = read_u32(body, &mut pos)? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let n = shape.count();
        if pos + 4 * n > body.len() {
            return Err(Error::Format(format!("parameter {name} data overruns")));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(f32::from_le_bytes(
                body[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap(),
            ));
        }
        pos += 4 * n;
        params.insert(name, Tensor::new(shape, data));
    }
    Ok((meta, params))
}

fn read_u16(bytes: &[u8], pos: &mut usize) -> Result<u16> {
    if *pos + 2 > bytes.len() {
        return Err(Error::Format("unexpected end of checkpoint".into()));
    }
    let v = u16::from_le_bytes(bytes[*pos..*pos + 2].try_into().unwrap());
    *pos += 2;
    Ok(v)
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    if *pos + 4 > bytes.len() {
        return Err(Error::Format("unexpected end of checkpoint".into()));
    }
    let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
    *pos += 4;
    Ok(v)
}

impl Codec {
    /// Serializes configuration, lambda and all parameters.
    pub fn to_checkpoint(&self, stage: u8, steps_trained: u64) -> Vec<u8> {
        save(&self.config, self.lambda, &self.params, stage, steps_trained)
    }

    /// Rebuilds a codec from checkpoint bytes; fails on any config or shape
    /// mismatch with the stored structure.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Codec, CheckpointMeta)> {
        let (meta, params) = load(bytes)?;
        let codec = Codec::from_parts(meta.config, meta.lambda, params)?;
        Ok((codec, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::RdMetric;

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let codec = Codec::new(
            CodecConfig::desk(),
            RdLambda::new(1, RdMetric::Psnr).unwrap(),
            42,
        )
        .unwrap();
        let bytes = codec.to_checkpoint(0, 0);
        let (codec2, meta) = Codec::from_checkpoint(&bytes).unwrap();
        assert_eq!(meta.config, codec.config);
        assert_eq!(meta.lambda, codec.lambda);
        // serialization of the reloaded codec is identical
        assert_eq!(codec2.to_checkpoint(0, 0), bytes);
        // same seed, same bytes
        let again = Codec::new(
            CodecConfig::desk(),
            RdLambda::new(1, RdMetric::Psnr).unwrap(),
            42,
        )
        .unwrap();
        assert_eq!(again.to_checkpoint(0, 0), bytes);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let codec = Codec::new(
            CodecConfig::desk(),
            RdLambda::new(0, RdMetric::Psnr).unwrap(),
            7,
        )
        .unwrap();
        let mut bytes = codec.to_checkpoint(1, 100);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(Codec::from_checkpoint(&bytes).is_err());
    }

    #[test]
    fn config_mismatch_is_refused() {
        // a checkpoint for a single-kernel build cannot load into a
        // heterogeneous build: the parameter sets differ
        let mut cfg = CodecConfig::desk();
        cfg.compensation = crate::nets::CompKind::Single(3);
        let codec = Codec::new(cfg, RdLambda::new(0, RdMetric::Psnr).unwrap(), 7).unwrap();
        let bytes = codec.to_checkpoint(0, 0);
        let (meta, params) = load(&bytes).unwrap();
        let err = Codec::from_parts(CodecConfig::desk().into(), meta.lambda, params);
        assert!(err.is_err());
    }
}
