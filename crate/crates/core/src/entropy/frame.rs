//! The bitstream container.
//!
//! Stream layout (integers little-endian):
//!
//! ```text
//! magic "HDCV" | u8 version=1 | u16 width | u16 height | u8 intra_period |
//! u8 lambda_index | u32 frame_count | frame records ...
//! ```
//!
//! Each frame record:
//!
//! ```text
//! u8 frame_type (0 = I, 1 = P) | u32 crc32 | four blocks, each u32 length +
//! payload, in fixed order: motion hyper, motion latent, residual hyper,
//! residual latent
//! ```
//!
//! The CRC covers the frame-type byte and the four length-prefixed blocks,
//! so any corrupted payload byte is flagged instead of silently decoded.
//! I-frames carry zero-length motion blocks.

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"HDCV";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameType {
    Intra,
    Predicted,
}

impl FrameType {
    fn to_byte(self) -> u8 {
        match self {
            FrameType::Intra => 0,
            FrameType::Predicted => 1,
        }
    }

    fn from_byte(b: u8) -> Result<FrameType> {
        match b {
            0 => Ok(FrameType::Intra),
            1 => Ok(FrameType::Predicted),
            other => Err(Error::Format(format!("unknown frame type {other}"))),
        }
    }
}

/// One coded frame: the four entropy-coded payloads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub frame_type: FrameType,
    pub motion_hyper: Vec<u8>,
    pub motion_latent: Vec<u8>,
    pub residual_hyper: Vec<u8>,
    pub residual_latent: Vec<u8>,
}

impl FrameRecord {
    /// Serialized size in bytes: type + crc + four (length + payload) blocks.
    pub fn byte_len(&self) -> usize {
        1 + 4
            + 4 * 4
            + self.motion_hyper.len()
            + self.motion_latent.len()
            + self.residual_hyper.len()
            + self.residual_latent.len()
    }

    /// Bits per pixel of this record for a width x height frame.
    pub fn bpp(&self, width: usize, height: usize) -> f64 {
        8.0 * self.byte_len() as f64 / (width * height) as f64
    }

    fn blocks(&self) -> [&[u8]; 4] {
        [
            &self.motion_hyper,
            &self.motion_latent,
            &self.residual_hyper,
            &self.residual_latent,
        ]
    }

    fn crc(&self) -> u32 {
        let mut h = Crc32::new();
        h.update(&[self.frame_type.to_byte()]);
        for block in self.blocks() {
            h.update(&(block.len() as u32).to_le_bytes());
            h.update(block);
        }
        h.finish()
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.push(self.frame_type.to_byte());
        out.extend_from_slice(&self.crc().to_le_bytes());
        for block in self.blocks() {
            out.extend_from_slice(&(block.len() as u32).to_le_bytes());
            out.extend_from_slice(block);
        }
    }

    pub fn read_from(bytes: &[u8], pos: &mut usize, frame_index: usize) -> Result<FrameRecord> {
        let frame_type = FrameType::from_byte(take_u8(bytes, pos)?)?;
        let stored_crc = take_u32(bytes, pos)?;
        let mut blocks: [Vec<u8>; 4] = Default::default();
        for block in blocks.iter_mut() {
            let len = take_u32(bytes, pos)? as usize;
            if *pos + len > bytes.len() {
                return Err(Error::Format(format!(
                    "frame {frame_index}: payload of {len} bytes overruns stream"
                )));
            }
            *block = bytes[*pos..*pos + len].to_vec();
            *pos += len;
        }
        let [motion_hyper, motion_latent, residual_hyper, residual_latent] = blocks;
        let record = FrameRecord {
            frame_type,
            motion_hyper,
            motion_latent,
            residual_hyper,
            residual_latent,
        };
        if record.crc() != stored_crc {
            return Err(Error::CrcMismatch { frame: frame_index });
        }
        Ok(record)
    }
}

/// Stream-level header; everything a decoder needs besides the checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    pub width: u16,
    pub height: u16,
    pub intra_period: u8,
    pub lambda_index: u8,
    pub frame_count: u32,
}

impl StreamHeader {
    pub const BYTE_LEN: usize = 4 + 1 + 2 + 2 + 1 + 1 + 4;

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.intra_period);
        out.push(self.lambda_index);
        out.extend_from_slice(&self.frame_count.to_le_bytes());
    }

    pub fn read_from(bytes: &[u8], pos: &mut usize) -> Result<StreamHeader> {
        if bytes.len() < *pos + Self::BYTE_LEN {
            return Err(Error::Format("stream shorter than header".into()));
        }
        if bytes[*pos..*pos + 4] != MAGIC {
            return Err(Error::Format("bad magic, not an HDCV stream".into()));
        }
        *pos += 4;
        let version = take_u8(bytes, pos)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let width = take_u16(bytes, pos)?;
        let height = take_u16(bytes, pos)?;
        let intra_period = take_u8(bytes, pos)?;
        let lambda_index = take_u8(bytes, pos)?;
        let frame_count = take_u32(bytes, pos)?;
        Ok(StreamHeader {
            width,
            height,
            intra_period,
            lambda_index,
            frame_count,
        })
    }
}

fn take_u8(bytes: &[u8], pos: &mut usize) -> Result<u8> {
    let b = *bytes
        .get(*pos)
        .ok_or_else(|| Error::Format("unexpected end of stream".into()))?;
    *pos += 1;
    Ok(b)
}

fn take_u16(bytes: &[u8], pos: &mut usize) -> Result<u16> {
    if *pos + 2 > bytes.len() {
        return Err(Error::Format("unexpected end of stream".into()));
    }
    let v = u16::from_le_bytes([bytes[*pos], bytes[*pos + 1]]);
    *pos += 2;
    Ok(v)
}

fn take_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    if *pos + 4 > bytes.len() {
        return Err(Error::Format("unexpected end of stream".into()));
    }
    let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
    *pos += 4;
    Ok(v)
}

/// CRC-32 (IEEE, reflected polynomial 0xEDB88320).
pub struct Crc32 {
    state: u32,
}

impl Default for Crc32 {
    fn default() -> Self {
        Self::new()
    }
}

impl Crc32 {
    pub fn new() -> Crc32 {
        Crc32 { state: 0xFFFF_FFFF }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        let table = crc_table();
        for &b in bytes {
            let idx = ((self.state ^ b as u32) & 0xFF) as usize;
            self.state = (self.state >> 8) ^ table[idx];
        }
    }

    pub fn finish(self) -> u32 {
        self.state ^ 0xFFFF_FFFF
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut h = Crc32::new();
    h.update(bytes);
    h.finish()
}

fn crc_table() -> &'static [u32; 256] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 {
                    0xEDB8_8320 ^ (c >> 1)
                } else {
                    c >> 1
                };
            }
            *slot = c;
        }
        table
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32_known_vector() {
        // "123456789" -> 0xCBF43926 (IEEE check value)
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn record_round_trip_and_length_arithmetic() {
        let record = FrameRecord {
            frame_type: FrameType::Predicted,
            motion_hyper: vec![1, 2, 3],
            motion_latent: vec![4; 10],
            residual_hyper: vec![],
            residual_latent: vec![9, 9],
        };
        let mut bytes = Vec::new();
        record.write_to(&mut bytes);
        assert_eq!(bytes.len(), record.byte_len());
        assert_eq!(record.byte_len(), 1 + 4 + 16 + 3 + 10 + 2);
        let mut pos = 0;
        let back = FrameRecord::read_from(&bytes, &mut pos, 0).unwrap();
        assert_eq!(back, record);
        assert_eq!(pos, bytes.len());
    }

    #[test]
    fn intra_records_have_empty_motion_blocks() {
        let record = FrameRecord {
            frame_type: FrameType::Intra,
            motion_hyper: vec![],
            motion_latent: vec![],
            residual_hyper: vec![5, 6],
            residual_latent: vec![7, 8, 9],
        };
        let mut bytes = Vec::new();
        record.write_to(&mut bytes);
        let back = FrameRecord::read_from(&bytes, &mut 0_usize.clone(), 0).unwrap();
        assert_eq!(back.motion_hyper.len(), 0);
        assert_eq!(back.motion_latent.len(), 0);
    }

    #[test]
    fn corrupted_payload_byte_is_flagged() {
        let record = FrameRecord {
            frame_type: FrameType::Predicted,
            motion_hyper: vec![1, 2, 3, 4],
            motion_latent: vec![5; 32],
            residual_hyper: vec![6; 8],
            residual_latent: vec![7; 64],
        };
        let mut bytes = Vec::new();
        record.write_to(&mut bytes);
        for flip in [6usize, 20, bytes.len() - 1] {
            let mut corrupted = bytes.clone();
            corrupted[flip] ^= 0x40;
            let err = FrameRecord::read_from(&corrupted, &mut 0, 3).unwrap_err();
            assert!(
                matches!(err, Error::CrcMismatch { frame: 3 }) || matches!(err, Error::Format(_)),
                "unexpected: {err}"
            );
        }
    }

    #[test]
    fn header_round_trip() {
        let h = StreamHeader {
            width: 1920,
            height: 1080,
            intra_period: 12,
            lambda_index: 2,
            frame_count: 97,
        };
        let mut bytes = Vec::new();
        h.write_to(&mut bytes);
        assert_eq!(bytes.len(), StreamHeader::BYTE_LEN);
        let mut pos = 0;
        assert_eq!(StreamHeader::read_from(&bytes, &mut pos).unwrap(), h);
    }

    #[test]
    fn bpp_is_definitional() {
        let record = FrameRecord {
            frame_type: FrameType::Predicted,
            motion_hyper: vec![0; 10],
            motion_latent: vec![0; 20],
            residual_hyper: vec![0; 30],
            residual_latent: vec![0; 40],
        };
        let expect = 8.0 * record.byte_len() as f64 / (64.0 * 64.0);
        assert_eq!(record.bpp(64, 64), expect);
    }
}
