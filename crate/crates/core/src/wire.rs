//! Byte formats for moving models between devices and the server.
//!
//! ## Encoded model
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FTL1"
//! 4       4     embedding dim E   (u32 LE)
//! 8       4     num classes C     (u32 LE)
//! 12      4     CRC-32/IEEE of payload (u32 LE)
//! 16      4n    payload: n = C*E + C float32 LE, weight rows by class then bias
//! ```
//!
//! ## Frames
//!
//! The encoded model crosses the link in 4-byte payload frames. Each frame is
//! 8 bytes on the wire:
//!
//! ```text
//! u16 seq (LE) | u8 flags (bit0 = last) | u8 len (0..=4) | 4 payload bytes (zero padded)
//! ```
//!
//! Every frame but the last carries exactly 4 bytes. An empty byte string is
//! sent as a single `len = 0` frame with the last flag set.

use thiserror::Error;

use crate::federation::ModelBlob;
use crate::nn::HeadShape;

pub const MODEL_MAGIC: &[u8; 4] = b"FTL1";
pub const MODEL_HEADER_LEN: usize = 16;
pub const FRAME_PAYLOAD: usize = 4;
pub const FRAME_LEN: usize = 8;
pub const FLAG_LAST: u8 = 0x01;
/// Largest byte string that fits in one sequence-number space.
pub const MAX_FRAMED_LEN: usize = (u16::MAX as usize + 1) * FRAME_PAYLOAD;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("payload corrupted: header crc {expected:08x}, computed {actual:08x}")]
    Corrupt { expected: u32, actual: u32 },
    #[error("cannot encode: {0}")]
    Encoding(String),
    #[error("frame sequence broken: expected seq {expected}, got {got}")]
    Sequencing { expected: u16, got: u16 },
    #[error("frame stream ended without a last-frame marker")]
    Incomplete,
    #[error("malformed frame {seq}: {reason}")]
    MalformedFrame { seq: u16, reason: String },
}

/// Size in bytes of an encoded model of the given shape.
pub fn encoded_len(shape: HeadShape) -> usize {
    MODEL_HEADER_LEN + 4 * shape.param_count()
}

pub fn encode_model(blob: &ModelBlob) -> Result<Vec<u8>, WireError> {
    let shape = blob.shape();
    let e = u32::try_from(shape.embedding_dim)
        .map_err(|_| WireError::Encoding(format!("E={} exceeds u32", shape.embedding_dim)))?;
    let c = u32::try_from(shape.num_classes)
        .map_err(|_| WireError::Encoding(format!("C={} exceeds u32", shape.num_classes)))?;
    let mut payload = Vec::with_capacity(4 * blob.values().len());
    for &v in blob.values() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut out = Vec::with_capacity(MODEL_HEADER_LEN + payload.len());
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&e.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelBlob, WireError> {
    if bytes.len() < MODEL_HEADER_LEN {
        return Err(WireError::Truncated {
            expected: MODEL_HEADER_LEN,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MODEL_MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let (e, c, crc) = (u32_at(4) as usize, u32_at(8) as usize, u32_at(12));
    let expected = c
        .checked_mul(e)
        .and_then(|w| w.checked_add(c))
        .and_then(|n| n.checked_mul(4))
        .and_then(|p| p.checked_add(MODEL_HEADER_LEN))
        .unwrap_or(usize::MAX);
    if bytes.len() != expected {
        return Err(WireError::Truncated {
            expected,
            got: bytes.len(),
        });
    }
    let payload = &bytes[MODEL_HEADER_LEN..];
    let actual = crc32fast::hash(payload);
    if actual != crc {
        return Err(WireError::Corrupt { expected: crc, actual });
    }
    if e == 0 || c == 0 {
        return Err(WireError::Encoding(format!("zero dimension E={e}, C={c}")));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    ModelBlob::new(HeadShape::new(e, c), values).map_err(|err| WireError::Encoding(err.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frame {
    pub seq: u16,
    pub flags: u8,
    pub len: u8,
    pub payload: [u8; FRAME_PAYLOAD],
}

impl Frame {
    pub fn is_last(&self) -> bool {
        self.flags & FLAG_LAST != 0
    }

    pub fn data(&self) -> &[u8] {
        &self.payload[..(self.len as usize).min(FRAME_PAYLOAD)]
    }

    pub fn to_bytes(&self) -> [u8; FRAME_LEN] {
        let mut out = [0u8; FRAME_LEN];
        out[..2].copy_from_slice(&self.seq.to_le_bytes());
        out[2] = self.flags;
        out[3] = self.len;
        out[4..].copy_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: [u8; FRAME_LEN]) -> Self {
        Self {
            seq: u16::from_le_bytes([bytes[0], bytes[1]]),
            flags: bytes[2],
            len: bytes[3],
            payload: bytes[4..].try_into().unwrap(),
        }
    }
}

/// Number of frames needed for `len` bytes.
pub fn frame_count(len: usize) -> usize {
    len.div_ceil(FRAME_PAYLOAD).max(1)
}

pub fn frame_stream(bytes: &[u8]) -> Result<Vec<Frame>, WireError> {
    if bytes.len() > MAX_FRAMED_LEN {
        return Err(WireError::Encoding(format!(
            "{} bytes exceed the {MAX_FRAMED_LEN}-byte frame sequence space",
            bytes.len()
        )));
    }
    if bytes.is_empty() {
        return Ok(vec![Frame {
            seq: 0,
            flags: FLAG_LAST,
            len: 0,
            payload: [0; FRAME_PAYLOAD],
        }]);
    }
    let total = frame_count(bytes.len());
    Ok(bytes
        .chunks(FRAME_PAYLOAD)
        .enumerate()
        .map(|(i, chunk)| {
            let mut payload = [0u8; FRAME_PAYLOAD];
            payload[..chunk.len()].copy_from_slice(chunk);
            Frame {
                seq: i as u16,
                flags: if i + 1 == total { FLAG_LAST } else { 0 },
                len: chunk.len() as u8,
                payload,
            }
        })
        .collect())
}

pub fn unframe_stream(frames: &[Frame]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(frames.len() * FRAME_PAYLOAD);
    for (i, frame) in frames.iter().enumerate() {
        let expected = i as u16;
        if i > u16::MAX as usize || frame.seq != expected {
            return Err(WireError::Sequencing {
                expected,
                got: frame.seq,
            });
        }
        if frame.len as usize > FRAME_PAYLOAD {
            return Err(WireError::MalformedFrame {
                seq: frame.seq,
                reason: format!("length {} exceeds {FRAME_PAYLOAD}", frame.len),
            });
        }
        out.extend_from_slice(frame.data());
        if frame.is_last() {
            if let Some(extra) = frames.get(i + 1) {
                return Err(WireError::Sequencing {
                    expected,
                    got: extra.seq,
                });
            }
            return Ok(out);
        }
        if frame.len as usize != FRAME_PAYLOAD {
            return Err(WireError::MalformedFrame {
                seq: frame.seq,
                reason: format!("short frame ({} bytes) before the last frame", frame.len),
            });
        }
    }
    Err(WireError::Incomplete)
}

/// Frames `bytes` and serialises the frames back to back.
pub fn frame_bytes(bytes: &[u8]) -> Result<Vec<u8>, WireError> {
    Ok(frame_stream(bytes)?.iter().flat_map(|f| f.to_bytes()).collect())
}

/// Inverse of [`frame_bytes`].
pub fn unframe_bytes(wire: &[u8]) -> Result<Vec<u8>, WireError> {
    if !wire.len().is_multiple_of(FRAME_LEN) {
        return Err(WireError::Truncated {
            expected: wire.len().div_ceil(FRAME_LEN) * FRAME_LEN,
            got: wire.len(),
        });
    }
    let frames: Vec<Frame> = wire
        .chunks_exact(FRAME_LEN)
        .map(|c| Frame::from_bytes(c.try_into().unwrap()))
        .collect();
    unframe_stream(&frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_blob(shape: HeadShape) -> ModelBlob {
        let n = shape.param_count();
        ModelBlob::new(shape, (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn perf_mobilenet_encoding_is_2072_bytes() {
        let bytes = encode_model(&ramp_blob(HeadShape::PERF_MOBILENET)).unwrap();
        assert_eq!(bytes.len(), 2072);
        assert_eq!(encoded_len(HeadShape::PERF_MOBILENET), 2072);
        assert_eq!(frame_stream(&bytes).unwrap().len(), 518);
    }

    #[test]
    fn smallest_zero_blob_golden() {
        let blob = ModelBlob::new(HeadShape::new(1, 1), vec![0.0, 0.0]).unwrap();
        let bytes = encode_model(&blob).unwrap();
        let crc = crc32fast::hash(&[0u8; 8]);
        let mut golden = b"FTL1".to_vec();
        golden.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0]);
        golden.extend_from_slice(&crc.to_le_bytes());
        golden.extend_from_slice(&[0; 8]);
        assert_eq!(bytes, golden);
        // CRC-32/IEEE of eight zero bytes.
        assert_eq!(crc, 0x6522_DF69);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let good = encode_model(&ramp_blob(HeadShape::new(3, 2))).unwrap();
        assert!(matches!(decode_model(&[]), Err(WireError::Truncated { got: 0, .. })));

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(WireError::BadMagic(_))));

        assert!(matches!(
            decode_model(&good[..good.len() - 1]),
            Err(WireError::Truncated { .. })
        ));

        let mut flipped = good.clone();
        flipped[20] ^= 0x40;
        assert!(matches!(decode_model(&flipped), Err(WireError::Corrupt { .. })));
    }

    #[test]
    fn header_claiming_huge_shape_is_rejected() {
        let mut bytes = encode_model(&ramp_blob(HeadShape::new(2, 2))).unwrap();
        bytes[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_model(&bytes), Err(WireError::Truncated { .. })));
    }

    #[test]
    fn empty_stream_is_one_last_frame() {
        let frames = frame_stream(&[]).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!((frames[0].len, frames[0].is_last()), (0, true));
        assert_eq!(unframe_stream(&frames).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn unframe_errors() {
        let frames = frame_stream(&[1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
        assert_eq!(frames.len(), 3);

        let mut gap = frames.clone();
        gap.remove(1);
        assert!(matches!(
            unframe_stream(&gap),
            Err(WireError::Sequencing { expected: 1, got: 2 })
        ));

        let mut dup = frames.clone();
        dup.insert(1, frames[0]);
        assert!(matches!(
            unframe_stream(&dup),
            Err(WireError::Sequencing { expected: 1, got: 0 })
        ));

        assert_eq!(unframe_stream(&frames[..2]), Err(WireError::Incomplete));

        let mut trailing = frames.clone();
        trailing.push(Frame {
            seq: 3,
            flags: 0,
            len: 0,
            payload: [0; 4],
        });
        assert!(matches!(unframe_stream(&trailing), Err(WireError::Sequencing { .. })));

        let mut short = frames.clone();
        short[0].len = 2;
        assert!(matches!(
            unframe_stream(&short),
            Err(WireError::MalformedFrame { seq: 0, .. })
        ));
    }

    #[test]
    fn frame_byte_layout() {
        let wire = frame_bytes(&[0xaa, 0xbb, 0xcc, 0xdd, 0xee]).unwrap();
        assert_eq!(
            wire,
            vec![0, 0, 0, 4, 0xaa, 0xbb, 0xcc, 0xdd, 1, 0, 1, 1, 0xee, 0, 0, 0]
        );
        assert_eq!(unframe_bytes(&wire).unwrap(), vec![0xaa, 0xbb, 0xcc, 0xdd, 0xee]);
        assert!(matches!(unframe_bytes(&wire[..15]), Err(WireError::Truncated { .. })));
    }

    #[test]
    fn oversize_input_rejected() {
        assert!(matches!(
            frame_stream(&vec![0u8; MAX_FRAMED_LEN + 1]),
            Err(WireError::Encoding(_))
        ));
        assert_eq!(frame_stream(&vec![0u8; MAX_FRAMED_LEN]).unwrap().len(), 65536);
    }
}
