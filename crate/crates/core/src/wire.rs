//! Binary wire framing between sensors and the collector.
//!
//! Every message is one self-delimiting frame:
//!
//! ```text
//! offset  len  field
//! 0       4    magic 53 48 44 46 ("SHDF")
//! 4       1    version (currently 1)
//! 5       1    msg_type (HELLO=0 SAMPLE=1 HEARTBEAT=2 TIMEREQ=3 TIMERESP=4 BYE=5)
//! 6       2    device_id, u16 BE
//! 8       1    modality byte
//! 9       4    sequence, u32 BE
//! 13      8    device_timestamp_ns, u64 BE (two's-complement of the i64)
//! 21      4    payload_len, u32 BE  (<= 2^20)
//! 25      n    payload
//! 25+n    4    CRC-32 (reflected 0x04C11DB7) over bytes [0, 25+n)
//! ```
//!
//! All multi-byte fields are big-endian. An empty-payload frame is therefore
//! exactly 29 bytes. The CRC covers header and payload, so any single-bit
//! corruption anywhere in a frame is rejected by [`Frame::decode_exact`].

use thiserror::Error;

use crate::crc::crc32;
use crate::time::Nanos;

pub const MAGIC: [u8; 4] = *b"SHDF";
pub const WIRE_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 25;
pub const TRAILER_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0,
    Sample = 1,
    Heartbeat = 2,
    TimeReq = 3,
    TimeResp = 4,
    Bye = 5,
}

impl MsgType {
    pub fn from_byte(b: u8) -> Option<MsgType> {
        Some(match b {
            0 => MsgType::Hello,
            1 => MsgType::Sample,
            2 => MsgType::Heartbeat,
            3 => MsgType::TimeReq,
            4 => MsgType::TimeResp,
            5 => MsgType::Bye,
            _ => return None,
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("payload of {0} bytes exceeds the 2^20 limit")]
    PayloadTooLarge(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    BadMessageType(u8),
    #[error("declared payload of {0} bytes exceeds the 2^20 limit")]
    PayloadTooLarge(u32),
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
}

/// One decoded wire frame. `modality` stays a raw byte here: unknown values
/// must survive transport so ingest can flag them rather than drop them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub device_id: u16,
    pub modality: u8,
    pub sequence: u32,
    pub device_ts: Nanos,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn empty(msg_type: MsgType, device_id: u16, modality: u8, sequence: u32, device_ts: Nanos) -> Frame {
        Frame { msg_type, device_id, modality, sequence, device_ts, payload: Vec::new() }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + TRAILER_LEN
    }

    pub fn encode(&self) -> Result<Vec<u8>, EncodeError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(EncodeError::PayloadTooLarge(self.payload.len()));
        }
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(&MAGIC);
        buf.push(WIRE_VERSION);
        buf.push(self.msg_type as u8);
        buf.extend_from_slice(&self.device_id.to_be_bytes());
        buf.push(self.modality);
        buf.extend_from_slice(&self.sequence.to_be_bytes());
        buf.extend_from_slice(&(self.device_ts as u64).to_be_bytes());
        buf.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        buf.extend_from_slice(&self.payload);
        let crc = crc32(&buf);
        buf.extend_from_slice(&crc.to_be_bytes());
        Ok(buf)
    }

    /// Decodes one frame from the front of `buf`, returning it and the byte
    /// count consumed. Leftover bytes are the caller's (stream decoding).
    pub fn decode(buf: &[u8]) -> Result<(Frame, usize), DecodeError> {
        if buf.len() < HEADER_LEN {
            return Err(DecodeError::Truncated { needed: HEADER_LEN, have: buf.len() });
        }
        if buf[0..4] != MAGIC {
            return Err(DecodeError::BadMagic(buf[0..4].try_into().unwrap()));
        }
        if buf[4] != WIRE_VERSION {
            return Err(DecodeError::UnsupportedVersion(buf[4]));
        }
        let payload_len = u32::from_be_bytes(buf[21..25].try_into().unwrap());
        if payload_len as usize > MAX_PAYLOAD {
            return Err(DecodeError::PayloadTooLarge(payload_len));
        }
        let total = HEADER_LEN + payload_len as usize + TRAILER_LEN;
        if buf.len() < total {
            return Err(DecodeError::Truncated { needed: total, have: buf.len() });
        }
        let crc_region = &buf[..total - TRAILER_LEN];
        let stored = u32::from_be_bytes(buf[total - TRAILER_LEN..total].try_into().unwrap());
        let computed = crc32(crc_region);
        if stored != computed {
            return Err(DecodeError::CrcMismatch { stored, computed });
        }
        let msg_type =
            MsgType::from_byte(buf[5]).ok_or(DecodeError::BadMessageType(buf[5]))?;
        let frame = Frame {
            msg_type,
            device_id: u16::from_be_bytes(buf[6..8].try_into().unwrap()),
            modality: buf[8],
            sequence: u32::from_be_bytes(buf[9..13].try_into().unwrap()),
            device_ts: u64::from_be_bytes(buf[13..21].try_into().unwrap()) as i64,
            payload: buf[25..25 + payload_len as usize].to_vec(),
        };
        Ok((frame, total))
    }

    /// Decodes a buffer that must contain exactly one frame. This is the
    /// form with the full corruption guarantee: any single-bit flip of an
    /// encoded frame fails with a typed error.
    pub fn decode_exact(buf: &[u8]) -> Result<Frame, DecodeError> {
        let (frame, consumed) = Frame::decode(buf)?;
        if consumed != buf.len() {
            return Err(DecodeError::TrailingBytes(buf.len() - consumed));
        }
        Ok(frame)
    }
}

/// Peeks the total encoded length of the frame starting at `buf`, if the
/// header is complete and sane. Used by stream readers to size reads.
pub fn peek_frame_len(buf: &[u8]) -> Result<usize, DecodeError> {
    if buf.len() < HEADER_LEN {
        return Err(DecodeError::Truncated { needed: HEADER_LEN, have: buf.len() });
    }
    if buf[0..4] != MAGIC {
        return Err(DecodeError::BadMagic(buf[0..4].try_into().unwrap()));
    }
    if buf[4] != WIRE_VERSION {
        return Err(DecodeError::UnsupportedVersion(buf[4]));
    }
    let payload_len = u32::from_be_bytes(buf[21..25].try_into().unwrap());
    if payload_len as usize > MAX_PAYLOAD {
        return Err(DecodeError::PayloadTooLarge(payload_len));
    }
    Ok(HEADER_LEN + payload_len as usize + TRAILER_LEN)
}
