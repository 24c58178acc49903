//! Data-path framing.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "PMCK"
//!      4     2  version (u16, big-endian)
//!      6    16  subsystem id, zero-padded
//!     22     1  kind: 1 Entity, 2 SharedRef, 3 EndOfSubsystem, 4 EndOfProcess
//!     23     4  sequence (u32, big-endian), per (event, subsystem), from 0
//!     27     4  payload_len (u32, big-endian)
//!     31     n  payload
//!   31+n     4  CRC-32 (IEEE) over bytes [0, 31+n), big-endian
//! ```

use crate::ids::SubsystemId;

use super::MediumError;

pub const CHUNK_MAGIC: [u8; 4] = *b"PMCK";
pub const WIRE_VERSION: u16 = 1;
pub const CHUNK_HEADER_LEN: usize = 31;
pub const CHUNK_TRAILER_LEN: usize = 4;
/// Per-chunk wire bytes on top of the payload.
pub const CHUNK_OVERHEAD: usize = CHUNK_HEADER_LEN + CHUNK_TRAILER_LEN;
/// Upper bound on a single payload; anything larger is treated as a corrupt header.
pub const MAX_PAYLOAD: u32 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ChunkKind {
    Entity = 1,
    SharedRef = 2,
    EndOfSubsystem = 3,
    EndOfProcess = 4,
}

impl ChunkKind {
    pub fn from_wire(b: u8) -> Option<Self> {
        Some(match b {
            1 => ChunkKind::Entity,
            2 => ChunkKind::SharedRef,
            3 => ChunkKind::EndOfSubsystem,
            4 => ChunkKind::EndOfProcess,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub subsystem: SubsystemId,
    pub kind: ChunkKind,
    pub sequence: u32,
    pub payload: Vec<u8>,
}

/// Decoded fixed header of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkHeader {
    pub version: u16,
    pub subsystem: SubsystemId,
    pub kind: ChunkKind,
    pub sequence: u32,
    pub payload_len: u32,
}

impl ChunkHeader {
    pub fn frame_len(&self) -> usize {
        CHUNK_OVERHEAD + self.payload_len as usize
    }
}

impl Chunk {
    pub fn new(subsystem: SubsystemId, kind: ChunkKind, sequence: u32, payload: Vec<u8>) -> Self {
        Chunk {
            subsystem,
            kind,
            sequence,
            payload,
        }
    }

    pub fn end_of_subsystem(subsystem: SubsystemId, sequence: u32) -> Self {
        Chunk::new(subsystem, ChunkKind::EndOfSubsystem, sequence, Vec::new())
    }

    pub fn end_of_process() -> Self {
        Chunk::new(SubsystemId::NONE, ChunkKind::EndOfProcess, 0, Vec::new())
    }

    pub fn wire_len(&self) -> usize {
        CHUNK_OVERHEAD + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&CHUNK_MAGIC);
        out.extend_from_slice(&WIRE_VERSION.to_be_bytes());
        out.extend_from_slice(self.subsystem.as_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.sequence.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        out
    }

    /// Decodes one complete frame, verifying magic, version and checksum.
    pub fn decode(frame: &[u8]) -> Result<Chunk, MediumError> {
        if frame.len() < CHUNK_HEADER_LEN {
            return Err(MediumError::TruncatedStream);
        }
        let header = parse_header(frame[..CHUNK_HEADER_LEN].try_into().unwrap())?;
        if frame.len() != header.frame_len() {
            return Err(MediumError::TruncatedStream);
        }
        let body_end = CHUNK_HEADER_LEN + header.payload_len as usize;
        let expected = u32::from_be_bytes(frame[body_end..].try_into().unwrap());
        if crc32fast::hash(&frame[..body_end]) != expected {
            return Err(MediumError::ChecksumMismatch {
                subsystem: header.subsystem,
                sequence: header.sequence,
            });
        }
        Ok(Chunk {
            subsystem: header.subsystem,
            kind: header.kind,
            sequence: header.sequence,
            payload: frame[CHUNK_HEADER_LEN..body_end].to_vec(),
        })
    }
}

/// Parses the fixed header. A header that cannot delimit a frame is a
/// protocol error; the checksum is not checked here.
pub fn parse_header(raw: &[u8; CHUNK_HEADER_LEN]) -> Result<ChunkHeader, MediumError> {
    if raw[..4] != CHUNK_MAGIC {
        return Err(MediumError::Protocol(format!(
            "bad chunk magic {:02x?}",
            &raw[..4]
        )));
    }
    let version = u16::from_be_bytes([raw[4], raw[5]]);
    if version != WIRE_VERSION {
        return Err(MediumError::Protocol(format!(
            "unsupported chunk version {version}"
        )));
    }
    let subsystem = SubsystemId::from_wire(raw[6..22].try_into().unwrap());
    let kind = ChunkKind::from_wire(raw[22])
        .ok_or_else(|| MediumError::Protocol(format!("unknown chunk kind {}", raw[22])))?;
    let sequence = u32::from_be_bytes(raw[23..27].try_into().unwrap());
    let payload_len = u32::from_be_bytes(raw[27..31].try_into().unwrap());
    if payload_len > MAX_PAYLOAD {
        return Err(MediumError::Protocol(format!(
            "payload length {payload_len} exceeds limit"
        )));
    }
    Ok(ChunkHeader {
        version,
        subsystem,
        kind,
        sequence,
        payload_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Chunk {
        Chunk::new(
            SubsystemId::new("mem").unwrap(),
            ChunkKind::Entity,
            7,
            vec![1, 2, 3, 4, 5],
        )
    }

    #[test]
    fn layout_is_byte_exact() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"PMCK");
        assert_eq!(&bytes[4..6], &[0, 1]);
        assert_eq!(&bytes[6..9], b"mem");
        assert!(bytes[9..22].iter().all(|b| *b == 0));
        assert_eq!(bytes[22], 1);
        assert_eq!(&bytes[23..27], &[0, 0, 0, 7]);
        assert_eq!(&bytes[27..31], &[0, 0, 0, 5]);
        assert_eq!(&bytes[31..36], &[1, 2, 3, 4, 5]);
        let crc = crc32fast::hash(&bytes[..36]);
        assert_eq!(&bytes[36..], &crc.to_be_bytes());
        assert_eq!(bytes.len(), 5 + CHUNK_OVERHEAD);
    }

    #[test]
    fn end_markers_have_empty_payload() {
        let e = Chunk::end_of_subsystem(SubsystemId::new("cpu").unwrap(), 3).encode();
        assert_eq!(e.len(), CHUNK_OVERHEAD);
        assert_eq!(e[22], 3);
        let p = Chunk::end_of_process().encode();
        assert_eq!(p[22], 4);
    }

    proptest! {
        #[test]
        fn roundtrip(seq in any::<u32>(), payload in proptest::collection::vec(any::<u8>(), 0..300)) {
            let c = Chunk::new(SubsystemId::new("file").unwrap(), ChunkKind::SharedRef, seq, payload);
            prop_assert_eq!(Chunk::decode(&c.encode()).unwrap(), c);
        }

        #[test]
        fn any_single_bit_flip_is_detected(
            payload in proptest::collection::vec(any::<u8>(), 0..64),
            bit in any::<prop::sample::Index>(),
        ) {
            let c = Chunk::new(SubsystemId::new("mem").unwrap(), ChunkKind::Entity, 3, payload);
            let mut bytes = c.encode();
            let i = bit.index(bytes.len() * 8);
            bytes[i / 8] ^= 1 << (i % 8);
            prop_assert!(Chunk::decode(&bytes).is_err());
        }
    }
}
