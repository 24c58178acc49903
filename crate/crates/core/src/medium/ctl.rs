//! Control-link framing and a buffered frame reader shared by all framed
//! byte streams.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "PMCT"
//!      4     2  version (u16, big-endian)
//!      6     1  kind
//!      7    16  migration token
//!     23     4  payload_len (u32, big-endian)
//!     27     n  payload
//!   27+n     4  CRC-32 (IEEE) over bytes [0, 27+n), big-endian
//! ```

use std::time::Instant;

use crate::ids::MigrationToken;

use super::{ByteRead, MediumError, MAX_PAYLOAD, WIRE_VERSION};

pub const CTL_MAGIC: [u8; 4] = *b"PMCT";
pub const CTL_HEADER_LEN: usize = 27;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CtlFrame {
    pub kind: u8,
    pub token: MigrationToken,
    pub payload: Vec<u8>,
}

impl CtlFrame {
    pub fn new(kind: u8, token: MigrationToken, payload: Vec<u8>) -> Self {
        CtlFrame {
            kind,
            token,
            payload,
        }
    }

    pub fn wire_len(&self) -> usize {
        CTL_HEADER_LEN + self.payload.len() + 4
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&CTL_MAGIC);
        out.extend_from_slice(&WIRE_VERSION.to_be_bytes());
        out.push(self.kind);
        out.extend_from_slice(&self.token.0);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        out
    }

    /// Length of the frame starting at `head`, once enough header is known.
    fn frame_len(head: &[u8]) -> Result<Option<usize>, MediumError> {
        if head.len() < CTL_HEADER_LEN {
            return Ok(None);
        }
        if head[..4] != CTL_MAGIC {
            return Err(MediumError::Protocol(format!(
                "bad control magic {:02x?}",
                &head[..4]
            )));
        }
        let version = u16::from_be_bytes([head[4], head[5]]);
        if version != WIRE_VERSION {
            return Err(MediumError::Protocol(format!(
                "unsupported control version {version}"
            )));
        }
        let len = u32::from_be_bytes(head[23..27].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(MediumError::Protocol(format!(
                "control payload length {len} exceeds limit"
            )));
        }
        Ok(Some(CTL_HEADER_LEN + len as usize + 4))
    }

    pub fn decode(frame: &[u8]) -> Result<CtlFrame, MediumError> {
        let len = Self::frame_len(frame)?.ok_or(MediumError::TruncatedStream)?;
        if frame.len() != len {
            return Err(MediumError::TruncatedStream);
        }
        let body_end = len - 4;
        let expected = u32::from_be_bytes(frame[body_end..].try_into().unwrap());
        if crc32fast::hash(&frame[..body_end]) != expected {
            return Err(MediumError::Protocol("control frame checksum mismatch".into()));
        }
        Ok(CtlFrame {
            kind: frame[6],
            token: MigrationToken(frame[7..23].try_into().unwrap()),
            payload: frame[CTL_HEADER_LEN..body_end].to_vec(),
        })
    }

    /// Reads the next frame. `Ok(None)` is a clean end of stream between frames.
    pub fn read_from(
        reader: &mut FrameReader,
        src: &mut dyn ByteRead,
        deadline: Option<Instant>,
    ) -> Result<Option<CtlFrame>, MediumError> {
        if !reader.fill(src, CTL_HEADER_LEN, deadline)? {
            return if reader.buffered().is_empty() {
                Ok(None)
            } else {
                Err(MediumError::TruncatedStream)
            };
        }
        let len = Self::frame_len(reader.buffered())?.expect("header buffered");
        if !reader.fill(src, len, deadline)? {
            return Err(MediumError::TruncatedStream);
        }
        let raw = reader.consume(len);
        CtlFrame::decode(&raw).map(Some)
    }
}

/// Accumulates bytes from a [`ByteRead`] so frames can be cut out whole,
/// keeping partial frames across timeouts.
#[derive(Debug, Default)]
pub struct FrameReader {
    buf: Vec<u8>,
}

impl FrameReader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn buffered(&self) -> &[u8] {
        &self.buf
    }

    /// Reads until at least `n` bytes are buffered. Returns `Ok(false)` if
    /// the stream ends first.
    pub fn fill(
        &mut self,
        src: &mut dyn ByteRead,
        n: usize,
        deadline: Option<Instant>,
    ) -> Result<bool, MediumError> {
        let mut chunk = [0u8; 16 * 1024];
        while self.buf.len() < n {
            let timeout = deadline.map(|d| d.saturating_duration_since(Instant::now()));
            let got = src.read_some(&mut chunk, timeout)?;
            if got == 0 {
                return Ok(false);
            }
            self.buf.extend_from_slice(&chunk[..got]);
        }
        Ok(true)
    }

    pub fn consume(&mut self, n: usize) -> Vec<u8> {
        let rest = self.buf.split_off(n);
        std::mem::replace(&mut self.buf, rest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::loopback_pair;

    #[test]
    fn roundtrip_through_pipe() {
        let (mut a, mut b) = loopback_pair("a", "b");
        let f1 = CtlFrame::new(1, MigrationToken([3; 16]), b"offer".to_vec());
        let f2 = CtlFrame::new(6, MigrationToken([3; 16]), Vec::new());
        let mut bytes = f1.encode();
        bytes.extend(f2.encode());
        // Split mid-header to exercise partial buffering.
        a.writer.write_all(&bytes[..10]).unwrap();
        let mut r = FrameReader::new();
        let soon = Some(Instant::now());
        assert_eq!(
            CtlFrame::read_from(&mut r, b.reader.as_mut(), soon),
            Err(MediumError::Timeout)
        );
        a.writer.write_all(&bytes[10..]).unwrap();
        a.writer.shutdown();
        assert_eq!(CtlFrame::read_from(&mut r, b.reader.as_mut(), None).unwrap(), Some(f1));
        assert_eq!(CtlFrame::read_from(&mut r, b.reader.as_mut(), None).unwrap(), Some(f2));
        assert_eq!(CtlFrame::read_from(&mut r, b.reader.as_mut(), None).unwrap(), None);
    }

    #[test]
    fn header_layout() {
        let f = CtlFrame::new(0x04, MigrationToken([0xab; 16]), vec![9, 9]);
        let b = f.encode();
        assert_eq!(&b[..4], b"PMCT");
        assert_eq!(&b[4..6], &[0, 1]);
        assert_eq!(b[6], 0x04);
        assert_eq!(&b[7..23], &[0xab; 16]);
        assert_eq!(&b[23..27], &[0, 0, 0, 2]);
        assert_eq!(b.len(), CTL_HEADER_LEN + 2 + 4);
    }
}
