//! Identifiers shared across layers.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use thiserror::Error;

/// Stable subsystem name, at most 16 bytes, zero-padded on the wire.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubsystemId([u8; 16]);

#[derive(Debug, Error, PartialEq, Eq)]
#[error("subsystem id {0:?} must be 1..=16 bytes of printable ASCII")]
pub struct BadSubsystemId(pub String);

impl SubsystemId {
    pub const LEN: usize = 16;

    /// The all-zero id, used by process-level markers.
    pub const NONE: SubsystemId = SubsystemId([0; 16]);

    pub fn new(name: &str) -> Result<Self, BadSubsystemId> {
        let b = name.as_bytes();
        if b.is_empty() || b.len() > Self::LEN || !b.iter().all(|c| c.is_ascii_graphic()) {
            return Err(BadSubsystemId(name.to_string()));
        }
        let mut raw = [0u8; 16];
        raw[..b.len()].copy_from_slice(b);
        Ok(SubsystemId(raw))
    }

    pub fn from_wire(raw: [u8; 16]) -> Self {
        SubsystemId(raw)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn as_str(&self) -> &str {
        let end = self.0.iter().position(|b| *b == 0).unwrap_or(16);
        std::str::from_utf8(&self.0[..end]).unwrap_or("?")
    }
}

impl FromStr for SubsystemId {
    type Err = BadSubsystemId;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SubsystemId::new(s)
    }
}

impl fmt::Display for SubsystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Debug for SubsystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.as_str())
    }
}

/// Node-local request identifier. Starts at 1 per boot; 0 is invalid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId(pub u64);

impl fmt::Display for RequestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Distributed identifier of one event batch between a node pair.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MigrationToken(pub [u8; 16]);

impl MigrationToken {
    pub fn random() -> Self {
        let mut raw = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut raw);
        MigrationToken(raw)
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut raw = [0u8; 16];
        hex::decode_to_slice(s, &mut raw).ok()?;
        Some(MigrationToken(raw))
    }
}

impl fmt::Display for MigrationToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

impl fmt::Debug for MigrationToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Token({})", self.hex())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsystem_id_bounds() {
        assert_eq!(SubsystemId::new("mem").unwrap().as_str(), "mem");
        assert!(SubsystemId::new("0123456789abcdef").is_ok());
        assert!(SubsystemId::new("0123456789abcdefg").is_err());
        assert!(SubsystemId::new("").is_err());
        assert!(SubsystemId::new("a b").is_err());
        assert_eq!(SubsystemId::NONE.as_str(), "");
    }
}
