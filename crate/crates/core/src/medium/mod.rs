//! Transfer media.
//!
//! A medium moves framed [`Chunk`]s in one direction (the simplex data
//! path) and [`CommandMessage`]s in both directions (the backchannel). The
//! four operations every medium exposes are [`DataChannel::pushdata`],
//! [`DataChannel::popdata`], [`DataChannel::command`] and
//! [`DataChannel::flush`].
//!
//! Three media are built in:
//!
//! | id           | data path                   | backchannel | page pulls |
//! |--------------|-----------------------------|-------------|------------|
//! | `loopback`   | in-process byte pipe        | yes         | yes        |
//! | `image-file` | `PMIMG1\n` file on disk     | no          | no         |
//! | `stream`     | TCP connection              | yes         | yes        |

mod channel;
mod chunk;
mod command;
mod ctl;
mod image;
mod transport;

pub use channel::{
    Backchannel, ChannelConfig, ChannelStats, CommandPort, DataChannel, FaultPlan, COMMAND_FRAME_KIND, LocalBackchannel,
    StreamBackchannel,
};
pub use chunk::{
    parse_header, Chunk, ChunkHeader, ChunkKind, CHUNK_HEADER_LEN, CHUNK_MAGIC, CHUNK_OVERHEAD,
    CHUNK_TRAILER_LEN, MAX_PAYLOAD, WIRE_VERSION,
};
pub use command::{
    CommandMessage, Opcode, ACK_DONE, ACK_DRAIN, ACK_DRAINED, ACK_ROUND, BATCH_PID, FILE_ADVANCE_OFFSET,
    FILE_QUERY_OFFSET, FILE_REPLY, FILE_STATUS_GONE, PULL_OK, PULL_SOURCE_GONE,
    PULL_UNKNOWN_PAGE,
};
pub use ctl::{CtlFrame, FrameReader, CTL_HEADER_LEN, CTL_MAGIC};
pub use image::{IMAGE_MAGIC};
pub use transport::{
    loopback_pair, ByteRead, ByteWrite, Connection, Endpoint, Listener, LoopbackHub,
    LoopbackListener, TcpAcceptor,
};

use std::path::Path;
use std::time::Duration;

use thiserror::Error;

use crate::ids::SubsystemId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MediumError {
    #[error("channel closed")]
    ChannelClosed,
    #[error("peer is not draining the channel")]
    BackpressureTimeout,
    #[error("timed out waiting for data")]
    Timeout,
    #[error("checksum mismatch in chunk {sequence} of subsystem {subsystem}")]
    ChecksumMismatch { subsystem: SubsystemId, sequence: u32 },
    #[error("stream ended before the end-of-process marker")]
    TruncatedStream,
    #[error("connection refused: {0}")]
    ConnectRefused(String),
    #[error("address in use: {0}")]
    AddressInUse(String),
    #[error("unknown medium {0:?}")]
    UnknownMedium(String),
    #[error("usage error: {0}")]
    Usage(&'static str),
    #[error("unsupported on this medium: {0}")]
    Unsupported(&'static str),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("aborted by peer: {0}")]
    Aborted(String),
}

/// Which end of the simplex data path a channel handle is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Sender,
    Receiver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MediumKind {
    Loopback,
    ImageFile,
    Stream,
}

/// A registered medium and what it can do.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediumDescriptor {
    pub medium_id: String,
    pub kind: MediumKind,
    pub buffer_size: usize,
}

impl MediumDescriptor {
    /// Whether commands can flow between the peers while data moves.
    pub fn has_backchannel(&self) -> bool {
        self.kind != MediumKind::ImageFile
    }

    pub fn supports_page_pull(&self) -> bool {
        self.has_backchannel()
    }
}

/// The media known to a node.
#[derive(Debug, Clone)]
pub struct MediumRegistry {
    media: Vec<MediumDescriptor>,
}

impl Default for MediumRegistry {
    fn default() -> Self {
        Self::with_defaults(channel::DEFAULT_BUFFER_SIZE)
    }
}

impl MediumRegistry {
    pub fn with_defaults(buffer_size: usize) -> Self {
        let m = |id: &str, kind| MediumDescriptor {
            medium_id: id.to_string(),
            kind,
            buffer_size,
        };
        MediumRegistry {
            media: vec![
                m("loopback", MediumKind::Loopback),
                m("image-file", MediumKind::ImageFile),
                m("stream", MediumKind::Stream),
            ],
        }
    }

    /// Restricts the registry to the named media.
    pub fn only(mut self, ids: &[&str]) -> Result<Self, MediumError> {
        for id in ids {
            self.get(id)?;
        }
        self.media.retain(|m| ids.contains(&m.medium_id.as_str()));
        Ok(self)
    }

    pub fn get(&self, id: &str) -> Result<&MediumDescriptor, MediumError> {
        self.media
            .iter()
            .find(|m| m.medium_id == id)
            .ok_or_else(|| MediumError::UnknownMedium(id.to_string()))
    }

    pub fn ids(&self) -> Vec<&str> {
        self.media.iter().map(|m| m.medium_id.as_str()).collect()
    }

    /// Opens a standalone channel.
    ///
    /// `loopback` and `stream` take an [`Endpoint`]; the sender connects and
    /// the receiver listens and accepts the first connection within
    /// `config.pop_deadline`. The backchannel runs over the reverse direction
    /// of the same connection, so only the receiver can originate commands.
    /// `image-file` takes a filesystem path.
    pub fn open_channel(
        &self,
        medium_id: &str,
        endpoint: &str,
        role: Role,
        config: ChannelConfig,
    ) -> Result<DataChannel, MediumError> {
        let desc = self.get(medium_id)?;
        let config = ChannelConfig {
            buffer_size: config.buffer_size.min(desc.buffer_size).max(1),
            ..config
        };
        match desc.kind {
            MediumKind::ImageFile => match role {
                Role::Sender => image::create(Path::new(endpoint), config),
                Role::Receiver => image::open(Path::new(endpoint), config),
            },
            MediumKind::Loopback | MediumKind::Stream => {
                let ep: Endpoint = endpoint.parse()?;
                match (&ep, desc.kind) {
                    (Endpoint::Loopback(_), MediumKind::Loopback)
                    | (Endpoint::Tcp(_), MediumKind::Stream) => {}
                    _ => return Err(MediumError::Usage("endpoint does not match medium")),
                }
                let conn = match role {
                    Role::Sender => ep.connect()?,
                    Role::Receiver => {
                        let mut l = ep.listen()?;
                        l.accept(Some(config.pop_deadline))?
                    }
                };
                Ok(DataChannel::over_connection(
                    medium_id, role, conn, config,
                ))
            }
        }
    }
}

/// Default deadline used by readers of control links.
pub const DEFAULT_POP_DEADLINE: Duration = Duration::from_secs(5);
