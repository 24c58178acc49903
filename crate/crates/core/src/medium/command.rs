//! Out-of-band command messages carried on the backchannel.
//!
//! ```text
//! opcode (u8) | target subsystem (16) | token (16) | payload_len (u32 BE) | payload
//! ```
//!
//! Every payload starts with the source pid (u32 BE) of the process the
//! command concerns; `u32::MAX` addresses the whole batch.
//!
//! | opcode | name            | payload after pid                                   |
//! |--------|-----------------|-----------------------------------------------------|
//! | 1      | StepAck         | chunks consumed (u64), flags (u8: 1 round, 2 drain, 4 done, 8 drained) |
//! | 2      | SetBufferSize   | new buffer size in bytes (u32)                      |
//! | 3      | PagePullRequest | page number (u64)                                   |
//! | 4      | PagePullReply   | page number (u64), status (u8), page bytes          |
//! | 5      | ResendRequest   | channel frame index (u64), chunk sequence (u32)     |
//! | 6      | ResidualFileOp  | fd (u32), op (u8), argument (u64)                   |
//! | 7      | Abort           | UTF-8 reason                                        |

use crate::ids::{MigrationToken, SubsystemId};

use super::MediumError;

pub const BATCH_PID: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    StepAck = 1,
    SetBufferSize = 2,
    PagePullRequest = 3,
    PagePullReply = 4,
    ResendRequest = 5,
    ResidualFileOp = 6,
    Abort = 7,
}

impl Opcode {
    pub fn from_wire(b: u8) -> Result<Self, MediumError> {
        Ok(match b {
            1 => Opcode::StepAck,
            2 => Opcode::SetBufferSize,
            3 => Opcode::PagePullRequest,
            4 => Opcode::PagePullReply,
            5 => Opcode::ResendRequest,
            6 => Opcode::ResidualFileOp,
            7 => Opcode::Abort,
            other => return Err(MediumError::Protocol(format!("unknown opcode {other}"))),
        })
    }
}

pub const ACK_ROUND: u8 = 1;
pub const ACK_DRAIN: u8 = 2;
/// The receiver consumed the end-of-process marker.
pub const ACK_DONE: u8 = 4;
/// Every page of a lazily restored process is now resident.
pub const ACK_DRAINED: u8 = 8;

pub const PULL_OK: u8 = 0;
pub const PULL_UNKNOWN_PAGE: u8 = 1;
pub const PULL_SOURCE_GONE: u8 = 2;

/// Residual file operations; replies set the high bit.
pub const FILE_QUERY_OFFSET: u8 = 0;
pub const FILE_ADVANCE_OFFSET: u8 = 1;
pub const FILE_REPLY: u8 = 0x80;
pub const FILE_STATUS_GONE: u8 = 0xff;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandMessage {
    pub opcode: Opcode,
    pub target_subsystem: SubsystemId,
    pub token: MigrationToken,
    pub payload: Vec<u8>,
}

impl CommandMessage {
    pub fn new(
        opcode: Opcode,
        target_subsystem: SubsystemId,
        token: MigrationToken,
        pid: u32,
        body: &[u8],
    ) -> Self {
        let mut payload = Vec::with_capacity(4 + body.len());
        payload.extend_from_slice(&pid.to_be_bytes());
        payload.extend_from_slice(body);
        CommandMessage {
            opcode,
            target_subsystem,
            token,
            payload,
        }
    }

    pub fn step_ack(token: MigrationToken, pid: u32, consumed: u64, flags: u8) -> Self {
        let mut body = consumed.to_be_bytes().to_vec();
        body.push(flags);
        Self::new(Opcode::StepAck, SubsystemId::NONE, token, pid, &body)
    }

    pub fn set_buffer_size(token: MigrationToken, pid: u32, size: u32) -> Self {
        Self::new(
            Opcode::SetBufferSize,
            SubsystemId::NONE,
            token,
            pid,
            &size.to_be_bytes(),
        )
    }

    pub fn page_pull(token: MigrationToken, subsystem: SubsystemId, pid: u32, page: u64) -> Self {
        Self::new(
            Opcode::PagePullRequest,
            subsystem,
            token,
            pid,
            &page.to_be_bytes(),
        )
    }

    pub fn page_reply(
        token: MigrationToken,
        subsystem: SubsystemId,
        pid: u32,
        page: u64,
        status: u8,
        content: &[u8],
    ) -> Self {
        let mut body = Vec::with_capacity(9 + content.len());
        body.extend_from_slice(&page.to_be_bytes());
        body.push(status);
        body.extend_from_slice(content);
        Self::new(Opcode::PagePullReply, subsystem, token, pid, &body)
    }

    pub fn resend(
        token: MigrationToken,
        subsystem: SubsystemId,
        pid: u32,
        frame_index: u64,
        sequence: u32,
    ) -> Self {
        let mut body = frame_index.to_be_bytes().to_vec();
        body.extend_from_slice(&sequence.to_be_bytes());
        Self::new(Opcode::ResendRequest, subsystem, token, pid, &body)
    }

    pub fn residual_file(token: MigrationToken, pid: u32, fd: u32, op: u8, arg: u64) -> Self {
        let mut body = fd.to_be_bytes().to_vec();
        body.push(op);
        body.extend_from_slice(&arg.to_be_bytes());
        Self::new(
            Opcode::ResidualFileOp,
            SubsystemId::new("file").unwrap(),
            token,
            pid,
            &body,
        )
    }

    pub fn abort(token: MigrationToken, pid: u32, reason: &str) -> Self {
        Self::new(
            Opcode::Abort,
            SubsystemId::NONE,
            token,
            pid,
            reason.as_bytes(),
        )
    }

    /// Source pid the command is addressed to.
    pub fn pid(&self) -> u32 {
        self.payload
            .get(..4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .unwrap_or(BATCH_PID)
    }

    /// Payload after the pid prefix.
    pub fn body(&self) -> &[u8] {
        self.payload.get(4..).unwrap_or(&[])
    }

    pub fn body_u64(&self, at: usize) -> Result<u64, MediumError> {
        self.body()
            .get(at..at + 8)
            .map(|b| u64::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| self.short())
    }

    pub fn body_u32(&self, at: usize) -> Result<u32, MediumError> {
        self.body()
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| self.short())
    }

    pub fn body_u8(&self, at: usize) -> Result<u8, MediumError> {
        self.body().get(at).copied().ok_or_else(|| self.short())
    }

    fn short(&self) -> MediumError {
        MediumError::Protocol(format!("short {:?} payload", self.opcode))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(37 + self.payload.len());
        out.push(self.opcode as u8);
        out.extend_from_slice(self.target_subsystem.as_bytes());
        out.extend_from_slice(&self.token.0);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, MediumError> {
        if bytes.len() < 37 {
            return Err(MediumError::Protocol("short command message".into()));
        }
        let opcode = Opcode::from_wire(bytes[0])?;
        let target_subsystem = SubsystemId::from_wire(bytes[1..17].try_into().unwrap());
        let token = MigrationToken(bytes[17..33].try_into().unwrap());
        let len = u32::from_be_bytes(bytes[33..37].try_into().unwrap()) as usize;
        if bytes.len() != 37 + len {
            return Err(MediumError::Protocol("command length mismatch".into()));
        }
        Ok(CommandMessage {
            opcode,
            target_subsystem,
            token,
            payload: bytes[37..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_accessors() {
        let t = MigrationToken([7; 16]);
        let m = CommandMessage::page_pull(t, SubsystemId::new("mem").unwrap(), 12, 42);
        let d = CommandMessage::decode(&m.encode()).unwrap();
        assert_eq!(d, m);
        assert_eq!(d.pid(), 12);
        assert_eq!(d.body_u64(0).unwrap(), 42);
        assert!(d.body_u64(4).is_err());
    }

    #[test]
    fn unknown_opcode_is_protocol_error() {
        let mut raw = CommandMessage::abort(MigrationToken::default(), 1, "x").encode();
        raw[0] = 99;
        assert!(matches!(
            CommandMessage::decode(&raw),
            Err(MediumError::Protocol(_))
        ));
    }
}
