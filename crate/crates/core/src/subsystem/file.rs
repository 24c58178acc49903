//! Open-file table and residual files.
//!
//! One entity per open file, in fd order:
//!
//! ```text
//! fd (u32) | mode (u8: 0 read, 1 write, 2 read-write)
//! | policy (u8: 0 use-local, 1 transfer, 2 forward-to-source)
//! | offset (u64) | path_len (u16) | path (UTF-8)
//! ```
//!
//! On restart, `use-local` files are reopened by path at offset 0,
//! `transfer` files keep the carried offset, and `forward-to-source` files
//! become stubs whose operations are answered by the source node from its
//! [`ResidualTable`].

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::guest::{FileMode, GuestProcess, OpenFile, ResourcePolicy};
use crate::ids::MigrationToken;
use crate::medium::ChunkKind;

use super::{
    ChunkSink, ChunkSource, PayloadReader, StepContext, StepReport, SubsystemDescriptor,
    SubsystemError, SubsystemOps,
};

pub const ORDER_KEY: i32 = 30;
pub const VERSION: u32 = 1;

pub fn descriptor() -> SubsystemDescriptor {
    SubsystemDescriptor::new("file", VERSION, ORDER_KEY, Arc::new(FileSubsystem))
}

fn mode_byte(m: FileMode) -> u8 {
    match m {
        FileMode::Read => 0,
        FileMode::Write => 1,
        FileMode::ReadWrite => 2,
    }
}

fn policy_byte(p: ResourcePolicy) -> u8 {
    match p {
        ResourcePolicy::UseLocal => 0,
        ResourcePolicy::Transfer => 1,
        ResourcePolicy::ForwardToSource => 2,
    }
}

pub fn encode_file(f: &OpenFile) -> Vec<u8> {
    let path = f.path.as_bytes();
    let mut out = Vec::with_capacity(16 + path.len());
    out.extend_from_slice(&f.fd.to_be_bytes());
    out.push(mode_byte(f.mode));
    out.push(policy_byte(f.policy));
    out.extend_from_slice(&f.offset.to_be_bytes());
    out.extend_from_slice(&(path.len() as u16).to_be_bytes());
    out.extend_from_slice(path);
    out
}

pub fn decode_file(payload: &[u8]) -> Result<OpenFile, String> {
    let mut r = PayloadReader::new(payload);
    let fd = r.u32()?;
    let mode = match r.u8()? {
        0 => FileMode::Read,
        1 => FileMode::Write,
        2 => FileMode::ReadWrite,
        m => return Err(format!("unknown file mode {m}")),
    };
    let policy = match r.u8()? {
        0 => ResourcePolicy::UseLocal,
        1 => ResourcePolicy::Transfer,
        2 => ResourcePolicy::ForwardToSource,
        p => return Err(format!("unknown resource policy {p}")),
    };
    let offset = r.u64()?;
    let len = r.u16()? as usize;
    let path = std::str::from_utf8(r.bytes(len)?)
        .map_err(|e| e.to_string())?
        .to_string();
    r.finish()?;
    Ok(OpenFile {
        fd,
        path,
        offset,
        mode,
        policy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ResidualKey {
    pub token: MigrationToken,
    pub pid: u32,
    pub fd: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualFile {
    pub path: String,
    pub offset: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ResidualError {
    #[error("source of residual file is gone")]
    SourceGone,
}

/// Source-side records of files left behind by migrated processes.
#[derive(Debug, Default)]
pub struct ResidualTable {
    files: Mutex<BTreeMap<ResidualKey, ResidualFile>>,
}

impl ResidualTable {
    pub fn register(&self, key: ResidualKey, file: ResidualFile) {
        self.files.lock().insert(key, file);
    }

    pub fn query(&self, key: ResidualKey) -> Result<u64, ResidualError> {
        self.files
            .lock()
            .get(&key)
            .map(|f| f.offset)
            .ok_or(ResidualError::SourceGone)
    }

    pub fn advance(&self, key: ResidualKey, by: u64) -> Result<u64, ResidualError> {
        let mut files = self.files.lock();
        let f = files.get_mut(&key).ok_or(ResidualError::SourceGone)?;
        f.offset += by;
        Ok(f.offset)
    }

    /// Forgets every record of `token`.
    pub fn release(&self, token: MigrationToken) {
        self.files.lock().retain(|k, _| k.token != token);
    }

    /// Forgets the records of one process of a batch.
    pub fn release_pid(&self, token: MigrationToken, pid: u32) {
        self.files
            .lock()
            .retain(|k, _| !(k.token == token && k.pid == pid));
    }

    pub fn holds(&self, token: MigrationToken) -> bool {
        self.files.lock().keys().any(|k| k.token == token)
    }

    pub fn len(&self) -> usize {
        self.files.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Default)]
struct Cursor {
    next: usize,
}

#[derive(Debug, Default)]
pub struct FileSubsystem;

impl SubsystemOps for FileSubsystem {
    fn checkpoint(
        &self,
        ctx: &mut StepContext,
        process: &mut GuestProcess,
        sink: &mut dyn ChunkSink,
    ) -> Result<StepReport, SubsystemError> {
        let mut cur = ctx.take_state::<Cursor>();
        let mut files: Vec<&OpenFile> = process.file_table.iter().collect();
        files.sort_by_key(|f| f.fd);
        let mut n = 0;
        let mut result = Ok(());
        while cur.next < files.len() && n < ctx.batch_limit as u64 {
            let f = files[cur.next];
            if let Err(e) = ctx.emit(sink, ChunkKind::Entity, encode_file(f)) {
                result = Err(e.into());
                break;
            }
            if f.policy == ResourcePolicy::ForwardToSource {
                if let Some(token) = ctx.event.token {
                    ctx.env.residuals.register(
                        ResidualKey {
                            token,
                            pid: ctx.event.source_pid.0,
                            fd: f.fd,
                        },
                        ResidualFile {
                            path: f.path.clone(),
                            offset: f.offset,
                        },
                    );
                }
            }
            ctx.last_entity = Some(format!("fd {}", f.fd));
            ctx.entities_done += 1;
            cur.next += 1;
            n += 1;
        }
        let done = cur.next >= files.len();
        ctx.put_state(cur);
        result.map(|_| StepReport::processed(n, done))
    }

    fn restart(
        &self,
        ctx: &mut StepContext,
        process: &mut GuestProcess,
        source: &mut dyn ChunkSource,
    ) -> Result<StepReport, SubsystemError> {
        let mut n = 0;
        while let Some(chunk) = source.next()? {
            ctx.expect_sequence(&chunk)?;
            match chunk.kind {
                ChunkKind::Entity => {
                    let mut f = decode_file(&chunk.payload).map_err(|e| ctx.malformed(&chunk, e))?;
                    if process.file(f.fd).is_some() {
                        return Err(ctx.malformed(&chunk, format!("duplicate fd {}", f.fd)));
                    }
                    if f.policy == ResourcePolicy::UseLocal {
                        f.offset = 0;
                    }
                    ctx.last_entity = Some(format!("fd {}", f.fd));
                    process.file_table.push(f);
                    ctx.entities_done += 1;
                    n += 1;
                }
                ChunkKind::EndOfSubsystem => return Ok(StepReport::processed(n, true)),
                other => {
                    return Err(ctx.malformed(&chunk, format!("unexpected {other:?} chunk")))
                }
            }
        }
        Ok(StepReport::processed(n, false))
    }

    fn estimate(&self, _ctx: &StepContext, process: &GuestProcess) -> u64 {
        process.file_table.len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entity_roundtrip() {
        let f = OpenFile {
            fd: 3,
            path: "/var/log/app.log".into(),
            offset: 1234,
            mode: FileMode::ReadWrite,
            policy: ResourcePolicy::ForwardToSource,
        };
        let bytes = encode_file(&f);
        assert_eq!(bytes.len(), 4 + 1 + 1 + 8 + 2 + f.path.len());
        assert_eq!(decode_file(&bytes).unwrap(), f);
        assert!(decode_file(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn residual_ops() {
        let t = ResidualTable::default();
        let key = ResidualKey {
            token: MigrationToken([1; 16]),
            pid: 4,
            fd: 3,
        };
        assert_eq!(t.query(key), Err(ResidualError::SourceGone));
        t.register(key, ResidualFile { path: "x".into(), offset: 10 });
        assert_eq!(t.advance(key, 100).unwrap(), 110);
        assert_eq!(t.advance(key, 100).unwrap(), 210);
        assert_eq!(t.query(key).unwrap(), 210);
        t.release(key.token);
        assert_eq!(t.advance(key, 1), Err(ResidualError::SourceGone));
    }
}
