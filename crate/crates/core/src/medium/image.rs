//! The `image-file` medium: a checkpoint image on disk.
//!
//! Layout: the 7-byte magic `PMIMG1\n` followed by the chunk stream, which
//! ends with an end-of-process chunk. There is no backchannel.

use std::fs::{File, OpenOptions};
use std::io::{ErrorKind, Read, Write};
use std::path::Path;
use std::time::Duration;

use super::{ByteRead, ByteWrite, ChannelConfig, DataChannel, MediumError, Role};

pub const IMAGE_MAGIC: &[u8; 7] = b"PMIMG1\n";

fn io(e: std::io::Error) -> MediumError {
    MediumError::Io(e.to_string())
}

struct FileWriter(Option<File>);

impl ByteWrite for FileWriter {
    fn write_all(&mut self, buf: &[u8]) -> Result<(), MediumError> {
        self.0
            .as_mut()
            .ok_or(MediumError::ChannelClosed)?
            .write_all(buf)
            .map_err(io)
    }

    fn flush(&mut self) -> Result<(), MediumError> {
        let f = self.0.as_mut().ok_or(MediumError::ChannelClosed)?;
        f.flush().map_err(io)?;
        f.sync_data().map_err(io)
    }

    fn shutdown(&mut self) {
        self.0 = None;
    }
}

struct FileReader(File);

impl ByteRead for FileReader {
    fn read_some(&mut self, buf: &mut [u8], _: Option<Duration>) -> Result<usize, MediumError> {
        loop {
            match self.0.read(buf) {
                Ok(n) => return Ok(n),
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(io(e)),
            }
        }
    }
}

pub(super) fn create(path: &Path, config: ChannelConfig) -> Result<DataChannel, MediumError> {
    let mut f = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .open(path)
        .map_err(io)?;
    f.write_all(IMAGE_MAGIC).map_err(io)?;
    DataChannel::new(
        "image-file",
        Role::Sender,
        Some(Box::new(FileWriter(Some(f)))),
        None,
        None,
        config,
    )
}

pub(super) fn open(path: &Path, config: ChannelConfig) -> Result<DataChannel, MediumError> {
    let mut f = File::open(path).map_err(io)?;
    let mut magic = [0u8; 7];
    match f.read_exact(&mut magic) {
        Ok(()) if &magic == IMAGE_MAGIC => {}
        Ok(()) => return Err(MediumError::Protocol("not a checkpoint image".into())),
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Err(MediumError::TruncatedStream),
        Err(e) => return Err(io(e)),
    }
    DataChannel::new(
        "image-file",
        Role::Receiver,
        None,
        Some(Box::new(FileReader(f))),
        None,
        config,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::SubsystemId;
    use crate::medium::{Chunk, ChunkKind, MediumRegistry};

    fn open_pair(dir: &tempfile::TempDir) -> (String, MediumRegistry) {
        let path = dir.path().join("p.img").to_string_lossy().into_owned();
        (path, MediumRegistry::default())
    }

    #[test]
    fn creates_file_with_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (path, reg) = open_pair(&dir);
        let mut tx = reg
            .open_channel("image-file", &path, Role::Sender, ChannelConfig::default())
            .unwrap();
        tx.flush().unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), IMAGE_MAGIC);
    }

    #[test]
    fn flushed_chunks_survive_a_crashed_sender() {
        let dir = tempfile::tempdir().unwrap();
        let (path, reg) = open_pair(&dir);
        let mut tx = reg
            .open_channel("image-file", &path, Role::Sender, ChannelConfig::default())
            .unwrap();
        let mem = SubsystemId::new("mem").unwrap();
        for i in 0..3 {
            tx.pushdata(&Chunk::new(mem, ChunkKind::Entity, i, vec![i as u8; 9]))
                .unwrap();
        }
        tx.flush().unwrap();
        tx.pushdata(&Chunk::new(mem, ChunkKind::Entity, 3, vec![3; 9])).unwrap();
        tx.abandon();

        let mut rx = reg
            .open_channel("image-file", &path, Role::Receiver, ChannelConfig::default())
            .unwrap();
        for i in 0..3 {
            assert_eq!(rx.popdata().unwrap().sequence, i);
        }
        assert_eq!(rx.popdata(), Err(MediumError::TruncatedStream));
    }

    #[test]
    fn corrupt_payload_byte_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let (path, reg) = open_pair(&dir);
        let mut tx = reg
            .open_channel("image-file", &path, Role::Sender, ChannelConfig::default())
            .unwrap();
        let mem = SubsystemId::new("mem").unwrap();
        let mut offsets = Vec::new();
        let mut at = IMAGE_MAGIC.len();
        for i in 0..5 {
            let c = Chunk::new(mem, ChunkKind::Entity, i, vec![0xaa; 16]);
            offsets.push(at);
            at += c.wire_len();
            tx.pushdata(&c).unwrap();
        }
        tx.pushdata(&Chunk::end_of_process()).unwrap();
        tx.close().unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[offsets[3] + 40] ^= 0x01;
        std::fs::write(&path, bytes).unwrap();

        let mut rx = reg
            .open_channel("image-file", &path, Role::Receiver, ChannelConfig::default())
            .unwrap();
        for i in 0..3 {
            assert_eq!(rx.popdata().unwrap().sequence, i);
        }
        assert_eq!(
            rx.popdata(),
            Err(MediumError::ChecksumMismatch {
                subsystem: mem,
                sequence: 3
            })
        );
        assert!(matches!(rx.request_resend(), Err(MediumError::Unsupported(_))));
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let (path, reg) = open_pair(&dir);
        std::fs::write(&path, b"NOTANIMAGE").unwrap();
        assert!(matches!(
            reg.open_channel("image-file", &path, Role::Receiver, ChannelConfig::default()),
            Err(MediumError::Protocol(_))
        ));
    }
}
