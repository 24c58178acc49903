//! Handshake and commit messages carried in control frames.
//!
//! All integers are big-endian. Strings are a u16 length followed by UTF-8.
//!
//! ```text
//! Offer         version u16 | page_size u32 | strategy (17) | quiesce u8
//!               | exec_ctx u8 | dedup u8 | medium str
//!               | process_count u32 × process | capability_count u16 × capability
//!   strategy    tag u8 (0 stop-and-copy, 1 pre-copy, 2 lazy) | max_rounds u32
//!               | dirty_threshold u64 | prefetch u32
//!   process     pid u32 | threads u32 | private_pages u64
//!               | shared_count u16 × (region u64 | length u64)
//!               | file_count u16 × (fd u32 | policy u8)
//!   capability  id (16) | version u32 | order_key i32
//! Accept        request_id u64 | buffer_size u32 | window u32 | data_endpoint str
//!               | count u32 × (source pid u32 | channel u32)
//! Reject        reason u8 | subject str | detail str
//! FrameSetup    source pid u32 | threads u32 | private_pages u64
//! ResumeAck     source pid u32 | destination pid u32
//! RemovedConfirm  (empty)
//! ```

use crate::control::{ControlError, ExecCtx, QuiesceMethod, Strategy};
use crate::ids::SubsystemId;
use crate::medium::MediumError;
use crate::subsystem::{Capability, PayloadReader};

pub const PROTOCOL_VERSION: u16 = 1;

pub const OFFER: u8 = 0x01;
pub const ACCEPT: u8 = 0x02;
pub const REJECT: u8 = 0x03;
pub const FRAME_SETUP: u8 = 0x04;
pub const RESUME_ACK: u8 = 0x05;
pub const REMOVED_CONFIRM: u8 = 0x06;
pub const COMMAND: u8 = crate::medium::COMMAND_FRAME_KIND;
pub const STATUS_QUERY: u8 = 0x08;
pub const STATUS_REPLY: u8 = 0x09;

struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    fn u16(&mut self, v: u16) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    fn str(&mut self, s: &str) -> &mut Self {
        self.u16(s.len() as u16);
        self.0.extend_from_slice(s.as_bytes());
        self
    }
}

fn read_str(r: &mut PayloadReader) -> Result<String, String> {
    let n = r.u16()? as usize;
    String::from_utf8(r.bytes(n)?.to_vec()).map_err(|e| e.to_string())
}

fn bad(what: &str) -> impl Fn(String) -> MediumError + '_ {
    move |e| MediumError::Protocol(format!("malformed {what}: {e}"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessSummary {
    pub pid: u32,
    pub threads: u32,
    pub private_pages: u64,
    pub shared: Vec<(u64, u64)>,
    pub files: Vec<(u32, u8)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Offer {
    pub version: u16,
    pub page_size: u32,
    pub strategy: Strategy,
    pub quiesce: QuiesceMethod,
    pub exec_ctx: ExecCtx,
    pub dedup: bool,
    pub medium: String,
    pub processes: Vec<ProcessSummary>,
    pub capabilities: Vec<Capability>,
}

impl Offer {
    pub fn encode(&self) -> Vec<u8> {
        let mut o = Out(Vec::new());
        o.u16(self.version).u32(self.page_size);
        let (tag, rounds, threshold, prefetch) = match self.strategy {
            Strategy::StopAndCopy => (0, 0, 0, 0),
            Strategy::PreCopy {
                max_rounds,
                dirty_threshold,
            } => (1, max_rounds, dirty_threshold, 0),
            Strategy::PostCopyLazy { prefetch } => (2, 0, 0, prefetch),
        };
        o.u8(tag).u32(rounds).u64(threshold).u32(prefetch);
        o.u8(match self.quiesce {
            QuiesceMethod::Synchronous => 0,
            QuiesceMethod::Asynchronous => 1,
        });
        o.u8(match self.exec_ctx {
            ExecCtx::Internal => 0,
            ExecCtx::External => 1,
        });
        o.u8(self.dedup as u8).str(&self.medium);
        o.u32(self.processes.len() as u32);
        for p in &self.processes {
            o.u32(p.pid).u32(p.threads).u64(p.private_pages);
            o.u16(p.shared.len() as u16);
            for (region, len) in &p.shared {
                o.u64(*region).u64(*len);
            }
            o.u16(p.files.len() as u16);
            for (fd, policy) in &p.files {
                o.u32(*fd).u8(*policy);
            }
        }
        o.u16(self.capabilities.len() as u16);
        for c in &self.capabilities {
            o.0.extend_from_slice(c.id.as_bytes());
            o.u32(c.version).u32(c.order_key as u32);
        }
        o.0
    }

    pub fn decode(payload: &[u8]) -> Result<Self, MediumError> {
        let mut r = PayloadReader::new(payload);
        let parse = |r: &mut PayloadReader| -> Result<Offer, String> {
            let version = r.u16()?;
            let page_size = r.u32()?;
            let (tag, rounds, threshold, prefetch) = (r.u8()?, r.u32()?, r.u64()?, r.u32()?);
            let strategy = match tag {
                0 => Strategy::StopAndCopy,
                1 => Strategy::PreCopy {
                    max_rounds: rounds,
                    dirty_threshold: threshold,
                },
                2 => Strategy::PostCopyLazy { prefetch },
                t => return Err(format!("unknown strategy {t}")),
            };
            let quiesce = match r.u8()? {
                0 => QuiesceMethod::Synchronous,
                _ => QuiesceMethod::Asynchronous,
            };
            let exec_ctx = match r.u8()? {
                0 => ExecCtx::Internal,
                _ => ExecCtx::External,
            };
            let dedup = r.u8()? != 0;
            let medium = read_str(r)?;
            let mut processes = Vec::new();
            for _ in 0..r.u32()? {
                let (pid, threads, private_pages) = (r.u32()?, r.u32()?, r.u64()?);
                let mut shared = Vec::new();
                for _ in 0..r.u16()? {
                    shared.push((r.u64()?, r.u64()?));
                }
                let mut files = Vec::new();
                for _ in 0..r.u16()? {
                    files.push((r.u32()?, r.u8()?));
                }
                processes.push(ProcessSummary {
                    pid,
                    threads,
                    private_pages,
                    shared,
                    files,
                });
            }
            let mut capabilities = Vec::new();
            for _ in 0..r.u16()? {
                let id = SubsystemId::from_wire(r.bytes(16)?.try_into().unwrap());
                capabilities.push(Capability {
                    id,
                    version: r.u32()?,
                    order_key: r.u32()? as i32,
                });
            }
            r.finish()?;
            Ok(Offer {
                version,
                page_size,
                strategy,
                quiesce,
                exec_ctx,
                dedup,
                medium,
                processes,
                capabilities,
            })
        };
        parse(&mut r).map_err(bad("offer"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accept {
    pub request_id: u64,
    pub buffer_size: u32,
    pub window: u32,
    pub data_endpoint: String,
    pub channels: Vec<(u32, u32)>,
}

impl Accept {
    pub fn encode(&self) -> Vec<u8> {
        let mut o = Out(Vec::new());
        o.u64(self.request_id)
            .u32(self.buffer_size)
            .u32(self.window)
            .str(&self.data_endpoint)
            .u32(self.channels.len() as u32);
        for (pid, ch) in &self.channels {
            o.u32(*pid).u32(*ch);
        }
        o.0
    }

    pub fn decode(payload: &[u8]) -> Result<Self, MediumError> {
        let mut r = PayloadReader::new(payload);
        let parse = |r: &mut PayloadReader| -> Result<Accept, String> {
            let request_id = r.u64()?;
            let buffer_size = r.u32()?;
            let window = r.u32()?;
            let data_endpoint = read_str(r)?;
            let mut channels = Vec::new();
            for _ in 0..r.u32()? {
                channels.push((r.u32()?, r.u32()?));
            }
            r.finish()?;
            Ok(Accept {
                request_id,
                buffer_size,
                window,
                data_endpoint,
                channels,
            })
        };
        parse(&mut r).map_err(bad("accept"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RejectReason {
    CapabilityMismatch = 1,
    VersionMismatch = 2,
    PageSizeMismatch = 3,
    Policy = 4,
    DuplicateToken = 5,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reject {
    pub reason: RejectReason,
    /// The offending item: a subsystem id, a version, a medium.
    pub subject: String,
    pub detail: String,
}

impl Reject {
    pub fn encode(&self) -> Vec<u8> {
        let mut o = Out(Vec::new());
        o.u8(self.reason as u8).str(&self.subject).str(&self.detail);
        o.0
    }

    pub fn decode(payload: &[u8]) -> Result<Self, MediumError> {
        let mut r = PayloadReader::new(payload);
        let parse = |r: &mut PayloadReader| -> Result<Reject, String> {
            let reason = match r.u8()? {
                1 => RejectReason::CapabilityMismatch,
                2 => RejectReason::VersionMismatch,
                3 => RejectReason::PageSizeMismatch,
                4 => RejectReason::Policy,
                5 => RejectReason::DuplicateToken,
                x => return Err(format!("unknown reject reason {x}")),
            };
            let subject = read_str(r)?;
            let detail = read_str(r)?;
            r.finish()?;
            Ok(Reject {
                reason,
                subject,
                detail,
            })
        };
        parse(&mut r).map_err(bad("reject"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSetup {
    pub source_pid: u32,
    pub threads: u32,
    pub private_pages: u64,
}

impl FrameSetup {
    pub fn encode(&self) -> Vec<u8> {
        let mut o = Out(Vec::new());
        o.u32(self.source_pid).u32(self.threads).u64(self.private_pages);
        o.0
    }

    pub fn decode(payload: &[u8]) -> Result<Self, MediumError> {
        let mut r = PayloadReader::new(payload);
        let parse = |r: &mut PayloadReader| -> Result<FrameSetup, String> {
            let v = FrameSetup {
                source_pid: r.u32()?,
                threads: r.u32()?,
                private_pages: r.u64()?,
            };
            r.finish()?;
            Ok(v)
        };
        parse(&mut r).map_err(bad("frame setup"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResumeAck {
    pub source_pid: u32,
    pub dest_pid: u32,
}

impl ResumeAck {
    pub fn encode(&self) -> Vec<u8> {
        let mut o = Out(Vec::new());
        o.u32(self.source_pid).u32(self.dest_pid);
        o.0
    }

    pub fn decode(payload: &[u8]) -> Result<Self, MediumError> {
        let mut r = PayloadReader::new(payload);
        let parse = |r: &mut PayloadReader| -> Result<ResumeAck, String> {
            let v = ResumeAck {
                source_pid: r.u32()?,
                dest_pid: r.u32()?,
            };
            r.finish()?;
            Ok(v)
        };
        parse(&mut r).map_err(bad("resume ack"))
    }
}

/// Compares the two capability lists and names the first subsystem that
/// differs.
pub fn capability_mismatch(ours: &[Capability], theirs: &[Capability]) -> Option<(String, String)> {
    for t in theirs {
        match ours.iter().find(|o| o.id == t.id) {
            None => {
                return Some((
                    t.id.to_string(),
                    format!("subsystem {} is not registered at the destination", t.id),
                ))
            }
            Some(o) if o.version != t.version => {
                return Some((
                    t.id.to_string(),
                    format!(
                        "subsystem {} version {} at the source, {} at the destination",
                        t.id, t.version, o.version
                    ),
                ))
            }
            Some(o) if o.order_key != t.order_key => {
                return Some((
                    t.id.to_string(),
                    format!(
                        "subsystem {} order key {} at the source, {} at the destination",
                        t.id, t.order_key, o.order_key
                    ),
                ))
            }
            Some(_) => {}
        }
    }
    ours.iter().find(|o| !theirs.iter().any(|t| t.id == o.id)).map(|o| {
        (
            o.id.to_string(),
            format!("subsystem {} is not registered at the source", o.id),
        )
    })
}

/// Why a peer gave up on a batch. Abort reasons start with the kind:
/// `truncated: stream ended before the end-of-process marker`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FailureKind {
    Checksum,
    Truncated,
    UnknownSubsystem,
    Veto,
    Frozen,
    Other,
}

impl FailureKind {
    pub fn of(err: &ControlError) -> Self {
        match err {
            ControlError::Medium(MediumError::ChecksumMismatch { .. }) => FailureKind::Checksum,
            ControlError::Medium(MediumError::TruncatedStream) => FailureKind::Truncated,
            ControlError::UnknownSubsystem(_) => FailureKind::UnknownSubsystem,
            ControlError::HookVeto(_) => FailureKind::Veto,
            ControlError::Frozen => FailureKind::Frozen,
            _ => FailureKind::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FailureKind::Checksum => "checksum",
            FailureKind::Truncated => "truncated",
            FailureKind::UnknownSubsystem => "unknown-subsystem",
            FailureKind::Veto => "veto",
            FailureKind::Frozen => "frozen",
            FailureKind::Other => "failed",
        }
    }

    /// Splits an abort reason into its kind and the rest.
    pub fn parse(reason: &str) -> (FailureKind, String) {
        let kinds = [
            FailureKind::Checksum,
            FailureKind::Truncated,
            FailureKind::UnknownSubsystem,
            FailureKind::Veto,
            FailureKind::Frozen,
            FailureKind::Other,
        ];
        if let Some((head, rest)) = reason.split_once(": ") {
            if let Some(k) = kinds.into_iter().find(|k| k.as_str() == head) {
                return (k, rest.to_string());
            }
        }
        (FailureKind::Other, reason.to_string())
    }
}

pub fn abort_reason(err: &ControlError) -> String {
    format!("{}: {}", FailureKind::of(err).as_str(), err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, prop_oneof, proptest, Just};
    use proptest::strategy::Strategy as _;

    fn cap(id: &str, version: u32, order_key: i32) -> Capability {
        Capability {
            id: SubsystemId::new(id).unwrap(),
            version,
            order_key,
        }
    }

    fn strategy() -> impl proptest::strategy::Strategy<Value = crate::control::Strategy> {
        prop_oneof![
            Just(super::Strategy::StopAndCopy),
            (1u32..10, 0u64..100).prop_map(|(max_rounds, dirty_threshold)| {
                super::Strategy::PreCopy {
                    max_rounds,
                    dirty_threshold,
                }
            }),
            (0u32..50).prop_map(|prefetch| super::Strategy::PostCopyLazy { prefetch }),
        ]
    }

    proptest! {
        #[test]
        fn offer_roundtrip(
            strategy in strategy(),
            pids in proptest::collection::vec((1u32..1000, 1u32..16, 0u64..1000), 0..5),
            dedup in any::<bool>(),
        ) {
            let offer = Offer {
                version: PROTOCOL_VERSION,
                page_size: 4096,
                strategy,
                quiesce: QuiesceMethod::Asynchronous,
                exec_ctx: ExecCtx::External,
                dedup,
                medium: "loopback".into(),
                processes: pids
                    .iter()
                    .map(|&(pid, threads, private_pages)| ProcessSummary {
                        pid,
                        threads,
                        private_pages,
                        shared: vec![(7, 8192)],
                        files: vec![(3, 2)],
                    })
                    .collect(),
                capabilities: vec![cap("cpu", 1, 10), cap("neg", 2, -5)],
            };
            prop_assert_eq!(Offer::decode(&offer.encode()).unwrap(), offer);
        }
    }

    #[test]
    fn small_messages_roundtrip() {
        let a = Accept {
            request_id: 9,
            buffer_size: 4096,
            window: 32,
            data_endpoint: "loopback:x.data".into(),
            channels: vec![(1, 0), (2, 1)],
        };
        assert_eq!(Accept::decode(&a.encode()).unwrap(), a);
        let r = Reject {
            reason: RejectReason::CapabilityMismatch,
            subject: "counter".into(),
            detail: "missing".into(),
        };
        assert_eq!(Reject::decode(&r.encode()).unwrap(), r);
        let f = FrameSetup {
            source_pid: 4,
            threads: 2,
            private_pages: 256,
        };
        assert_eq!(f.encode().len(), 16);
        assert_eq!(FrameSetup::decode(&f.encode()).unwrap(), f);
        let ack = ResumeAck {
            source_pid: 4,
            dest_pid: 1,
        };
        assert_eq!(ResumeAck::decode(&ack.encode()).unwrap(), ack);
        assert!(ResumeAck::decode(&[0; 7]).is_err());
    }

    #[test]
    fn mismatch_names_the_subsystem() {
        let ours = vec![cap("cpu", 1, 10), cap("mem", 1, 20)];
        assert_eq!(capability_mismatch(&ours, &ours), None);
        let theirs = vec![cap("cpu", 1, 10), cap("mem", 1, 20), cap("counter", 1, 100)];
        assert_eq!(capability_mismatch(&ours, &theirs).unwrap().0, "counter");
        let theirs = vec![cap("cpu", 2, 10), cap("mem", 1, 20)];
        assert_eq!(capability_mismatch(&ours, &theirs).unwrap().0, "cpu");
        let theirs = vec![cap("cpu", 1, 10)];
        assert_eq!(capability_mismatch(&ours, &theirs).unwrap().0, "mem");
    }
}
