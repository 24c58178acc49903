//! Simulated guest processes.
//!
//! A [`GuestProcess`] stands in for the operating-system process whose state
//! is exported on the source node and imported on the destination node. It
//! carries everything the built-in subsystems know how to serialize: thread
//! register files, a paged address space (private pages plus attachments to
//! node-wide [`SharedRegion`]s), an open-file table and opaque per-module
//! extension state for third-party subsystems.

mod digest;
mod host;
mod process;
mod region;
mod spec;
mod workload;

pub use digest::{canonical_bytes, snapshot_digest, Digest};
pub use host::{Host, ProcessRef};
pub use process::{
    AddressSpace, Backing, FileMode, GuestProcess, OpenFile, Page, ResourcePolicy, RunState,
    SharedRef, ThreadContext, PC_SLOT, REGISTER_COUNT, SP_SLOT,
};
pub use region::{RegionId, Regions, SharedRegion};
pub use spec::{FileSpec, GuestSpec, SharedAttachment};
pub use workload::{DirtySetDelta, PageFaultHandler, PageWrite};

use std::fmt;

use thiserror::Error;

/// Default page size used when a deployment does not override it.
pub const DEFAULT_PAGE_SIZE: usize = 4096;

/// Process identifier, unique within one node for the lifetime of the process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pid(pub u32);

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Thread identifier, unique within its process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tid(pub u32);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GuestError {
    #[error("a guest needs at least one thread")]
    ZeroThreads,
    #[error("page size {0} is not a power of two")]
    BadPageSize(usize),
    #[error("address space size {size} is not a multiple of page size {page_size}")]
    Unaligned { size: u64, page_size: usize },
    #[error("unknown shared region {0}")]
    UnknownRegion(RegionId),
    #[error("shared attachment of region {region} does not match its length or lies outside the address space")]
    BadAttachment { region: RegionId },
    #[error("shared attachment of region {region} overlaps another mapping")]
    Overlap { region: RegionId },
    #[error("duplicate file descriptor {0}")]
    DuplicateFd(u32),
    #[error("unknown pid {0}")]
    UnknownPid(Pid),
    #[error("operation not allowed while process is {0:?}")]
    InvalidState(RunState),
    #[error("illegal run-state transition {from:?} -> {to:?}")]
    IllegalTransition { from: RunState, to: RunState },
    #[error("page fault on non-resident page {0}")]
    PageFault(u64),
    #[error("page fault on page {page} could not be resolved: {reason}")]
    FaultUnresolved { page: u64, reason: String },
    #[error("process has no private pages to write")]
    NoWritablePages,
    #[error("process state is incomplete: {0} pages are not resident")]
    Incomplete(usize),
    #[error("invalid guest config: {0}")]
    Config(String),
}
