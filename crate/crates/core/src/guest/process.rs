use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GuestError, Pid, RegionId, Tid};

/// Number of 64-bit registers in every thread context of a deployment.
pub const REGISTER_COUNT: usize = 32;
/// Register slot holding the program counter.
pub const PC_SLOT: usize = 0;
/// Register slot holding the stack pointer.
pub const SP_SLOT: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RunState {
    Running,
    Quiesced,
    Migrating,
    Resumed,
    Removed,
}

impl RunState {
    /// Legal transitions of the run-state machine.
    ///
    /// `Migrating -> Running` and `Quiesced -> Running` are the abort paths
    /// (and the tail of a standalone checkpoint); `Migrating -> Resumed` is
    /// taken by destination frames, `Migrating -> Removed` by sources.
    pub fn can_transition_to(self, to: RunState) -> bool {
        use RunState::*;
        matches!(
            (self, to),
            (Running, Quiesced)
                | (Resumed, Quiesced)
                | (Quiesced, Migrating)
                | (Quiesced, Running)
                | (Migrating, Running)
                | (Migrating, Resumed)
                | (Migrating, Removed)
                | (Quiesced, Removed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadContext {
    pub tid: Tid,
    pub registers: [u64; REGISTER_COUNT],
    pub in_barrier: bool,
    /// Simulation knob: a thread that never reaches a safe point, used to
    /// exercise quiesce timeouts. Not part of the process state.
    pub never_yields: bool,
}

impl ThreadContext {
    pub fn new(tid: Tid, registers: [u64; REGISTER_COUNT]) -> Self {
        ThreadContext {
            tid,
            registers,
            in_barrier: false,
            never_yields: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backing {
    Private,
    /// Backed by a shared region; `offset` is the page index inside the region.
    Shared { region: RegionId, offset: u64 },
}

/// One page of the address space.
///
/// Shared-backed pages and non-resident pages carry no private bytes: the
/// former read through the region table, the latter must be faulted in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Page {
    pub content: Vec<u8>,
    pub dirty: bool,
    pub resident: bool,
    pub backing: Backing,
}

impl Page {
    pub fn private(content: Vec<u8>, dirty: bool) -> Self {
        Page {
            content,
            dirty,
            resident: true,
            backing: Backing::Private,
        }
    }

    pub fn shared(region: RegionId, offset: u64) -> Self {
        Page {
            content: Vec::new(),
            dirty: false,
            resident: true,
            backing: Backing::Shared { region, offset },
        }
    }

    pub fn non_resident() -> Self {
        Page {
            content: Vec::new(),
            dirty: false,
            resident: false,
            backing: Backing::Private,
        }
    }

    pub fn is_private(&self) -> bool {
        self.backing == Backing::Private
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SharedRef {
    pub region: RegionId,
    pub base_page: u64,
    pub page_count: u64,
}

impl SharedRef {
    pub fn contains(&self, page: u64) -> bool {
        page >= self.base_page && page < self.base_page + self.page_count
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddressSpace {
    pub page_size: usize,
    pub pages: BTreeMap<u64, Page>,
    pub shared_refs: Vec<SharedRef>,
}

impl AddressSpace {
    pub fn new(page_size: usize) -> Self {
        AddressSpace {
            page_size,
            pages: BTreeMap::new(),
            shared_refs: Vec::new(),
        }
    }

    pub fn private_pages(&self) -> impl Iterator<Item = (u64, &Page)> {
        self.pages
            .iter()
            .filter(|(_, p)| p.is_private())
            .map(|(n, p)| (*n, p))
    }

    pub fn dirty_count(&self) -> usize {
        self.private_pages().filter(|(_, p)| p.dirty).count()
    }

    pub fn non_resident_count(&self) -> usize {
        self.pages.values().filter(|p| !p.resident).count()
    }

    /// Maps a shared region at `base_page`. The caller owns refcounting.
    pub fn map_shared(&mut self, shared: SharedRef) -> Result<(), GuestError> {
        let end = shared.base_page + shared.page_count;
        let clash = self.shared_refs.iter().any(|r| {
            shared.base_page < r.base_page + r.page_count && r.base_page < end
        }) || self.pages.range(shared.base_page..end).any(|(_, p)| p.is_private());
        if clash {
            return Err(GuestError::Overlap {
                region: shared.region,
            });
        }
        for offset in 0..shared.page_count {
            self.pages
                .insert(shared.base_page + offset, Page::shared(shared.region, offset));
        }
        self.shared_refs.push(shared);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileMode {
    Read,
    Write,
    #[serde(alias = "rw")]
    ReadWrite,
}

/// How a resource is treated while its process migrates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResourcePolicy {
    /// Ignore the source copy; the destination re-resolves its own.
    UseLocal,
    /// Extract on the source and reinstate on the destination.
    Transfer,
    /// Keep it on the source; the destination forwards operations back.
    ForwardToSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpenFile {
    pub fd: u32,
    pub path: String,
    pub offset: u64,
    pub mode: FileMode,
    pub policy: ResourcePolicy,
}

#[derive(Debug, Clone)]
pub struct GuestProcess {
    pub pid: Pid,
    pub threads: Vec<ThreadContext>,
    pub address_space: AddressSpace,
    pub file_table: Vec<OpenFile>,
    pub run_state: RunState,
    /// Opaque state owned by third-party subsystems, keyed by subsystem id.
    pub extensions: BTreeMap<String, Vec<u8>>,
}

impl GuestProcess {
    /// An empty destination frame awaiting restart.
    pub fn frame(pid: Pid, page_size: usize) -> Self {
        GuestProcess {
            pid,
            threads: Vec::new(),
            address_space: AddressSpace::new(page_size),
            file_table: Vec::new(),
            run_state: RunState::Migrating,
            extensions: BTreeMap::new(),
        }
    }

    pub fn page_size(&self) -> usize {
        self.address_space.page_size
    }

    pub fn transition(&mut self, to: RunState) -> Result<(), GuestError> {
        if !self.run_state.can_transition_to(to) {
            return Err(GuestError::IllegalTransition {
                from: self.run_state,
                to,
            });
        }
        if matches!(to, RunState::Running | RunState::Resumed) {
            for t in &mut self.threads {
                t.in_barrier = false;
            }
        }
        self.run_state = to;
        Ok(())
    }

    pub fn file(&self, fd: u32) -> Option<&OpenFile> {
        self.file_table.iter().find(|f| f.fd == fd)
    }

    /// Installs content for a page and marks it resident.
    pub fn install_page(&mut self, page: u64, content: Vec<u8>) {
        let dirty = content.iter().any(|b| *b != 0);
        self.address_space
            .pages
            .insert(page, Page::private(content, dirty));
    }
}
