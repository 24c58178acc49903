use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

use super::{
    GuestError, GuestProcess, GuestSpec, OpenFile, Page, Pid, RegionId, Regions, RunState,
    SharedRef, ThreadContext, Tid, REGISTER_COUNT,
};

/// Handle to a process owned by a node.
pub type ProcessRef = Arc<Mutex<GuestProcess>>;

/// The process table and shared regions of one node.
#[derive(Debug)]
pub struct Host {
    next_pid: u32,
    processes: BTreeMap<Pid, ProcessRef>,
    regions: Regions,
}

impl Default for Host {
    fn default() -> Self {
        Self::new()
    }
}

fn keyed_rng(domain: &[u8], a: u64, b: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(domain);
    h.update(a.to_be_bytes());
    h.update(b.to_be_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Initial content of a private page: a keyed hash stream of (pid, page).
pub(crate) fn initial_page_content(pid: Pid, page: u64, page_size: usize) -> Vec<u8> {
    let mut content = vec![0u8; page_size];
    keyed_rng(b"pmig-page", pid.0 as u64, page).fill_bytes(&mut content);
    content
}

fn initial_registers(pid: Pid, tid: Tid) -> [u64; REGISTER_COUNT] {
    let mut rng = keyed_rng(b"pmig-regs", pid.0 as u64, tid.0 as u64);
    let mut regs = [0u64; REGISTER_COUNT];
    for r in regs.iter_mut() {
        *r = rng.next_u64();
    }
    regs
}

impl Host {
    pub fn new() -> Self {
        Host {
            next_pid: 1,
            processes: BTreeMap::new(),
            regions: Regions::new(),
        }
    }

    pub fn regions(&self) -> &Regions {
        &self.regions
    }

    fn allocate_pid(&mut self) -> Pid {
        let pid = Pid(self.next_pid);
        self.next_pid += 1;
        pid
    }

    /// Creates a shared region with deterministic content derived from its id.
    pub fn create_region(&mut self, id: RegionId, length: usize) -> RegionId {
        let mut content = vec![0u8; length];
        keyed_rng(b"pmig-region", id.0, 0).fill_bytes(&mut content);
        self.regions.insert(id, content);
        id
    }

    pub fn spawn_guest(&mut self, spec: &GuestSpec) -> Result<Pid, GuestError> {
        spec.validate()?;
        let page_count = spec.page_count();
        for att in &spec.shared_attachments {
            let len = self
                .regions
                .length(att.region)
                .ok_or(GuestError::UnknownRegion(att.region))?;
            if att.page_count * spec.page_size as u64 != len as u64
                || att.base_page + att.page_count > page_count
            {
                return Err(GuestError::BadAttachment { region: att.region });
            }
        }

        let pid = Pid(self.next_pid);
        let mut process = GuestProcess::frame(pid, spec.page_size);
        process.run_state = RunState::Running;
        process.threads = (1..=spec.thread_count as u32)
            .map(|t| ThreadContext::new(Tid(t), initial_registers(pid, Tid(t))))
            .collect();
        for att in &spec.shared_attachments {
            process.address_space.map_shared(SharedRef {
                region: att.region,
                base_page: att.base_page,
                page_count: att.page_count,
            })?;
        }
        for page in 0..page_count {
            if process.address_space.pages.contains_key(&page) {
                continue;
            }
            let p = if spec.footprint {
                Page::private(initial_page_content(pid, page, spec.page_size), true)
            } else {
                Page::private(vec![0u8; spec.page_size], false)
            };
            process.address_space.pages.insert(page, p);
        }
        process.file_table = spec
            .files
            .iter()
            .map(|f| OpenFile {
                fd: f.fd,
                path: f.path.clone(),
                offset: f.offset,
                mode: f.mode,
                policy: f.policy,
            })
            .collect();

        for att in &spec.shared_attachments {
            self.regions.attach(att.region)?;
        }
        let pid = self.allocate_pid();
        self.processes.insert(pid, Arc::new(Mutex::new(process)));
        Ok(pid)
    }

    /// Allocates an empty destination frame for a restart.
    pub fn create_frame(&mut self, page_size: usize) -> (Pid, ProcessRef) {
        let pid = self.allocate_pid();
        let frame = Arc::new(Mutex::new(GuestProcess::frame(pid, page_size)));
        self.processes.insert(pid, frame.clone());
        (pid, frame)
    }

    pub fn get(&self, pid: Pid) -> Result<ProcessRef, GuestError> {
        self.processes
            .get(&pid)
            .cloned()
            .ok_or(GuestError::UnknownPid(pid))
    }

    pub fn contains(&self, pid: Pid) -> bool {
        self.processes.contains_key(&pid)
    }

    pub fn pids(&self) -> Vec<Pid> {
        self.processes.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.processes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.processes.is_empty()
    }

    /// Drops a process from the table and releases its region references.
    pub fn remove(&mut self, pid: Pid) -> Option<ProcessRef> {
        let process = self.processes.remove(&pid)?;
        for r in process.lock().address_space.shared_refs.iter() {
            self.regions.detach(r.region);
        }
        Some(process)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_address_space() {
        let mut host = Host::new();
        let pid = host.spawn_guest(&GuestSpec::new(1, 0)).unwrap();
        let p = host.get(pid).unwrap();
        let p = p.lock();
        assert!(p.address_space.pages.is_empty());
        assert_eq!(p.run_state, RunState::Running);
        assert_eq!(p.threads.len(), 1);
    }

    #[test]
    fn one_mib_is_256_dirty_pages() {
        let mut host = Host::new();
        let pid = host.spawn_guest(&GuestSpec::new(2, 1 << 20)).unwrap();
        let p = host.get(pid).unwrap();
        let p = p.lock();
        assert_eq!(p.address_space.pages.len(), (1 << 20) / 4096);
        assert_eq!(p.address_space.dirty_count(), 256);
        assert!(p.address_space.pages.values().all(|pg| pg.content.len() == 4096));
    }

    #[test]
    fn shared_attachment_counts_once() {
        let mut host = Host::new();
        let region = host.create_region(RegionId(0xa), 4096);
        let spec = GuestSpec::new(1, 8192).with_shared(region, 0, 1);
        let pid = host.spawn_guest(&spec).unwrap();
        assert_eq!(host.regions().refcount(region), 1);
        let p = host.get(pid).unwrap();
        let p = p.lock();
        assert_eq!(p.address_space.private_pages().count(), 1);
        assert_eq!(p.address_space.pages.len(), 2);
        assert!(!p.address_space.pages[&0].is_private());
    }

    #[test]
    fn spawn_errors() {
        let mut host = Host::new();
        assert_eq!(
            host.spawn_guest(&GuestSpec::new(0, 4096)),
            Err(GuestError::ZeroThreads)
        );
        assert!(matches!(
            host.spawn_guest(&GuestSpec::new(1, 4097)),
            Err(GuestError::Unaligned { .. })
        ));
        assert_eq!(
            host.spawn_guest(&GuestSpec::new(1, 4096).with_shared(RegionId(9), 0, 1)),
            Err(GuestError::UnknownRegion(RegionId(9)))
        );
        // Failed spawns do not burn pids.
        assert_eq!(host.spawn_guest(&GuestSpec::new(1, 0)), Ok(Pid(1)));
    }

    #[test]
    fn overlapping_attachments_rejected() {
        let mut host = Host::new();
        let a = host.create_region(RegionId(1), 8192);
        let b = host.create_region(RegionId(2), 8192);
        let spec = GuestSpec::new(1, 16384)
            .with_shared(a, 0, 2)
            .with_shared(b, 1, 2);
        assert_eq!(host.spawn_guest(&spec), Err(GuestError::Overlap { region: b }));
        assert_eq!(host.regions().refcount(a), 0);
    }

    #[test]
    fn remove_releases_region_refs() {
        let mut host = Host::new();
        let r = host.create_region(RegionId(3), 4096);
        let spec = GuestSpec::new(1, 4096).with_shared(r, 0, 1);
        let p1 = host.spawn_guest(&spec).unwrap();
        let p2 = host.spawn_guest(&spec).unwrap();
        assert_eq!(host.regions().refcount(r), 2);
        host.remove(p1);
        assert_eq!(host.regions().refcount(r), 1);
        host.remove(p2);
        assert!(!host.regions().contains(r));
    }
}
