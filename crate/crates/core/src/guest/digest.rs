use std::fmt;

use sha2::{Digest as _, Sha256};

use super::{Backing, GuestError, GuestProcess, Regions, ResourcePolicy, RunState};

/// SHA-256 over the canonical serialization of a process.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Digest(pub [u8; 32]);

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &hex::encode(self.0)[..16])
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u64).to_be_bytes());
    out.extend_from_slice(b);
}

/// Canonical serialization of the migratable state of a process.
///
/// Field order: threads (tid, registers), pages in page-number order
/// (number, backing, residency, private content), shared references with
/// their region contents, the file table, then extension state. The pid,
/// run state, dirty flags and barrier flags are node-local bookkeeping and
/// are excluded. File offsets are only part of the state for files whose
/// policy is `Transfer`; the others live on one node or the other.
///
/// With `strict` set, any non-resident page is an error.
pub fn canonical_bytes(
    process: &GuestProcess,
    regions: &Regions,
    strict: bool,
) -> Result<Vec<u8>, GuestError> {
    let missing = process.address_space.non_resident_count();
    if strict && missing > 0 {
        return Err(GuestError::Incomplete(missing));
    }
    let mut out = Vec::with_capacity(64 + process.address_space.pages.len() * (process.page_size() + 16));
    out.extend_from_slice(b"PMDG\x00\x01");
    out.extend_from_slice(&(process.page_size() as u64).to_be_bytes());

    out.extend_from_slice(&(process.threads.len() as u32).to_be_bytes());
    for t in &process.threads {
        out.extend_from_slice(&t.tid.0.to_be_bytes());
        for r in &t.registers {
            out.extend_from_slice(&r.to_be_bytes());
        }
    }

    out.extend_from_slice(&(process.address_space.pages.len() as u64).to_be_bytes());
    for (number, page) in &process.address_space.pages {
        out.extend_from_slice(&number.to_be_bytes());
        match page.backing {
            Backing::Private => out.push(0),
            Backing::Shared { region, offset } => {
                out.push(1);
                out.extend_from_slice(&region.0.to_be_bytes());
                out.extend_from_slice(&offset.to_be_bytes());
            }
        }
        out.push(page.resident as u8);
        if page.resident && page.is_private() {
            put_bytes(&mut out, &page.content);
        }
    }

    let mut refs = process.address_space.shared_refs.clone();
    refs.sort_by_key(|r| r.base_page);
    out.extend_from_slice(&(refs.len() as u32).to_be_bytes());
    for r in &refs {
        out.extend_from_slice(&r.region.0.to_be_bytes());
        out.extend_from_slice(&r.base_page.to_be_bytes());
        out.extend_from_slice(&r.page_count.to_be_bytes());
        match regions.with(r.region, |reg| put_bytes(&mut out, &reg.content)) {
            Some(()) => {}
            None => return Err(GuestError::UnknownRegion(r.region)),
        }
    }

    let mut files: Vec<_> = process.file_table.iter().collect();
    files.sort_by_key(|f| f.fd);
    out.extend_from_slice(&(files.len() as u32).to_be_bytes());
    for f in files {
        out.extend_from_slice(&f.fd.to_be_bytes());
        put_bytes(&mut out, f.path.as_bytes());
        out.push(f.mode as u8);
        out.push(f.policy as u8);
        let offset = if f.policy == ResourcePolicy::Transfer {
            f.offset
        } else {
            0
        };
        out.extend_from_slice(&offset.to_be_bytes());
    }

    out.extend_from_slice(&(process.extensions.len() as u32).to_be_bytes());
    for (k, v) in &process.extensions {
        put_bytes(&mut out, k.as_bytes());
        put_bytes(&mut out, v);
    }
    Ok(out)
}

/// Digest of the canonical serialization.
///
/// Removed processes have no state left to digest. Non-resident pages are
/// an error unless `strict` is false, in which case only their numbers
/// and backing contribute.
pub fn snapshot_digest(
    process: &GuestProcess,
    regions: &Regions,
    strict: bool,
) -> Result<Digest, GuestError> {
    if process.run_state == RunState::Removed {
        return Err(GuestError::InvalidState(RunState::Removed));
    }
    let bytes = canonical_bytes(process, regions, strict)?;
    Ok(Digest(Sha256::digest(&bytes).into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guest::{FileMode, FileSpec, GuestSpec, Host, Page, RegionId};

    fn spawn_pair(spec: &GuestSpec) -> (Host, GuestProcess, GuestProcess) {
        let mut host = Host::new();
        host.create_region(RegionId(5), 4096);
        let a = host.spawn_guest(spec).unwrap();
        let a = host.get(a).unwrap().lock().clone();
        let mut b = a.clone();
        b.pid = crate::guest::Pid(99);
        (host, a, b)
    }

    #[test]
    fn identical_clones_have_equal_digests() {
        let spec = GuestSpec::new(2, 4 * 4096)
            .with_shared(RegionId(5), 3, 1)
            .with_file(FileSpec {
                fd: 3,
                path: "/x".into(),
                mode: FileMode::Read,
                policy: ResourcePolicy::Transfer,
                offset: 4,
            });
        let (host, a, b) = spawn_pair(&spec);
        let r = host.regions();
        assert_eq!(
            snapshot_digest(&a, r, true).unwrap(),
            snapshot_digest(&b, r, true).unwrap()
        );
    }

    #[test]
    fn touching_one_page_changes_the_digest() {
        let (host, a, mut b) = spawn_pair(&GuestSpec::new(1, 2 * 4096));
        b.address_space.pages.get_mut(&1).unwrap().content[17] ^= 1;
        let r = host.regions();
        assert_ne!(
            snapshot_digest(&a, r, true).unwrap(),
            snapshot_digest(&b, r, true).unwrap()
        );
    }

    #[test]
    fn dirty_flags_do_not_matter() {
        let (host, a, mut b) = spawn_pair(&GuestSpec::new(1, 2 * 4096));
        for p in b.address_space.pages.values_mut() {
            p.dirty = false;
        }
        assert_eq!(
            snapshot_digest(&a, host.regions(), true).unwrap(),
            snapshot_digest(&b, host.regions(), true).unwrap()
        );
    }

    #[test]
    fn strict_mode_rejects_missing_pages() {
        let (host, mut a, _) = spawn_pair(&GuestSpec::new(1, 2 * 4096));
        a.address_space.pages.insert(0, Page::non_resident());
        assert_eq!(
            snapshot_digest(&a, host.regions(), true),
            Err(GuestError::Incomplete(1))
        );
        assert!(snapshot_digest(&a, host.regions(), false).is_ok());
    }

    #[test]
    fn repeated_digests_are_stable() {
        let (host, mut a, _) = spawn_pair(&GuestSpec::new(1, 3 * 4096));
        a.run_state = RunState::Quiesced;
        let d1 = snapshot_digest(&a, host.regions(), true).unwrap();
        let d2 = snapshot_digest(&a, host.regions(), true).unwrap();
        assert_eq!(d1, d2);
    }
}
