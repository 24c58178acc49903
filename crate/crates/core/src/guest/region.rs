use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use parking_lot::Mutex;

use super::GuestError;

/// Globally unique shared-region identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegionId(pub u64);

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "region:{:016x}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedRegion {
    pub id: RegionId,
    pub length: usize,
    pub content: Vec<u8>,
    /// Number of process `shared_refs` naming this region.
    pub refcount: usize,
}

/// Node-wide table of shared regions, cheap to clone.
#[derive(Debug, Clone, Default)]
pub struct Regions {
    inner: Arc<Mutex<BTreeMap<RegionId, SharedRegion>>>,
}

impl Regions {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a region with zero references. Replaces nothing: an existing
    /// region with the same id is kept as-is and `false` is returned.
    pub fn insert(&self, id: RegionId, content: Vec<u8>) -> bool {
        let mut map = self.inner.lock();
        if map.contains_key(&id) {
            return false;
        }
        map.insert(
            id,
            SharedRegion {
                id,
                length: content.len(),
                content,
                refcount: 0,
            },
        );
        true
    }

    pub fn contains(&self, id: RegionId) -> bool {
        self.inner.lock().contains_key(&id)
    }

    pub fn get(&self, id: RegionId) -> Option<SharedRegion> {
        self.inner.lock().get(&id).cloned()
    }

    pub fn with<R>(&self, id: RegionId, f: impl FnOnce(&SharedRegion) -> R) -> Option<R> {
        self.inner.lock().get(&id).map(f)
    }

    pub fn length(&self, id: RegionId) -> Option<usize> {
        self.with(id, |r| r.length)
    }

    pub fn refcount(&self, id: RegionId) -> usize {
        self.with(id, |r| r.refcount).unwrap_or(0)
    }

    pub fn attach(&self, id: RegionId) -> Result<(), GuestError> {
        let mut map = self.inner.lock();
        let region = map.get_mut(&id).ok_or(GuestError::UnknownRegion(id))?;
        region.refcount += 1;
        Ok(())
    }

    /// Drops one reference; the region is deleted when the count hits zero.
    pub fn detach(&self, id: RegionId) {
        let mut map = self.inner.lock();
        if let Some(region) = map.get_mut(&id) {
            region.refcount = region.refcount.saturating_sub(1);
            if region.refcount == 0 {
                map.remove(&id);
            }
        }
    }

    /// Removes a region only if nothing references it.
    pub fn remove_unreferenced(&self, id: RegionId) -> bool {
        let mut map = self.inner.lock();
        match map.get(&id) {
            Some(r) if r.refcount == 0 => {
                map.remove(&id);
                true
            }
            _ => false,
        }
    }

    pub fn ids(&self) -> Vec<RegionId> {
        self.inner.lock().keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
