use std::collections::{BTreeMap, BTreeSet};

use parking_lot::Mutex;

use crate::guest::{Pid, RegionId, Regions};
use crate::ids::RequestId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerState {
    InFlight,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Claim {
    /// The caller serializes the region content.
    Owner,
    /// Another event already owns it; emit a reference only.
    Shared { owner: (RequestId, Pid) },
}

type Owner = (RequestId, Pid);

/// Checkpoint-once bookkeeping for shared regions within one batch.
#[derive(Debug)]
pub struct SharedResourceLedger {
    dedup: bool,
    entries: Mutex<BTreeMap<RegionId, (Owner, LedgerState)>>,
}

impl SharedResourceLedger {
    /// With `dedup` off every claimant owns its regions, so content is sent
    /// once per process.
    pub fn new(dedup: bool) -> Self {
        SharedResourceLedger {
            dedup,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn dedup(&self) -> bool {
        self.dedup
    }

    pub fn claim(&self, region: RegionId, event: (RequestId, Pid)) -> Claim {
        if !self.dedup {
            return Claim::Owner;
        }
        let mut e = self.entries.lock();
        match e.get(&region) {
            Some((owner, _)) if *owner != event => Claim::Shared { owner: *owner },
            _ => {
                e.insert(region, (event, LedgerState::InFlight));
                Claim::Owner
            }
        }
    }

    pub fn complete(&self, region: RegionId) {
        if let Some((_, s)) = self.entries.lock().get_mut(&region) {
            *s = LedgerState::Done;
        }
    }

    pub fn state(&self, region: RegionId) -> Option<((RequestId, Pid), LedgerState)> {
        self.entries.lock().get(&region).copied()
    }

    /// Drops every ownership held by `event`.
    pub fn release(&self, event: (RequestId, Pid)) {
        self.entries.lock().retain(|_, (owner, _)| *owner != event);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug)]
struct Assembling {
    content: Vec<u8>,
    page_size: usize,
    received: BTreeSet<u32>,
    pages: u32,
}

/// Destination-side reassembly of shared regions arriving page by page.
/// A region becomes visible in the node's [`Regions`] once complete.
#[derive(Debug, Default)]
pub struct RegionAssembly {
    pending: Mutex<BTreeMap<RegionId, Assembling>>,
}

impl RegionAssembly {
    /// Starts assembling `region` unless the node already has it. Returns
    /// whether content pages for it should be stored.
    pub fn begin(&self, regions: &Regions, region: RegionId, length: usize, page_size: usize) -> bool {
        if regions.contains(region) {
            return false;
        }
        let mut p = self.pending.lock();
        if p.contains_key(&region) {
            return false;
        }
        let pages = length.div_ceil(page_size) as u32;
        p.insert(
            region,
            Assembling {
                content: vec![0; length],
                page_size,
                received: BTreeSet::new(),
                pages,
            },
        );
        if pages == 0 {
            let a = p.remove(&region).expect("just inserted");
            regions.insert(region, a.content);
        }
        true
    }

    /// Stores one page; publishes the region when the last page arrives.
    pub fn add_page(
        &self,
        regions: &Regions,
        region: RegionId,
        index: u32,
        data: &[u8],
    ) -> Result<(), String> {
        let mut p = self.pending.lock();
        let Some(a) = p.get_mut(&region) else {
            // Content for a region that is already present is redundant.
            return Ok(());
        };
        let start = index as usize * a.page_size;
        if index >= a.pages || start + data.len() > a.content.len() {
            return Err(format!("page {index} outside region {region}"));
        }
        a.content[start..start + data.len()].copy_from_slice(data);
        a.received.insert(index);
        if a.received.len() == a.pages as usize {
            let a = p.remove(&region).expect("present");
            regions.insert(region, a.content);
        }
        Ok(())
    }

    pub fn is_pending(&self, region: RegionId) -> bool {
        self.pending.lock().contains_key(&region)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_claim_owns() {
        let l = SharedResourceLedger::new(true);
        let a = (RequestId(1), Pid(1));
        let b = (RequestId(1), Pid(2));
        let r = RegionId(7);
        assert_eq!(l.claim(r, a), Claim::Owner);
        assert_eq!(l.claim(r, a), Claim::Owner);
        assert_eq!(l.claim(r, b), Claim::Shared { owner: a });
        assert_eq!(l.state(r), Some((a, LedgerState::InFlight)));
        l.complete(r);
        assert_eq!(l.state(r), Some((a, LedgerState::Done)));
        l.release(a);
        assert_eq!(l.claim(r, b), Claim::Owner);
    }

    #[test]
    fn without_dedup_everyone_owns() {
        let l = SharedResourceLedger::new(false);
        let r = RegionId(7);
        assert_eq!(l.claim(r, (RequestId(1), Pid(1))), Claim::Owner);
        assert_eq!(l.claim(r, (RequestId(1), Pid(2))), Claim::Owner);
        assert!(l.is_empty());
    }

    #[test]
    fn assembly_publishes_when_complete() {
        let regions = Regions::new();
        let asm = RegionAssembly::default();
        let r = RegionId(1);
        assert!(asm.begin(&regions, r, 8, 4));
        assert!(!asm.begin(&regions, r, 8, 4));
        asm.add_page(&regions, r, 1, &[5, 6, 7, 8]).unwrap();
        assert!(!regions.contains(r));
        asm.add_page(&regions, r, 0, &[1, 2, 3, 4]).unwrap();
        assert_eq!(regions.get(r).unwrap().content, vec![1, 2, 3, 4, 5, 6, 7, 8]);
        assert!(!asm.begin(&regions, r, 8, 4));
        assert!(asm.add_page(&regions, RegionId(2), 0, &[0]).is_ok());
    }
}
