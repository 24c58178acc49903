use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{GuestError, GuestProcess, Page, RunState, PC_SLOT};

/// Supplies the content of a non-resident page when the guest touches it.
pub trait PageFaultHandler {
    fn resolve(&mut self, page: u64) -> Result<Vec<u8>, GuestError>;
}

/// One logged write: `content[offset] ^= mask` on `page`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageWrite {
    pub step: u64,
    pub page: u64,
    pub offset: usize,
    pub mask: u8,
}

/// Outcome of a workload run: the distinct pages written plus the full
/// write log in application order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DirtySetDelta {
    pub pages: BTreeSet<u64>,
    pub writes: Vec<PageWrite>,
}

impl DirtySetDelta {
    pub fn is_empty(&self) -> bool {
        self.writes.is_empty()
    }

    pub fn merge(&mut self, other: DirtySetDelta) {
        self.pages.extend(other.pages);
        self.writes.extend(other.writes);
    }
}

fn fault_in(
    process: &mut GuestProcess,
    page: u64,
    handler: &mut Option<&mut dyn PageFaultHandler>,
) -> Result<(), GuestError> {
    let Some(handler) = handler.as_deref_mut() else {
        return Err(GuestError::PageFault(page));
    };
    let content = handler.resolve(page)?;
    if content.len() != process.page_size() {
        return Err(GuestError::FaultUnresolved {
            page,
            reason: format!("reply carried {} bytes", content.len()),
        });
    }
    let dirty = content.iter().any(|b| *b != 0);
    process
        .address_space
        .pages
        .insert(page, Page::private(content, dirty));
    Ok(())
}

impl GuestProcess {
    /// Applies `steps * write_rate` seeded page writes to private pages.
    ///
    /// Each step also advances the program counter of one thread
    /// (round-robin). Touching a non-resident page goes through `faults`;
    /// without a handler the write fails with [`GuestError::PageFault`].
    pub fn run_workload(
        &mut self,
        steps: u64,
        write_rate: u64,
        seed: u64,
        mut faults: Option<&mut dyn PageFaultHandler>,
    ) -> Result<DirtySetDelta, GuestError> {
        if !matches!(self.run_state, RunState::Running | RunState::Resumed) {
            return Err(GuestError::InvalidState(self.run_state));
        }
        let mut delta = DirtySetDelta::default();
        if steps == 0 || write_rate == 0 {
            return Ok(delta);
        }
        let candidates: Vec<u64> = self
            .address_space
            .pages
            .iter()
            .filter(|(_, p)| p.is_private())
            .map(|(n, _)| *n)
            .collect();
        if candidates.is_empty() {
            return Err(GuestError::NoWritablePages);
        }
        let page_size = self.page_size();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for step in 0..steps {
            for _ in 0..write_rate {
                let page = candidates[rng.gen_range(0..candidates.len())];
                let offset = rng.gen_range(0..page_size);
                let mask: u8 = rng.gen_range(1..=255);
                if !self.address_space.pages[&page].resident {
                    fault_in(self, page, &mut faults)?;
                }
                let p = self
                    .address_space
                    .pages
                    .get_mut(&page)
                    .expect("candidate page exists");
                p.content[offset] ^= mask;
                p.dirty = true;
                delta.pages.insert(page);
                delta.writes.push(PageWrite {
                    step,
                    page,
                    offset,
                    mask,
                });
            }
            let nthreads = self.threads.len();
            if nthreads > 0 {
                let t = &mut self.threads[(step as usize) % nthreads];
                t.registers[PC_SLOT] = t.registers[PC_SLOT].wrapping_add(4);
            }
        }
        Ok(delta)
    }

    /// Reads the given pages, faulting in any that are not resident.
    pub fn touch_pages(
        &mut self,
        pages: &[u64],
        mut faults: Option<&mut dyn PageFaultHandler>,
    ) -> Result<usize, GuestError> {
        let mut faulted = 0;
        for &page in pages {
            match self.address_space.pages.get(&page) {
                Some(p) if !p.resident => {
                    fault_in(self, page, &mut faults)?;
                    faulted += 1;
                }
                _ => {}
            }
        }
        Ok(faulted)
    }
}
