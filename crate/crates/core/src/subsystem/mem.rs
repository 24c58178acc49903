//! Address-space state.
//!
//! Entities are pages. Every entity payload starts with a one-byte tag:
//!
//! ```text
//! 0x01 page map     flags (u8: bit0 lazy) | range_count (u32)
//!                   | range_count × (first_page u64 | page_count u32 | dirty u8)
//! 0x02 page         page_number (u64) | page_size bytes
//! 0x03 region page  region_id (u64) | page_index (u32) | page_size bytes
//! 0x04 round end    round (u32)
//! ```
//!
//! The page map lists every private page once per event. Clean pages hold
//! zeros and are rebuilt from the map alone; dirty pages follow as page
//! entities, or are pulled on demand when the lazy bit is set.
//!
//! Shared regions travel as `SharedRef` chunks:
//!
//! ```text
//! region_id (u64) | base_page (u64) | page_count (u64) | region_length (u64)
//! | flags (u8: bit0 content follows)
//! ```
//!
//! Within a batch the [`SharedResourceLedger`](super::SharedResourceLedger)
//! grants content to the first process that claims a region; the others
//! send the reference only.

use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use crate::guest::{GuestError, GuestProcess, Page, RegionId, SharedRef};
use crate::medium::ChunkKind;

use super::{
    CheckpointMode, ChunkSink, ChunkSource, Claim, PayloadReader, SessionOutcome, StepContext,
    StepReport, SubsystemDescriptor, SubsystemError, SubsystemOps,
};

pub const ORDER_KEY: i32 = 20;
pub const VERSION: u32 = 1;

pub const TAG_PAGE_MAP: u8 = 0x01;
pub const TAG_PAGE: u8 = 0x02;
pub const TAG_REGION_PAGE: u8 = 0x03;
pub const TAG_ROUND_END: u8 = 0x04;

pub const MAP_LAZY: u8 = 0x01;
pub const SHARED_CARRIES_CONTENT: u8 = 0x01;

/// Bytes before the content in a page entity payload.
pub const PAGE_PREFIX_LEN: usize = 9;
/// Bytes before the content in a region page entity payload.
pub const REGION_PAGE_PREFIX_LEN: usize = 13;
pub const MAP_RANGE_LEN: usize = 13;
pub const SHARED_REF_LEN: usize = 33;

pub fn descriptor() -> SubsystemDescriptor {
    SubsystemDescriptor::new("mem", VERSION, ORDER_KEY, Arc::new(MemorySubsystem))
}

/// A run of consecutive private pages with the same dirty state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapRange {
    pub first_page: u64,
    pub page_count: u32,
    pub dirty: bool,
}

pub fn page_ranges(process: &GuestProcess) -> Vec<MapRange> {
    let mut out: Vec<MapRange> = Vec::new();
    for (n, p) in process.address_space.private_pages() {
        let dirty = p.dirty || !p.resident;
        match out.last_mut() {
            Some(r)
                if r.dirty == dirty
                    && r.first_page + r.page_count as u64 == n
                    && r.page_count < u32::MAX =>
            {
                r.page_count += 1
            }
            _ => out.push(MapRange {
                first_page: n,
                page_count: 1,
                dirty,
            }),
        }
    }
    out
}

pub fn encode_page_map(ranges: &[MapRange], lazy: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + ranges.len() * MAP_RANGE_LEN);
    out.push(TAG_PAGE_MAP);
    out.push(if lazy { MAP_LAZY } else { 0 });
    out.extend_from_slice(&(ranges.len() as u32).to_be_bytes());
    for r in ranges {
        out.extend_from_slice(&r.first_page.to_be_bytes());
        out.extend_from_slice(&r.page_count.to_be_bytes());
        out.push(r.dirty as u8);
    }
    out
}

pub fn encode_page(page: u64, content: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PAGE_PREFIX_LEN + content.len());
    out.push(TAG_PAGE);
    out.extend_from_slice(&page.to_be_bytes());
    out.extend_from_slice(content);
    out
}

pub fn encode_region_page(region: RegionId, index: u32, content: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(REGION_PAGE_PREFIX_LEN + content.len());
    out.push(TAG_REGION_PAGE);
    out.extend_from_slice(&region.0.to_be_bytes());
    out.extend_from_slice(&index.to_be_bytes());
    out.extend_from_slice(content);
    out
}

pub fn encode_shared_ref(r: &SharedRef, length: u64, carries_content: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(SHARED_REF_LEN);
    out.extend_from_slice(&r.region.0.to_be_bytes());
    out.extend_from_slice(&r.base_page.to_be_bytes());
    out.extend_from_slice(&r.page_count.to_be_bytes());
    out.extend_from_slice(&length.to_be_bytes());
    out.push(if carries_content { SHARED_CARRIES_CONTENT } else { 0 });
    out
}

#[derive(Debug, Clone)]
enum Item {
    Map(Vec<u8>),
    Page(u64),
    Shared(SharedRef, bool),
    RegionPage(RegionId, u32),
    RoundEnd(u32),
}

/// Counters of one checkpoint session, for reports and benchmarks.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemStats {
    /// Page-table entries examined when building each phase's work list.
    pub pages_scanned: u64,
    pub pages_sent: u64,
    pub region_pages_sent: u64,
    /// Private pages sent in each phase, in phase order.
    pub phases: Vec<(CheckpointMode, BTreeSet<u64>)>,
}

#[derive(Debug, Default)]
struct CheckpointState {
    phase: Option<CheckpointMode>,
    map_sent: bool,
    queue: VecDeque<Item>,
    cleared: BTreeSet<u64>,
    stats: MemStats,
}

#[derive(Debug, Default)]
struct RestartState {
    lazy: bool,
    eos: bool,
    pending_maps: Vec<SharedRef>,
}

/// Snapshot of the memory session counters kept in `ctx`.
pub fn session_stats(ctx: &mut StepContext) -> MemStats {
    let st = ctx.take_state::<CheckpointState>();
    let stats = st.stats.clone();
    ctx.put_state(st);
    stats
}

/// Whether a restored address space still expects demand paging.
pub fn restored_lazily(ctx: &mut StepContext) -> bool {
    let st = ctx.take_state::<RestartState>();
    let lazy = st.lazy;
    ctx.put_state(st);
    lazy
}

#[derive(Debug, Default)]
pub struct MemorySubsystem;

impl MemorySubsystem {
    fn plan(st: &mut CheckpointState, ctx: &mut StepContext, process: &mut GuestProcess) {
        let mode = ctx.mode;
        st.phase = Some(mode);
        st.stats.phases.push((mode, BTreeSet::new()));
        st.stats.pages_scanned += process.address_space.pages.len() as u64;
        let has_private = process.address_space.private_pages().next().is_some();
        if !st.map_sent && has_private {
            let lazy = mode == CheckpointMode::LazyMap;
            st.queue
                .push_back(Item::Map(encode_page_map(&page_ranges(process), lazy)));
            st.map_sent = true;
        }
        if mode != CheckpointMode::LazyMap {
            for (n, p) in process.address_space.pages.iter_mut() {
                if p.is_private() && p.dirty && p.resident {
                    p.dirty = false;
                    st.cleared.insert(*n);
                    st.queue.push_back(Item::Page(*n));
                }
            }
        }
        if !matches!(mode, CheckpointMode::Round(_)) {
            let event = (ctx.event.request_id, ctx.event.source_pid);
            let mut refs = process.address_space.shared_refs.clone();
            refs.sort_by_key(|r| r.base_page);
            for r in refs {
                let owner = ctx.env.ledger.claim(r.region, event) == Claim::Owner;
                st.queue.push_back(Item::Shared(r, owner));
                if owner {
                    for i in 0..r.page_count as u32 {
                        st.queue.push_back(Item::RegionPage(r.region, i));
                    }
                }
            }
        }
        if let CheckpointMode::Round(r) = mode {
            st.queue.push_back(Item::RoundEnd(r));
        }
    }

    fn emit_item(
        st: &mut CheckpointState,
        item: &Item,
        ctx: &mut StepContext,
        process: &GuestProcess,
        sink: &mut dyn ChunkSink,
    ) -> Result<bool, SubsystemError> {
        let page_size = process.page_size();
        match item {
            Item::Map(payload) => {
                ctx.emit(sink, ChunkKind::Entity, payload.clone())?;
                ctx.last_entity = Some("page map".into());
                Ok(false)
            }
            Item::Page(n) => {
                let page = &process.address_space.pages[n];
                ctx.emit(sink, ChunkKind::Entity, encode_page(*n, &page.content))?;
                ctx.last_entity = Some(format!("page {n}"));
                st.stats.pages_sent += 1;
                if let Some((_, set)) = st.stats.phases.last_mut() {
                    set.insert(*n);
                }
                Ok(true)
            }
            Item::Shared(r, owner) => {
                let len = ctx
                    .env
                    .regions
                    .length(r.region)
                    .ok_or(GuestError::UnknownRegion(r.region))? as u64;
                ctx.emit(sink, ChunkKind::SharedRef, encode_shared_ref(r, len, *owner))?;
                ctx.last_entity = Some(format!("shared ref {}", r.region));
                if *owner && r.page_count == 0 {
                    ctx.env.ledger.complete(r.region);
                }
                Ok(false)
            }
            Item::RegionPage(region, i) => {
                let start = *i as usize * page_size;
                let payload = ctx
                    .env
                    .regions
                    .with(*region, |reg| {
                        encode_region_page(*region, *i, &reg.content[start..start + page_size])
                    })
                    .ok_or(GuestError::UnknownRegion(*region))?;
                ctx.emit(sink, ChunkKind::Entity, payload)?;
                ctx.last_entity = Some(format!("{region} page {i}"));
                st.stats.region_pages_sent += 1;
                let pages = ctx
                    .env
                    .regions
                    .length(*region)
                    .unwrap_or(0)
                    .div_ceil(page_size);
                if *i as usize + 1 == pages {
                    ctx.env.ledger.complete(*region);
                }
                Ok(true)
            }
            Item::RoundEnd(r) => {
                let mut payload = vec![TAG_ROUND_END];
                payload.extend_from_slice(&r.to_be_bytes());
                ctx.emit(sink, ChunkKind::Entity, payload)?;
                ctx.last_entity = Some(format!("end of round {r}"));
                Ok(false)
            }
        }
    }

    fn settle_maps(
        st: &mut RestartState,
        ctx: &StepContext,
        process: &mut GuestProcess,
    ) -> Result<u64, SubsystemError> {
        let mut mapped = 0;
        let mut still = Vec::new();
        for r in std::mem::take(&mut st.pending_maps) {
            if ctx.env.regions.contains(r.region) {
                process.address_space.map_shared(r)?;
                ctx.env.regions.attach(r.region)?;
                mapped += 1;
            } else {
                still.push(r);
            }
        }
        st.pending_maps = still;
        Ok(mapped)
    }

    fn finish_restart(
        st: &mut RestartState,
        ctx: &StepContext,
        process: &mut GuestProcess,
        consumed: u64,
    ) -> Result<StepReport, SubsystemError> {
        let mapped = Self::settle_maps(st, ctx, process)?;
        if !st.pending_maps.is_empty() {
            // Waiting for another process of the batch to deliver a region.
            return Ok(StepReport::processed(consumed + mapped, false));
        }
        if !st.lazy {
            let missing = process.address_space.non_resident_count();
            if missing > 0 {
                return Err(GuestError::Incomplete(missing).into());
            }
        }
        Ok(StepReport {
            entities_processed: consumed + mapped,
            done: true,
            progressed: true,
            round_complete: false,
        })
    }

    fn apply(
        st: &mut RestartState,
        ctx: &mut StepContext,
        process: &mut GuestProcess,
        chunk: &crate::medium::Chunk,
    ) -> Result<Applied, SubsystemError> {
        let page_size = process.page_size();
        let bad = |ctx: &StepContext, e: String| ctx.malformed(chunk, e);
        match chunk.kind {
            ChunkKind::Entity => {
                let mut r = PayloadReader::new(&chunk.payload);
                let tag = r.u8().map_err(|e| bad(ctx, e))?;
                match tag {
                    TAG_PAGE_MAP => {
                        let parse = |r: &mut PayloadReader| -> Result<_, String> {
                            let flags = r.u8()?;
                            let count = r.u32()?;
                            let mut ranges = Vec::new();
                            for _ in 0..count {
                                ranges.push(MapRange {
                                    first_page: r.u64()?,
                                    page_count: r.u32()?,
                                    dirty: r.u8()? != 0,
                                });
                            }
                            r.finish()?;
                            Ok((flags, ranges))
                        };
                        let (flags, ranges) = parse(&mut r).map_err(|e| bad(ctx, e))?;
                        st.lazy = flags & MAP_LAZY != 0;
                        for range in ranges {
                            for n in range.first_page..range.first_page + range.page_count as u64 {
                                let p = if range.dirty {
                                    Page::non_resident()
                                } else {
                                    Page::private(vec![0; page_size], false)
                                };
                                process.address_space.pages.insert(n, p);
                            }
                        }
                        ctx.last_entity = Some("page map".into());
                        Ok(Applied::Other)
                    }
                    TAG_PAGE => {
                        let n = r.u64().map_err(|e| bad(ctx, e))?;
                        let content = r.rest();
                        if content.len() != page_size {
                            return Err(bad(ctx, format!("page {n} has {} bytes", content.len())));
                        }
                        process.install_page(n, content.to_vec());
                        ctx.last_entity = Some(format!("page {n}"));
                        ctx.entities_done += 1;
                        Ok(Applied::Entity)
                    }
                    TAG_REGION_PAGE => {
                        let region = RegionId(r.u64().map_err(|e| bad(ctx, e))?);
                        let index = r.u32().map_err(|e| bad(ctx, e))?;
                        ctx.env
                            .assembly
                            .add_page(&ctx.env.regions, region, index, r.rest())
                            .map_err(|e| bad(ctx, e))?;
                        ctx.last_entity = Some(format!("{region} page {index}"));
                        ctx.entities_done += 1;
                        Ok(Applied::Entity)
                    }
                    TAG_ROUND_END => Ok(Applied::RoundEnd),
                    other => Err(bad(ctx, format!("unknown entity tag {other:#04x}"))),
                }
            }
            ChunkKind::SharedRef => {
                let mut r = PayloadReader::new(&chunk.payload);
                let parse = |r: &mut PayloadReader| -> Result<_, String> {
                    let s = SharedRef {
                        region: RegionId(r.u64()?),
                        base_page: r.u64()?,
                        page_count: r.u64()?,
                    };
                    let len = r.u64()?;
                    let flags = r.u8()?;
                    r.finish()?;
                    Ok((s, len, flags))
                };
                let (s, len, flags) = parse(&mut r).map_err(|e| bad(ctx, e))?;
                if flags & SHARED_CARRIES_CONTENT != 0 {
                    ctx.env
                        .assembly
                        .begin(&ctx.env.regions, s.region, len as usize, page_size);
                }
                ctx.last_entity = Some(format!("shared ref {}", s.region));
                st.pending_maps.push(s);
                Ok(Applied::Other)
            }
            ChunkKind::EndOfSubsystem => Ok(Applied::End),
            ChunkKind::EndOfProcess => Err(bad(ctx, "end of process inside subsystem".into())),
        }
    }
}

enum Applied {
    Entity,
    Other,
    RoundEnd,
    End,
}

impl SubsystemOps for MemorySubsystem {
    fn checkpoint(
        &self,
        ctx: &mut StepContext,
        process: &mut GuestProcess,
        sink: &mut dyn ChunkSink,
    ) -> Result<StepReport, SubsystemError> {
        let mut st = ctx.take_state::<CheckpointState>();
        if st.phase != Some(ctx.mode) {
            Self::plan(&mut st, ctx, process);
        }
        let mut n = 0u64;
        let mut result = Ok(());
        while n < ctx.batch_limit as u64 {
            let Some(item) = st.queue.front().cloned() else {
                break;
            };
            match Self::emit_item(&mut st, &item, ctx, process, sink) {
                Ok(counted) => {
                    st.queue.pop_front();
                    if counted {
                        n += 1;
                        ctx.entities_done += 1;
                    }
                }
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        let done = st.queue.is_empty();
        ctx.put_state(st);
        result.map(|_| StepReport::processed(n, done))
    }

    fn restart(
        &self,
        ctx: &mut StepContext,
        process: &mut GuestProcess,
        source: &mut dyn ChunkSource,
    ) -> Result<StepReport, SubsystemError> {
        let mut st = ctx.take_state::<RestartState>();
        let result = (|| {
            if st.eos {
                return Self::finish_restart(&mut st, ctx, process, 0);
            }
            let mut n = 0;
            while let Some(chunk) = source.next()? {
                ctx.expect_sequence(&chunk)?;
                match Self::apply(&mut st, ctx, process, &chunk)? {
                    Applied::Entity => n += 1,
                    Applied::Other => {}
                    Applied::RoundEnd => {
                        return Ok(StepReport {
                            entities_processed: n,
                            done: false,
                            progressed: true,
                            round_complete: true,
                        })
                    }
                    Applied::End => {
                        st.eos = true;
                        return Self::finish_restart(&mut st, ctx, process, n);
                    }
                }
            }
            let mapped = Self::settle_maps(&mut st, ctx, process)?;
            Ok(StepReport::processed(n + mapped, false))
        })();
        ctx.put_state(st);
        result
    }

    fn estimate(&self, _ctx: &StepContext, process: &GuestProcess) -> u64 {
        let dirty = process.address_space.dirty_count() as u64;
        let shared: u64 = process
            .address_space
            .shared_refs
            .iter()
            .map(|r| r.page_count)
            .sum();
        dirty + shared
    }

    fn finish(&self, ctx: &mut StepContext, process: &mut GuestProcess, outcome: SessionOutcome) {
        let st = ctx.take_state::<CheckpointState>();
        if outcome == SessionOutcome::Retained {
            // Pages sent but not consumed by a migration stay non-baseline.
            for n in &st.cleared {
                if let Some(p) = process.address_space.pages.get_mut(n) {
                    if p.is_private() {
                        p.dirty = true;
                    }
                }
            }
        }
        ctx.put_state(st);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guest::{GuestSpec, Host, Pid};
    use crate::ids::{RequestId, SubsystemId};
    use crate::medium::Chunk;
    use crate::subsystem::{EventInfo, StepEnv};

    fn ctx(env: &StepEnv, pid: Pid) -> StepContext {
        StepContext::new(
            EventInfo {
                request_id: RequestId(1),
                token: None,
                source_pid: pid,
            },
            SubsystemId::new("mem").unwrap(),
            env.clone(),
        )
    }

    #[test]
    fn empty_address_space_is_done_at_once() {
        let mut host = Host::new();
        let pid = host.spawn_guest(&GuestSpec::new(1, 0)).unwrap();
        let p = host.get(pid).unwrap();
        let env = StepEnv::new(host.regions().clone());
        let mut c = ctx(&env, pid);
        let mut sink: Vec<Chunk> = Vec::new();
        let r = MemorySubsystem
            .checkpoint(&mut c, &mut p.lock(), &mut sink)
            .unwrap();
        assert_eq!(r, StepReport::processed(0, true));
        assert!(sink.is_empty());
    }

    #[test]
    fn ranges_split_on_dirty_state() {
        let mut host = Host::new();
        let pid = host
            .spawn_guest(&GuestSpec::new(1, 5 * 4096).with_footprint(false))
            .unwrap();
        let p = host.get(pid).unwrap();
        let mut p = p.lock();
        p.address_space.pages.get_mut(&2).unwrap().dirty = true;
        assert_eq!(
            page_ranges(&p),
            vec![
                MapRange { first_page: 0, page_count: 2, dirty: false },
                MapRange { first_page: 2, page_count: 1, dirty: true },
                MapRange { first_page: 3, page_count: 2, dirty: false },
            ]
        );
    }

    #[test]
    fn retained_session_restores_dirty_flags() {
        let mut host = Host::new();
        let pid = host.spawn_guest(&GuestSpec::new(1, 4 * 4096)).unwrap();
        let p = host.get(pid).unwrap();
        let env = StepEnv::new(host.regions().clone());
        let mut c = ctx(&env, pid);
        let mut sink: Vec<Chunk> = Vec::new();
        let mut g = p.lock();
        MemorySubsystem.checkpoint(&mut c, &mut g, &mut sink).unwrap();
        assert_eq!(g.address_space.dirty_count(), 0);
        MemorySubsystem.finish(&mut c, &mut g, SessionOutcome::Retained);
        assert_eq!(g.address_space.dirty_count(), 4);
    }
}
