//! Demand paging for lazily restored processes.
//!
//! The destination resumes a process whose private pages are still on the
//! source. A guest access to such a page pulls it over the backchannel;
//! the source answers each pull and may append up to `prefetch` further
//! pages unasked. Once the destination's guest driver returns it asks for
//! the rest (drain), installs every page still missing and reports the
//! process drained, after which the source may remove its copy.

use std::collections::{BTreeSet, HashMap};
use std::time::{Duration, Instant};

use crate::control::{ControlError, EventContext};
use crate::guest::{GuestError, GuestProcess, Pid, ProcessRef, RunState};
use crate::ids::{MigrationToken, SubsystemId};
use crate::medium::{
    CommandMessage, CommandPort, DataChannel, MediumError, Opcode, ACK_DRAIN, ACK_DRAINED, PULL_OK,
    PULL_SOURCE_GONE, PULL_UNKNOWN_PAGE,
};
use crate::guest::PageFaultHandler;

/// Runs a destination process right after it resumed, e.g. to exercise
/// lazily restored memory through `faults`.
pub trait GuestDriver: Send + Sync {
    fn run(
        &self,
        pid: Pid,
        process: &mut GuestProcess,
        faults: &mut dyn PageFaultHandler,
    ) -> Result<(), GuestError>;
}

/// A driver that touches a fixed list of pages.
#[derive(Debug, Clone, Default)]
pub struct TouchPages(pub Vec<u64>);

impl GuestDriver for TouchPages {
    fn run(
        &self,
        _pid: Pid,
        process: &mut GuestProcess,
        faults: &mut dyn PageFaultHandler,
    ) -> Result<(), GuestError> {
        process.touch_pages(&self.0, Some(faults)).map(|_| ())
    }
}

fn mem_id() -> SubsystemId {
    SubsystemId::new("mem").expect("valid id")
}

fn decode_reply(m: &CommandMessage) -> Result<(u64, u8, Vec<u8>), MediumError> {
    let page = m.body_u64(0)?;
    let status = m.body_u8(8)?;
    Ok((page, status, m.body()[9..].to_vec()))
}

/// Destination-side fault handler pulling pages from the source.
pub struct PullHandler<'a> {
    port: &'a mut CommandPort,
    ev: &'a EventContext,
    token: MigrationToken,
    source_pid: u32,
    timeout: Duration,
    cache: HashMap<u64, Vec<u8>>,
    pub pulls: u64,
}

impl<'a> PullHandler<'a> {
    pub fn new(
        port: &'a mut CommandPort,
        ev: &'a EventContext,
        token: MigrationToken,
        source_pid: u32,
        timeout: Duration,
    ) -> Self {
        PullHandler {
            port,
            ev,
            token,
            source_pid,
            timeout,
            cache: HashMap::new(),
            pulls: 0,
        }
    }

    fn absorb(&mut self, m: CommandMessage) -> Result<Option<(u64, Vec<u8>)>, GuestError> {
        let (page, status, content) = decode_reply(&m).map_err(|e| GuestError::FaultUnresolved {
            page: 0,
            reason: e.to_string(),
        })?;
        match status {
            PULL_OK => Ok(Some((page, content))),
            PULL_UNKNOWN_PAGE => Err(GuestError::FaultUnresolved {
                page,
                reason: "source does not know the page".into(),
            }),
            _ => Err(GuestError::FaultUnresolved {
                page,
                reason: "source is gone".into(),
            }),
        }
    }

    /// Moves unsolicited replies already received into the cache.
    fn collect(&mut self) -> Result<(), GuestError> {
        loop {
            let next = self
                .port
                .wait_for(Duration::ZERO, |m| m.opcode == Opcode::PagePullReply)
                .map_err(|e| unresolved(0, e))?;
            match next {
                Some(m) => {
                    if let Some((page, content)) = self.absorb(m)? {
                        self.cache.entry(page).or_insert(content);
                    }
                }
                None => return Ok(()),
            }
        }
    }

    fn next_reply(&mut self, deadline: Instant) -> Result<(u64, Vec<u8>), GuestError> {
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(GuestError::FaultUnresolved {
                    page: 0,
                    reason: "no reply from the source".into(),
                });
            }
            let m = self
                .port
                .wait_for(left.min(Duration::from_millis(50)), |m| {
                    m.opcode == Opcode::PagePullReply
                })
                .map_err(|e| unresolved(0, e))?;
            if let Some(m) = m {
                if let Some(r) = self.absorb(m)? {
                    return Ok(r);
                }
            }
            self.ev
                .check_continue()
                .map_err(|e| unresolved(0, e.to_string()))?;
        }
    }

    /// Pulls every page of `process` that is still not resident.
    pub fn drain(&mut self, process: &mut GuestProcess) -> Result<usize, ControlError> {
        let cached: Vec<(u64, Vec<u8>)> = self.cache.drain().collect();
        let mut installed = 0;
        for (page, content) in cached {
            installed += install(process, page, content) as usize;
        }
        if process.address_space.non_resident_count() == 0 {
            return Ok(installed);
        }
        self.port.send(&CommandMessage::step_ack(
            self.token,
            self.source_pid,
            0,
            ACK_DRAIN,
        ))?;
        while process.address_space.non_resident_count() > 0 {
            let (page, content) = self
                .next_reply(Instant::now() + self.timeout)
                .map_err(ControlError::Guest)?;
            if install(process, page, content) {
                installed += 1;
                self.ev.watchdog.feed();
            }
        }
        Ok(installed)
    }

    pub fn report_drained(&mut self) -> Result<(), MediumError> {
        self.port.send(&CommandMessage::step_ack(
            self.token,
            self.source_pid,
            0,
            ACK_DRAINED,
        ))
    }
}

fn unresolved(page: u64, e: impl ToString) -> GuestError {
    GuestError::FaultUnresolved {
        page,
        reason: e.to_string(),
    }
}

fn install(process: &mut GuestProcess, page: u64, content: Vec<u8>) -> bool {
    match process.address_space.pages.get(&page) {
        Some(p) if !p.resident && content.len() == process.page_size() => {
            process.install_page(page, content);
            true
        }
        _ => false,
    }
}

impl PageFaultHandler for PullHandler<'_> {
    fn resolve(&mut self, page: u64) -> Result<Vec<u8>, GuestError> {
        self.collect()?;
        if let Some(c) = self.cache.remove(&page) {
            return Ok(c);
        }
        self.pulls += 1;
        self.port
            .send(&CommandMessage::page_pull(
                self.token,
                mem_id(),
                self.source_pid,
                page,
            ))
            .map_err(|e| unresolved(page, e))?;
        let deadline = Instant::now() + self.timeout;
        loop {
            let (n, content) = self.next_reply(deadline)?;
            if n == page {
                self.ev.watchdog.feed();
                return Ok(content);
            }
            self.cache.entry(n).or_insert(content);
        }
    }
}

/// What the source sent after the destination resumed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub pull_requests: u64,
    pub pages: u64,
    pub bytes: u64,
}

/// Source side: answers page pulls for `process` until the destination
/// reports it drained. `pages` are the page numbers the destination does
/// not have.
pub fn serve_pages(
    ev: &EventContext,
    channel: &mut DataChannel,
    process: &ProcessRef,
    pages: BTreeSet<u64>,
    prefetch: u32,
    token: MigrationToken,
    source_pid: u32,
) -> Result<ServeStats, ControlError> {
    let mut stats = ServeStats::default();
    if pages.is_empty() {
        return Ok(stats);
    }
    let mut unsent = pages.clone();
    let poll = (ev.watchdog.period() / 4).clamp(Duration::from_millis(1), Duration::from_millis(50));
    let send = |channel: &mut DataChannel, page: u64, stats: &mut ServeStats| -> Result<(), ControlError> {
        let reply = {
            let p = process.lock();
            if p.run_state == RunState::Removed {
                CommandMessage::page_reply(token, mem_id(), source_pid, page, PULL_SOURCE_GONE, &[])
            } else {
                match p.address_space.pages.get(&page) {
                    Some(pg) if pages.contains(&page) => {
                        CommandMessage::page_reply(token, mem_id(), source_pid, page, PULL_OK, &pg.content)
                    }
                    _ => CommandMessage::page_reply(token, mem_id(), source_pid, page, PULL_UNKNOWN_PAGE, &[]),
                }
            }
        };
        channel.command(&reply)?;
        stats.pages += 1;
        stats.bytes += reply.encode().len() as u64;
        Ok(())
    };
    let mut drained_all = false;
    loop {
        ev.check_continue()?;
        if channel.drained() {
            return Ok(stats);
        }
        if channel.drain_requested() && !drained_all {
            for page in std::mem::take(&mut unsent) {
                send(channel, page, &mut stats)?;
                ev.watchdog.feed();
            }
            drained_all = true;
        }
        let Some(m) = channel.take_command(poll)? else {
            continue;
        };
        if m.opcode != Opcode::PagePullRequest {
            continue;
        }
        let page = m.body_u64(0)?;
        stats.pull_requests += 1;
        if !pages.contains(&page) {
            send(channel, page, &mut stats)?;
            return Err(ControlError::Medium(MediumError::Protocol(format!(
                "pull for unknown page {page}"
            ))));
        }
        unsent.remove(&page);
        send(channel, page, &mut stats)?;
        let extra: Vec<u64> = unsent.range(page..).take(prefetch as usize).copied().collect();
        for n in extra {
            unsent.remove(&n);
            send(channel, n, &mut stats)?;
        }
        ev.watchdog.feed();
    }
}
