use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::Serialize;

use crate::guest::{GuestProcess, Pid};
use crate::ids::{MigrationToken, RequestId, SubsystemId};
use crate::medium::ChannelStats;
use crate::subsystem::ProgressSummary;

use super::{ControlError, EventKind, ExecCtx, ProcessHooks, QuiesceMethod, Strategy};

pub const DEFAULT_WATCHDOG_PERIOD: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventState {
    Created,
    Prepared,
    Running,
    Draining,
    Done,
    Failed,
    Frozen,
}

impl EventState {
    pub fn is_terminal(self) -> bool {
        matches!(self, EventState::Done | EventState::Failed | EventState::Frozen)
    }

    fn can_transition_to(self, to: EventState) -> bool {
        use EventState::*;
        matches!(
            (self, to),
            (Created, Prepared)
                | (Prepared, Running)
                | (Running, Draining)
                | (Draining, Done)
                | (Prepared | Running | Draining, Failed | Frozen)
        )
    }
}

/// Fires when an armed event has made no progress for longer than its period.
#[derive(Debug)]
pub struct Watchdog {
    period: Duration,
    last_progress: Mutex<Instant>,
    armed: AtomicBool,
}

impl Watchdog {
    pub fn new(period: Duration) -> Self {
        Watchdog {
            period,
            last_progress: Mutex::new(Instant::now()),
            armed: AtomicBool::new(false),
        }
    }

    pub fn period(&self) -> Duration {
        self.period
    }

    pub fn arm(&self) {
        *self.last_progress.lock() = Instant::now();
        self.armed.store(true, Ordering::SeqCst);
    }

    pub fn disarm(&self) {
        self.armed.store(false, Ordering::SeqCst);
    }

    pub fn is_armed(&self) -> bool {
        self.armed.load(Ordering::SeqCst)
    }

    /// Records progress and re-arms the timer.
    pub fn feed(&self) {
        *self.last_progress.lock() = Instant::now();
    }

    pub fn last_progress(&self) -> Instant {
        *self.last_progress.lock()
    }

    pub fn fired_at(&self, now: Instant) -> bool {
        self.is_armed() && now.saturating_duration_since(self.last_progress()) > self.period
    }

    pub fn fired(&self) -> bool {
        self.fired_at(Instant::now())
    }
}

/// Wall-clock marks of an event, relative to its creation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Timestamps {
    pub started_us: Option<u64>,
    pub quiesced_us: Option<u64>,
    pub resumed_us: Option<u64>,
    pub finished_us: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsystemProgress {
    pub subsystem: String,
    #[serde(flatten)]
    pub summary: ProgressSummary,
    pub steps: u64,
}

/// A snapshot of one event for status queries.
#[derive(Debug, Clone, Serialize)]
pub struct EventStatus {
    pub request_id: u64,
    pub pid: u32,
    pub kind: EventKind,
    pub strategy: Strategy,
    pub state: EventState,
    pub progress: Vec<SubsystemProgress>,
    pub stats: ChannelStats,
    pub timestamps: Timestamps,
    pub error: Option<String>,
    pub diagnostics: Vec<String>,
}

struct Inner {
    state: EventState,
    progress: BTreeMap<SubsystemId, (ProgressSummary, u64)>,
    stats: ChannelStats,
    times: Timestamps,
    error: Option<String>,
    diagnostics: Vec<String>,
}

/// The state of one request as it applies to one process.
pub struct EventContext {
    pub request_id: RequestId,
    /// The process on this node: the source for checkpoint and migrate,
    /// the destination frame for restart.
    pub pid: Pid,
    /// The pid the state originated from.
    pub source_pid: Pid,
    pub token: Option<MigrationToken>,
    pub kind: EventKind,
    pub strategy: Strategy,
    pub exec_ctx: ExecCtx,
    pub quiesce: QuiesceMethod,
    pub watchdog: Watchdog,
    created: Instant,
    hooks: Arc<dyn ProcessHooks>,
    inner: Mutex<Inner>,
    abort: Mutex<Option<String>>,
    cleanup_done: AtomicBool,
}

impl std::fmt::Debug for EventContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventContext")
            .field("request_id", &self.request_id)
            .field("pid", &self.pid)
            .field("kind", &self.kind)
            .field("state", &self.state())
            .finish()
    }
}

impl EventContext {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        request_id: RequestId,
        pid: Pid,
        source_pid: Pid,
        token: Option<MigrationToken>,
        kind: EventKind,
        strategy: Strategy,
        exec_ctx: ExecCtx,
        quiesce: QuiesceMethod,
        watchdog_period: Duration,
        hooks: Arc<dyn ProcessHooks>,
    ) -> Self {
        EventContext {
            request_id,
            pid,
            source_pid,
            token,
            kind,
            strategy,
            exec_ctx,
            quiesce,
            watchdog: Watchdog::new(watchdog_period),
            created: Instant::now(),
            hooks,
            inner: Mutex::new(Inner {
                state: EventState::Created,
                progress: BTreeMap::new(),
                stats: ChannelStats::default(),
                times: Timestamps::default(),
                error: None,
                diagnostics: Vec::new(),
            }),
            abort: Mutex::new(None),
            cleanup_done: AtomicBool::new(false),
        }
    }

    /// A standalone event with default settings, mostly for tests.
    pub fn simple(request_id: RequestId, pid: Pid, kind: EventKind) -> Self {
        EventContext::new(
            request_id,
            pid,
            pid,
            None,
            kind,
            Strategy::StopAndCopy,
            ExecCtx::External,
            QuiesceMethod::Asynchronous,
            DEFAULT_WATCHDOG_PERIOD,
            Arc::new(super::NoHooks),
        )
    }

    pub fn hooks(&self) -> &dyn ProcessHooks {
        self.hooks.as_ref()
    }

    pub fn state(&self) -> EventState {
        self.inner.lock().state
    }

    pub fn created(&self) -> Instant {
        self.created
    }

    fn elapsed_us(&self) -> u64 {
        self.created.elapsed().as_micros() as u64
    }

    /// Moves the event forward. Entering `Running` arms the watchdog;
    /// terminal states disarm it.
    pub fn advance(&self, to: EventState) -> Result<(), ControlError> {
        let mut inner = self.inner.lock();
        if !inner.state.can_transition_to(to) {
            return Err(ControlError::IllegalTransition {
                from: inner.state,
                to,
            });
        }
        inner.state = to;
        let now = self.elapsed_us();
        match to {
            EventState::Running => {
                inner.times.started_us.get_or_insert(now);
                self.watchdog.arm();
            }
            s if s.is_terminal() => {
                inner.times.finished_us = Some(now);
                self.watchdog.disarm();
            }
            _ => {}
        }
        Ok(())
    }

    /// Marks the event failed unless it already ended. Returns whether
    /// this call made the transition.
    pub fn fail(&self, reason: &str) -> bool {
        let mut inner = self.inner.lock();
        if inner.state.is_terminal() {
            return false;
        }
        inner.state = EventState::Failed;
        inner.error.get_or_insert_with(|| reason.to_string());
        inner.times.finished_us = Some(self.elapsed_us());
        self.watchdog.disarm();
        true
    }

    /// Marks the event frozen once. Only running or draining events freeze.
    pub fn freeze(&self) -> bool {
        let mut inner = self.inner.lock();
        if !matches!(inner.state, EventState::Running | EventState::Draining) {
            return false;
        }
        inner.state = EventState::Frozen;
        inner
            .error
            .get_or_insert_with(|| "no progress within the watchdog period".into());
        inner.times.finished_us = Some(self.elapsed_us());
        self.watchdog.disarm();
        true
    }

    pub fn request_abort(&self, reason: &str) {
        self.abort.lock().get_or_insert_with(|| reason.to_string());
    }

    pub fn abort_reason(&self) -> Option<String> {
        self.abort.lock().clone()
    }

    /// Returns an error if the worker should stop: abort requested, frozen
    /// by the scanner, or its own watchdog fired (which freezes it).
    pub fn check_continue(&self) -> Result<(), ControlError> {
        if self.state() == EventState::Frozen {
            return Err(ControlError::Frozen);
        }
        if self.watchdog.fired() {
            self.freeze();
            return Err(ControlError::Frozen);
        }
        if let Some(r) = self.abort_reason() {
            return Err(ControlError::Aborted(r));
        }
        Ok(())
    }

    pub fn record_progress(&self, subsystem: SubsystemId, summary: ProgressSummary, progressed: bool) {
        let mut inner = self.inner.lock();
        let e = inner.progress.entry(subsystem).or_default();
        e.0 = summary;
        e.1 += 1;
        drop(inner);
        if progressed {
            self.watchdog.feed();
        }
    }

    pub fn set_stats(&self, stats: ChannelStats) {
        self.inner.lock().stats = stats;
    }

    pub fn mark_quiesced(&self) {
        let now = self.elapsed_us();
        self.inner.lock().times.quiesced_us = Some(now);
    }

    pub fn mark_resumed(&self) {
        let now = self.elapsed_us();
        self.inner.lock().times.resumed_us = Some(now);
    }

    pub fn timestamps(&self) -> Timestamps {
        self.inner.lock().times
    }

    pub fn error(&self) -> Option<String> {
        self.inner.lock().error.clone()
    }

    pub fn add_diagnostic(&self, text: String) {
        if !text.is_empty() {
            self.inner.lock().diagnostics.push(text);
        }
    }

    pub fn diagnostics(&self) -> Vec<String> {
        self.inner.lock().diagnostics.clone()
    }

    /// Runs the cleanup hook; later calls do nothing.
    pub fn run_cleanup(&self, process: Option<&GuestProcess>) {
        if self.cleanup_done.swap(true, Ordering::SeqCst) {
            return;
        }
        self.hooks.cleanup(self, process, self.state());
    }

    pub fn cleanup_ran(&self) -> bool {
        self.cleanup_done.load(Ordering::SeqCst)
    }

    pub fn status(&self) -> EventStatus {
        let inner = self.inner.lock();
        EventStatus {
            request_id: self.request_id.0,
            pid: self.pid.0,
            kind: self.kind,
            strategy: self.strategy,
            state: inner.state,
            progress: inner
                .progress
                .iter()
                .map(|(id, (summary, steps))| SubsystemProgress {
                    subsystem: id.to_string(),
                    summary: *summary,
                    steps: *steps,
                })
                .collect(),
            stats: inner.stats,
            timestamps: inner.times,
            error: inner.error.clone(),
            diagnostics: inner.diagnostics.clone(),
        }
    }
}

/// Every event a node knows about, by request.
#[derive(Debug, Default)]
pub struct EventTable {
    events: Mutex<BTreeMap<RequestId, Vec<Arc<EventContext>>>>,
}

impl EventTable {
    pub fn insert(&self, ev: Arc<EventContext>) {
        self.events.lock().entry(ev.request_id).or_default().push(ev);
    }

    pub fn get(&self, id: RequestId) -> Option<Vec<Arc<EventContext>>> {
        self.events.lock().get(&id).cloned()
    }

    pub fn all(&self) -> Vec<Arc<EventContext>> {
        self.events.lock().values().flatten().cloned().collect()
    }

    pub fn active(&self) -> Vec<Arc<EventContext>> {
        self.all()
            .into_iter()
            .filter(|e| !e.state().is_terminal())
            .collect()
    }

    /// Freezes every armed event past its period. Returns the events this
    /// scan froze; each event is frozen at most once.
    pub fn watchdog_scan(&self, now: Instant) -> Vec<Arc<EventContext>> {
        self.all()
            .into_iter()
            .filter(|e| e.watchdog.fired_at(now) && e.freeze())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread::sleep;

    fn ev() -> EventContext {
        EventContext::simple(RequestId(1), Pid(1), EventKind::Checkpoint)
    }

    #[test]
    fn legal_path_and_illegal_jumps() {
        let e = ev();
        assert!(e.advance(EventState::Running).is_err());
        e.advance(EventState::Prepared).unwrap();
        assert!(e.advance(EventState::Done).is_err());
        e.advance(EventState::Running).unwrap();
        e.advance(EventState::Draining).unwrap();
        e.advance(EventState::Done).unwrap();
        assert!(!e.fail("late"));
        assert_eq!(e.state(), EventState::Done);
    }

    #[test]
    fn failed_only_from_active_states() {
        let e = ev();
        assert!(e.advance(EventState::Failed).is_err());
        e.advance(EventState::Prepared).unwrap();
        e.advance(EventState::Failed).unwrap();
    }

    #[test]
    fn watchdog_fires_after_period_without_progress() {
        let w = Watchdog::new(Duration::from_millis(30));
        assert!(!w.fired());
        w.arm();
        let t0 = w.last_progress();
        assert!(!w.fired_at(t0 + Duration::from_millis(30)));
        assert!(w.fired_at(t0 + Duration::from_millis(31)));
        sleep(Duration::from_millis(20));
        w.feed();
        assert!(!w.fired_at(t0 + Duration::from_millis(31)));
        w.disarm();
        assert!(!w.fired_at(t0 + Duration::from_secs(10)));
    }

    #[test]
    fn scan_freezes_once() {
        let table = EventTable::default();
        let e = Arc::new(EventContext::new(
            RequestId(3),
            Pid(1),
            Pid(1),
            None,
            EventKind::Checkpoint,
            Strategy::StopAndCopy,
            ExecCtx::External,
            QuiesceMethod::Asynchronous,
            Duration::from_millis(10),
            Arc::new(super::super::NoHooks),
        ));
        table.insert(e.clone());
        e.advance(EventState::Prepared).unwrap();
        e.advance(EventState::Running).unwrap();
        let later = Instant::now() + Duration::from_millis(50);
        assert_eq!(table.watchdog_scan(later).len(), 1);
        assert_eq!(table.watchdog_scan(later).len(), 0);
        assert_eq!(e.state(), EventState::Frozen);
        assert!(table.active().is_empty());
    }
}
