use std::collections::{HashSet, VecDeque};
use std::thread;
use std::time::{Duration, Instant};

use crate::guest::{GuestProcess, ProcessRef, RunState};
use crate::ids::SubsystemId;
use crate::medium::{
    ChannelStats, Chunk, ChunkKind, DataChannel, MediumError, ACK_ROUND,
};
use crate::subsystem::{
    mem, CheckpointMode, ChunkSink, ChunkSource, DumpReason, EntityRef, EventInfo, FaultOutcome,
    SessionOutcome, StepContext, StepEnv, SubsystemDescriptor, SubsystemError,
};

use super::{quiesce, ControlError, EventContext, EventState};

/// The subsystems of one event with their per-event contexts.
pub struct Session {
    pub event: EventInfo,
    subsystems: Vec<SubsystemDescriptor>,
    contexts: Vec<StepContext>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("event", &self.event)
            .field("contexts", &self.contexts)
            .finish()
    }
}

impl Session {
    /// `subsystems` must already be in checkpoint order.
    pub fn new(
        event: EventInfo,
        subsystems: Vec<SubsystemDescriptor>,
        env: StepEnv,
        batch_limit: usize,
    ) -> Self {
        let contexts = subsystems
            .iter()
            .map(|d| {
                let mut ctx = StepContext::new(event, d.subsystem_id, env.clone());
                ctx.batch_limit = batch_limit.max(1);
                ctx
            })
            .collect();
        Session {
            event,
            subsystems,
            contexts,
        }
    }

    pub fn subsystems(&self) -> &[SubsystemDescriptor] {
        &self.subsystems
    }

    fn index_of(&self, id: SubsystemId) -> Option<usize> {
        self.subsystems.iter().position(|d| d.subsystem_id == id)
    }

    pub fn context(&mut self, id: SubsystemId) -> Option<&mut StepContext> {
        let i = self.index_of(id)?;
        Some(&mut self.contexts[i])
    }

    /// Memory counters of the checkpoint side, if `mem` takes part.
    pub fn mem_stats(&mut self) -> Option<mem::MemStats> {
        let id = SubsystemId::new("mem").ok()?;
        self.context(id).map(mem::session_stats)
    }

    pub fn restored_lazily(&mut self) -> bool {
        let Ok(id) = SubsystemId::new("mem") else {
            return false;
        };
        self.context(id).map(mem::restored_lazily).unwrap_or(false)
    }

    /// Tells every subsystem the source side is over.
    pub fn finish(&mut self, process: &mut GuestProcess, outcome: SessionOutcome) {
        for (d, ctx) in self.subsystems.iter().zip(self.contexts.iter_mut()) {
            d.ops.finish(ctx, process, outcome);
        }
    }

    pub fn dump(&self, reason: &DumpReason) -> Vec<String> {
        self.subsystems
            .iter()
            .zip(&self.contexts)
            .map(|(d, ctx)| d.ops.dump(ctx, Some(reason)))
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// Marks `ev` failed or frozen according to `err` and stores the
    /// subsystem dumps as its diagnostics.
    pub fn record_failure(&self, ev: &EventContext, err: &ControlError) {
        let reason = match err {
            ControlError::Frozen => {
                ev.freeze();
                DumpReason::Frozen
            }
            e => {
                ev.fail(&e.to_string());
                DumpReason::Failed(e.to_string())
            }
        };
        if ev.diagnostics().is_empty() {
            for d in self.dump(&reason) {
                ev.add_diagnostic(d);
            }
        }
    }
}

/// Where a checkpoint pass writes.
pub trait Outlet: ChunkSink {
    fn flush(&mut self) -> Result<(), MediumError> {
        Ok(())
    }

    fn channel_stats(&self) -> Option<ChannelStats> {
        None
    }
}

impl Outlet for DataChannel {
    fn flush(&mut self) -> Result<(), MediumError> {
        DataChannel::flush(self)
    }

    fn channel_stats(&self) -> Option<ChannelStats> {
        Some(self.stats())
    }
}

impl Outlet for Vec<Chunk> {}

/// Where a restart pass reads.
pub trait Inlet {
    fn pop(&mut self, deadline: Instant) -> Result<Chunk, MediumError>;

    fn request_resend(&mut self) -> Result<(), MediumError> {
        Err(MediumError::Unsupported("resend without a backchannel"))
    }

    fn send_ack(&mut self, _flags: u8) -> Result<(), MediumError> {
        Ok(())
    }

    fn channel_stats(&self) -> Option<ChannelStats> {
        None
    }
}

impl Inlet for DataChannel {
    fn pop(&mut self, deadline: Instant) -> Result<Chunk, MediumError> {
        self.popdata_until(deadline)
    }

    fn request_resend(&mut self) -> Result<(), MediumError> {
        DataChannel::request_resend(self)
    }

    fn send_ack(&mut self, flags: u8) -> Result<(), MediumError> {
        if self.has_backchannel() {
            DataChannel::send_ack(self, flags)
        } else {
            Ok(())
        }
    }

    fn channel_stats(&self) -> Option<ChannelStats> {
        Some(self.stats())
    }
}

impl Inlet for VecDeque<Chunk> {
    fn pop(&mut self, _deadline: Instant) -> Result<Chunk, MediumError> {
        self.pop_front().ok_or(MediumError::TruncatedStream)
    }
}

pub struct PassOptions<'a> {
    pub mode: CheckpointMode,
    /// Restrict the pass to one subsystem (pre-copy rounds use `mem`).
    pub only: Option<SubsystemId>,
    /// Emit end-of-subsystem markers and the end-of-process marker.
    pub end_markers: bool,
    /// Runs after every successful step, e.g. to let a live guest advance
    /// between pre-copy batches.
    pub between_steps: Option<&'a mut dyn FnMut() -> Result<(), ControlError>>,
}

impl PassOptions<'_> {
    pub fn full() -> Self {
        PassOptions {
            mode: CheckpointMode::Full,
            only: None,
            end_markers: true,
            between_steps: None,
        }
    }

    pub fn with_mode(mode: CheckpointMode) -> Self {
        PassOptions {
            mode,
            ..Self::full()
        }
    }
}

fn poll_interval(ev: &EventContext) -> Duration {
    (ev.watchdog.period() / 4).clamp(Duration::from_millis(1), Duration::from_millis(100))
}

/// Pushes an end marker, retrying while the peer applies backpressure.
fn emit_marker(
    ev: &EventContext,
    out: &mut dyn Outlet,
    mut ctx: Option<&mut StepContext>,
) -> Result<(), ControlError> {
    loop {
        ev.check_continue()?;
        let pushed = match ctx.as_deref_mut() {
            Some(c) => c.emit(out, ChunkKind::EndOfSubsystem, Vec::new()),
            None => out.push(&Chunk::end_of_process()),
        };
        match pushed {
            Ok(()) => {
                ev.watchdog.feed();
                return Ok(());
            }
            Err(MediumError::BackpressureTimeout) => {}
            Err(e) => return Err(e.into()),
        }
    }
}

/// Drives the subsystems over `process` in order, one bounded step at a
/// time, checking for abort and the watchdog between steps.
pub fn checkpoint_pass(
    ev: &EventContext,
    session: &mut Session,
    process: &ProcessRef,
    out: &mut dyn Outlet,
    mut opts: PassOptions<'_>,
) -> Result<(), ControlError> {
    for idx in 0..session.subsystems.len() {
        let desc = session.subsystems[idx].clone();
        let id = desc.subsystem_id;
        if opts.only.is_some_and(|only| only != id) {
            continue;
        }
        let ctx = &mut session.contexts[idx];
        ctx.mode = opts.mode;
        ctx.entities_total = ctx.entities_done + desc.ops.estimate(ctx, &process.lock());
        let mut retried = false;
        loop {
            ev.check_continue()?;
            let r = {
                let mut p = process.lock();
                desc.ops.checkpoint(ctx, &mut p, out)
            };
            match r {
                Ok(rep) => {
                    ev.record_progress(id, desc.ops.status(ctx), rep.progressed);
                    if let Some(stats) = out.channel_stats() {
                        ev.set_stats(stats);
                    }
                    if let Some(cb) = opts.between_steps.as_mut() {
                        cb()?;
                    }
                    if rep.done {
                        break;
                    }
                    if !rep.progressed {
                        thread::yield_now();
                    }
                }
                Err(SubsystemError::Medium(MediumError::BackpressureTimeout)) => {}
                Err(e) => {
                    let entity = EntityRef {
                        subsystem: id,
                        sequence: ctx.sequence,
                        error: e.to_string(),
                    };
                    match desc.ops.fault(ctx, &entity) {
                        FaultOutcome::Resend if !retried => retried = true,
                        _ => return Err(e.into()),
                    }
                }
            }
        }
        if opts.end_markers {
            emit_marker(ev, out, Some(ctx))?;
        }
    }
    if opts.end_markers {
        emit_marker(ev, out, None)?;
    }
    loop {
        ev.check_continue()?;
        match out.flush() {
            Ok(()) => break,
            Err(MediumError::BackpressureTimeout) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(stats) = out.channel_stats() {
        ev.set_stats(stats);
    }
    Ok(())
}

struct StreamSource<'a> {
    input: &'a mut dyn Inlet,
    pending: &'a mut Option<Chunk>,
    subsystem: SubsystemId,
    poll: Duration,
    saw_end: bool,
}

impl ChunkSource for StreamSource<'_> {
    fn next(&mut self) -> Result<Option<Chunk>, MediumError> {
        if self.saw_end {
            return Ok(None);
        }
        let chunk = match self.pending.take() {
            Some(c) => c,
            None => match self.input.pop(Instant::now() + self.poll) {
                Ok(c) => c,
                Err(MediumError::Timeout) => return Ok(None),
                Err(e) => return Err(e),
            },
        };
        if chunk.subsystem != self.subsystem || chunk.kind == ChunkKind::EndOfProcess {
            *self.pending = Some(chunk);
            return Ok(None);
        }
        if chunk.kind == ChunkKind::EndOfSubsystem {
            self.saw_end = true;
        }
        Ok(Some(chunk))
    }
}

struct RestartProgress {
    ended: Vec<bool>,
    done: Vec<bool>,
    resent: HashSet<(SubsystemId, u32)>,
}

fn restart_step(
    ev: &EventContext,
    session: &mut Session,
    frame: &ProcessRef,
    input: &mut dyn Inlet,
    pending: &mut Option<Chunk>,
    idx: usize,
    st: &mut RestartProgress,
) -> Result<(), ControlError> {
    let desc = session.subsystems[idx].clone();
    let ctx = &mut session.contexts[idx];
    let mut src = StreamSource {
        input,
        pending,
        subsystem: desc.subsystem_id,
        poll: poll_interval(ev),
        saw_end: st.ended[idx],
    };
    let r = {
        let mut p = frame.lock();
        desc.ops.restart(ctx, &mut p, &mut src)
    };
    let saw_end = src.saw_end;
    match r {
        Ok(rep) => {
            st.ended[idx] |= saw_end;
            ev.record_progress(desc.subsystem_id, desc.ops.status(ctx), rep.progressed);
            if rep.round_complete {
                input.send_ack(ACK_ROUND)?;
            }
            if rep.done {
                st.done[idx] = true;
            }
            Ok(())
        }
        Err(SubsystemError::Medium(MediumError::ChecksumMismatch {
            subsystem,
            sequence,
        })) => {
            st.ended[idx] |= saw_end;
            corrupt_chunk(session, input, st, subsystem, sequence)
        }
        Err(e) => Err(e.into()),
    }
}

fn corrupt_chunk(
    session: &mut Session,
    input: &mut dyn Inlet,
    st: &mut RestartProgress,
    subsystem: SubsystemId,
    sequence: u32,
) -> Result<(), ControlError> {
    let failed = ControlError::Medium(MediumError::ChecksumMismatch {
        subsystem,
        sequence,
    });
    if !st.resent.insert((subsystem, sequence)) {
        return Err(failed);
    }
    let Some(idx) = session.index_of(subsystem) else {
        return Err(failed);
    };
    let entity = EntityRef {
        subsystem,
        sequence,
        error: failed.to_string(),
    };
    let desc = session.subsystems[idx].clone();
    match desc.ops.fault(&mut session.contexts[idx], &entity) {
        FaultOutcome::Resend => input.request_resend().map_err(|_| failed),
        FaultOutcome::Fail(_) => Err(failed),
    }
}

/// Rebuilds `frame` from a chunk stream, dispatching chunks to their
/// subsystems in stream order, until the end-of-process marker arrives and
/// every subsystem that appeared in the stream reports done.
pub fn restart_pass(
    ev: &EventContext,
    session: &mut Session,
    frame: &ProcessRef,
    input: &mut dyn Inlet,
) -> Result<(), ControlError> {
    let n = session.subsystems.len();
    let mut st = RestartProgress {
        ended: vec![false; n],
        done: vec![false; n],
        resent: HashSet::new(),
    };
    let poll = poll_interval(ev);
    let mut pending: Option<Chunk> = None;
    loop {
        ev.check_continue()?;
        for idx in 0..n {
            if st.ended[idx] && !st.done[idx] {
                let mut none = None;
                restart_step(ev, session, frame, input, &mut none, idx, &mut st)?;
            }
        }
        let chunk = match pending.take() {
            Some(c) => c,
            None => match input.pop(Instant::now() + poll) {
                Ok(c) => c,
                Err(MediumError::Timeout) => continue,
                Err(MediumError::ChecksumMismatch {
                    subsystem,
                    sequence,
                }) => {
                    corrupt_chunk(session, input, &mut st, subsystem, sequence)?;
                    continue;
                }
                Err(e) => return Err(e.into()),
            },
        };
        if chunk.kind == ChunkKind::EndOfProcess {
            if (0..n).all(|i| st.done[i] || !st.ended[i]) {
                if let Some(i) = (0..n).find(|&i| !st.ended[i] && session.contexts[i].sequence > 0) {
                    return Err(SubsystemError::Malformed {
                        subsystem: session.subsystems[i].subsystem_id,
                        sequence: session.contexts[i].sequence,
                        reason: "stream ended inside the subsystem".into(),
                    }
                    .into());
                }
                break;
            }
            pending = Some(chunk);
            thread::sleep(poll.min(Duration::from_millis(5)));
            continue;
        }
        let Some(idx) = session.index_of(chunk.subsystem) else {
            return Err(ControlError::UnknownSubsystem(chunk.subsystem));
        };
        if st.ended[idx] {
            return Err(SubsystemError::Malformed {
                subsystem: chunk.subsystem,
                sequence: chunk.sequence,
                reason: "chunk after end of subsystem".into(),
            }
            .into());
        }
        pending = Some(chunk);
        restart_step(ev, session, frame, input, &mut pending, idx, &mut st)?;
        if let Some(stats) = input.channel_stats() {
            ev.set_stats(stats);
        }
    }
    if let Some(stats) = input.channel_stats() {
        ev.set_stats(stats);
    }
    Ok(())
}

fn back_to_running(process: &ProcessRef) {
    let mut p = process.lock();
    if matches!(p.run_state, RunState::Quiesced | RunState::Migrating) {
        let _ = p.transition(RunState::Running);
    }
}

/// A complete standalone checkpoint of a prepared event: quiesce, one full
/// pass into `out`, resume. The process keeps running afterwards whatever
/// the outcome; the cleanup hook runs once.
pub fn checkpoint_worker(
    ev: &EventContext,
    session: &mut Session,
    process: &ProcessRef,
    out: &mut dyn Outlet,
    quiesce_deadline: Duration,
) -> Result<(), ControlError> {
    let mut run = |session: &mut Session| -> Result<(), ControlError> {
        ev.hooks().setup(ev, &process.lock());
        ev.advance(EventState::Running)?;
        quiesce(process, ev.quiesce, quiesce_deadline)?;
        ev.mark_quiesced();
        checkpoint_pass(ev, session, process, out, PassOptions::full())?;
        ev.advance(EventState::Draining)?;
        Ok(())
    };
    let result = run(session);
    {
        let mut p = process.lock();
        session.finish(&mut p, SessionOutcome::Retained);
    }
    back_to_running(process);
    match &result {
        Ok(()) => {
            ev.mark_resumed();
            ev.advance(EventState::Done)?;
        }
        Err(e) => session.record_failure(ev, e),
    }
    ev.run_cleanup(Some(&process.lock()));
    result
}

/// Rebuilds a prepared destination frame from `input`, runs the restart
/// hook and resumes the frame. On success the event is left `Draining`
/// for the caller to commit; on failure it is marked failed or frozen and
/// the caller destroys the frame.
pub fn restart_worker(
    ev: &EventContext,
    session: &mut Session,
    frame: &ProcessRef,
    input: &mut dyn Inlet,
) -> Result<(), ControlError> {
    let mut run = |session: &mut Session| -> Result<(), ControlError> {
        ev.hooks().setup(ev, &frame.lock());
        ev.advance(EventState::Running)?;
        restart_pass(ev, session, frame, input)?;
        ev.advance(EventState::Draining)?;
        let mut p = frame.lock();
        ev.hooks()
            .restart(ev, &p)
            .map_err(ControlError::HookVeto)?;
        p.transition(RunState::Resumed)?;
        ev.mark_resumed();
        Ok(())
    };
    let result = run(session);
    if let Err(e) = &result {
        session.record_failure(ev, e);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{EventKind, RecordingHooks};
    use crate::guest::{snapshot_digest, GuestSpec, Host, Pid, Regions};
    use crate::ids::RequestId;
    use crate::medium::{ChannelConfig, DataChannel};
    use crate::subsystem::{builtin_subsystems, counter, SubsystemRegistry};
    use std::sync::Arc;

    fn session(pid: Pid, regions: &Regions, batch_limit: usize) -> Session {
        let mut reg = SubsystemRegistry::with_builtins();
        reg.register(counter::descriptor()).unwrap();
        Session::new(
            EventInfo {
                request_id: RequestId(1),
                token: None,
                source_pid: pid,
            },
            reg.ordered(),
            StepEnv::new(regions.clone()),
            batch_limit,
        )
    }

    fn prepared(pid: Pid, kind: EventKind) -> EventContext {
        let ev = EventContext::simple(RequestId(1), pid, kind);
        ev.advance(EventState::Prepared).unwrap();
        ev
    }

    #[test]
    fn checkpoint_then_restart_preserves_digest() {
        let mut host = Host::new();
        let pid = host.spawn_guest(&GuestSpec::new(3, 1 << 20)).unwrap();
        let p = host.get(pid).unwrap();
        counter::increment(&mut p.lock(), 41);
        let before = snapshot_digest(&p.lock(), host.regions(), true).unwrap();

        let ev = prepared(pid, EventKind::Checkpoint);
        let mut s = session(pid, host.regions(), 64);
        let mut out: Vec<Chunk> = Vec::new();
        checkpoint_worker(&ev, &mut s, &p, &mut out, Duration::from_secs(1)).unwrap();
        assert_eq!(ev.state(), EventState::Done);
        assert_eq!(p.lock().run_state, RunState::Running);
        assert_eq!(out.last().unwrap().kind, ChunkKind::EndOfProcess);
        let eos = out.iter().filter(|c| c.kind == ChunkKind::EndOfSubsystem).count();
        assert_eq!(eos, 4);

        let mut dest = Host::new();
        let (dpid, frame) = dest.create_frame(4096);
        let rev = prepared(dpid, EventKind::Restart);
        let mut rs = session(pid, dest.regions(), 64);
        let mut input: VecDeque<Chunk> = out.into();
        restart_worker(&rev, &mut rs, &frame, &mut input).unwrap();
        assert_eq!(frame.lock().run_state, RunState::Resumed);
        assert_eq!(counter::value(&frame.lock()), Some(41));
        let mut f = frame.lock().clone();
        f.pid = pid;
        assert_eq!(snapshot_digest(&f, dest.regions(), true).unwrap(), before);
    }

    #[test]
    fn checkpoint_steps_are_bounded_by_batch_limit() {
        let mut host = Host::new();
        let pid = host.spawn_guest(&GuestSpec::new(1, 256 * 4096)).unwrap();
        let p = host.get(pid).unwrap();
        let ev = prepared(pid, EventKind::Checkpoint);
        let mut s = session(pid, host.regions(), 64);
        checkpoint_worker(&ev, &mut s, &p, &mut Vec::new(), Duration::from_secs(1)).unwrap();
        let status = ev.status();
        let mem = status.progress.iter().find(|x| x.subsystem == "mem").unwrap();
        assert_eq!(mem.summary.entities_done, 256);
        assert_eq!(mem.steps, 4);
    }

    #[test]
    fn unknown_subsystem_in_stream_fails_restart() {
        let mut host = Host::new();
        let pid = host.spawn_guest(&GuestSpec::new(1, 4096)).unwrap();
        let p = host.get(pid).unwrap();
        counter::increment(&mut p.lock(), 1);
        let ev = prepared(pid, EventKind::Checkpoint);
        let mut s = session(pid, host.regions(), 64);
        let mut out = Vec::new();
        checkpoint_worker(&ev, &mut s, &p, &mut out, Duration::from_secs(1)).unwrap();

        let mut dest = Host::new();
        let (dpid, frame) = dest.create_frame(4096);
        let hooks = Arc::new(RecordingHooks::default());
        let rev = EventContext::new(
            RequestId(2),
            dpid,
            pid,
            None,
            EventKind::Restart,
            crate::control::Strategy::StopAndCopy,
            crate::control::ExecCtx::External,
            crate::control::QuiesceMethod::Asynchronous,
            Duration::from_secs(2),
            hooks.clone(),
        );
        rev.advance(EventState::Prepared).unwrap();
        let mut rs = Session::new(
            s.event,
            builtin_subsystems(),
            StepEnv::new(dest.regions().clone()),
            64,
        );
        let mut input: VecDeque<Chunk> = out.into();
        let err = restart_worker(&rev, &mut rs, &frame, &mut input).unwrap_err();
        assert_eq!(
            err,
            ControlError::UnknownSubsystem(SubsystemId::new("counter").unwrap())
        );
        assert_eq!(rev.state(), EventState::Failed);
        rev.run_cleanup(None);
        rev.run_cleanup(None);
        assert_eq!(hooks.cleanups(), 1);
    }

    #[test]
    fn truncated_stream_fails_restart() {
        let mut host = Host::new();
        let pid = host.spawn_guest(&GuestSpec::new(2, 8 * 4096)).unwrap();
        let p = host.get(pid).unwrap();
        let ev = prepared(pid, EventKind::Checkpoint);
        let mut s = session(pid, host.regions(), 64);
        let mut out = Vec::new();
        checkpoint_worker(&ev, &mut s, &p, &mut out, Duration::from_secs(1)).unwrap();
        out.truncate(out.len() / 2);

        let mut dest = Host::new();
        let (dpid, frame) = dest.create_frame(4096);
        let rev = prepared(dpid, EventKind::Restart);
        let mut rs = session(pid, dest.regions(), 64);
        let mut input: VecDeque<Chunk> = out.into();
        let err = restart_worker(&rev, &mut rs, &frame, &mut input).unwrap_err();
        assert_eq!(err, ControlError::Medium(MediumError::TruncatedStream));
    }

    #[test]
    fn stalled_stream_freezes_within_two_periods() {
        let period = Duration::from_millis(100);
        let (tx, mut rx) = DataChannel::loopback_pair(ChannelConfig::default());
        let mut dest = Host::new();
        let (dpid, frame) = dest.create_frame(4096);
        let ev = EventContext::new(
            RequestId(5),
            dpid,
            Pid(9),
            None,
            EventKind::Restart,
            crate::control::Strategy::StopAndCopy,
            crate::control::ExecCtx::External,
            crate::control::QuiesceMethod::Asynchronous,
            period,
            Arc::new(crate::control::NoHooks),
        );
        ev.advance(EventState::Prepared).unwrap();
        let mut rs = session(Pid(9), dest.regions(), 64);
        let t0 = Instant::now();
        let err = restart_worker(&ev, &mut rs, &frame, &mut rx).unwrap_err();
        let took = t0.elapsed();
        drop(tx);
        assert_eq!(err, ControlError::Frozen);
        assert_eq!(ev.state(), EventState::Frozen);
        assert!(took > period && took < 2 * period, "{took:?}");
        let diags = ev.diagnostics();
        assert_eq!(diags.len(), 4);
        assert!(diags.iter().all(|d| d.contains("frozen")));
    }
}
