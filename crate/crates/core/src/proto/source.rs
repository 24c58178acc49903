//! Coordinator side of a migration batch.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::unbounded;
use parking_lot::Mutex;

use crate::control::{
    checkpoint_pass, quiesce, ControlError, EventContext, EventState, PassOptions, RequestSpec,
    Session, Strategy,
};
use crate::guest::{GuestError, ProcessRef, ResourcePolicy, RunState};
use crate::ids::{MigrationToken, RequestId, SubsystemId};
use crate::medium::{
    ChannelConfig, ChannelStats, CommandMessage, DataChannel, Endpoint, MediumError, Opcode, Role,
};
use crate::node::{Node, NodeError};
use crate::subsystem::mem::MemStats;
use crate::subsystem::{CheckpointMode, EventInfo, SessionOutcome, StepEnv};

use super::fault::{ArmedFault, Boundary};
use super::lazy::{serve_pages, ServeStats};
use super::link::Link;
use super::msg::{self, Accept, FailureKind, FrameSetup, Offer, ProcessSummary, Reject, RejectReason, ResumeAck};
use super::report::{MigrationReport, PidReport, RoundRecord, WorkloadCall};
use super::DATA_MAGIC;

const POLL: Duration = Duration::from_millis(5);

struct Work {
    rounds: Vec<RoundRecord>,
    channel: ChannelStats,
    mem: MemStats,
    serve: ServeStats,
}

struct Finished {
    index: usize,
    session: Option<Session>,
    result: Result<Work, ControlError>,
}

/// State shared by the coordinator and its transfer workers.
struct Batch<'a> {
    node: &'a Node,
    token: MigrationToken,
    spec: &'a RequestSpec,
    events: &'a [Arc<EventContext>],
    processes: &'a [ProcessRef],
    env: StepEnv,
    armed: ArmedFault,
    cut: Mutex<Option<Boundary>>,
    quiesced: Vec<Mutex<Option<Instant>>>,
}

impl Batch<'_> {
    fn cut_link(&self, link: &Link, at: Boundary) -> NodeError {
        *self.cut.lock() = Some(at);
        link.close();
        NodeError::Injected(at)
    }

    fn injected(&self) -> Option<Boundary> {
        *self.cut.lock()
    }
}

fn mem_id() -> SubsystemId {
    SubsystemId::new("mem").expect("valid id")
}

fn summary(process: &ProcessRef) -> ProcessSummary {
    let p = process.lock();
    ProcessSummary {
        pid: p.pid.0,
        threads: p.threads.len() as u32,
        private_pages: p.address_space.private_pages().count() as u64,
        shared: p
            .address_space
            .shared_refs
            .iter()
            .map(|r| (r.region.0, r.page_count * p.page_size() as u64))
            .collect(),
        files: p
            .file_table
            .iter()
            .map(|f| {
                let policy = match f.policy {
                    ResourcePolicy::UseLocal => 0,
                    ResourcePolicy::Transfer => 1,
                    ResourcePolicy::ForwardToSource => 2,
                };
                (f.fd, policy)
            })
            .collect(),
    }
}

fn rejected(r: Reject) -> NodeError {
    match r.reason {
        RejectReason::CapabilityMismatch => NodeError::CapabilityMismatch {
            subsystem: r.subject,
            detail: r.detail,
        },
        RejectReason::VersionMismatch => NodeError::VersionMismatch(r.detail),
        reason => NodeError::Rejected {
            reason,
            subject: r.subject,
            detail: r.detail,
        },
    }
}

/// The data endpoint as reachable from here: a wildcard host in the
/// destination's answer means "the host you reached me on".
fn reachable(data: &str, control: &Endpoint) -> Result<Endpoint, MediumError> {
    let ep: Endpoint = data.parse()?;
    match (&ep, control) {
        (Endpoint::Tcp(addr), Endpoint::Tcp(ctl)) => {
            let (host, port) = addr.rsplit_once(':').expect("parsed");
            if matches!(host, "0.0.0.0" | "[::]" | "::") {
                let ctl_host = ctl.rsplit_once(':').expect("parsed").0;
                return Ok(Endpoint::Tcp(format!("{ctl_host}:{port}")));
            }
            Ok(ep)
        }
        _ => Ok(ep),
    }
}

fn handshake(
    b: &Batch,
    link: &Link,
    offer: &Offer,
) -> Result<(Accept, u64), NodeError> {
    let timeout = b.node.config.handshake_timeout;
    link.send(msg::OFFER, b.token, offer.encode())?;
    if b.armed.cuts_at(Boundary::AfterOffer) {
        return Err(b.cut_link(link, Boundary::AfterOffer));
    }
    let deadline = Instant::now() + timeout;
    let accept = loop {
        let Some(f) = link.recv_until(deadline)? else {
            return Err(NodeError::Timeout("handshake answer"));
        };
        match f.kind {
            msg::ACCEPT => break Accept::decode(&f.payload)?,
            msg::REJECT => return Err(rejected(Reject::decode(&f.payload)?)),
            _ => continue,
        }
    };
    if b.armed.cuts_at(Boundary::AfterAccept) {
        return Err(b.cut_link(link, Boundary::AfterAccept));
    }
    for p in &offer.processes {
        let setup = FrameSetup {
            source_pid: p.pid,
            threads: p.threads,
            private_pages: p.private_pages,
        };
        link.send(msg::FRAME_SETUP, b.token, setup.encode())?;
    }
    let messages = link.handshake_frames();
    if b.armed.cuts_at(Boundary::AfterFrameSetup) {
        return Err(b.cut_link(link, Boundary::AfterFrameSetup));
    }
    Ok((accept, messages))
}

fn connect_data(
    b: &Batch,
    link: &Arc<Link>,
    data: &Endpoint,
    config: ChannelConfig,
    pid: u32,
) -> Result<DataChannel, ControlError> {
    let mut conn = data.connect()?;
    let mut preamble = Vec::with_capacity(24);
    preamble.extend_from_slice(DATA_MAGIC);
    preamble.extend_from_slice(&b.token.0);
    preamble.extend_from_slice(&pid.to_be_bytes());
    conn.writer.write_all(&preamble)?;
    let mut ch = DataChannel::new(
        &b.spec.medium,
        Role::Sender,
        Some(conn.writer),
        None,
        Some(Box::new(link.backchannel(pid))),
        config,
    )?;
    ch.bind(b.token, pid);
    Ok(ch)
}

fn retry_backpressure(
    ev: &EventContext,
    mut f: impl FnMut() -> Result<(), MediumError>,
) -> Result<(), ControlError> {
    loop {
        ev.check_continue()?;
        match f() {
            Ok(()) => return Ok(()),
            Err(MediumError::BackpressureTimeout) => continue,
            Err(e) => return Err(e.into()),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn pre_copy_rounds(
    b: &Batch,
    ev: &EventContext,
    session: &mut Session,
    process: &ProcessRef,
    ch: &mut DataChannel,
    max_rounds: u32,
    threshold: u64,
) -> Result<Vec<RoundRecord>, ControlError> {
    let mut rounds = Vec::new();
    let mut acks = 0;
    let mut call = 0u64;
    let timeout = ch.config().ack_timeout;
    for round in 1..=max_rounds {
        let mut calls = Vec::new();
        let mut live = || -> Result<(), ControlError> {
            let Some(w) = b.spec.workload else {
                return Ok(());
            };
            let seed = w.seed + call;
            call += 1;
            match process.lock().run_workload(w.steps, w.write_rate, seed, None) {
                Ok(_) | Err(GuestError::NoWritablePages) => {}
                Err(e) => return Err(e.into()),
            }
            calls.push(WorkloadCall {
                steps: w.steps,
                write_rate: w.write_rate,
                seed,
            });
            Ok(())
        };
        checkpoint_pass(
            ev,
            session,
            process,
            ch,
            PassOptions {
                mode: CheckpointMode::Round(round),
                only: Some(mem_id()),
                end_markers: false,
                between_steps: Some(&mut live),
            },
        )?;
        retry_backpressure(ev, || {
            acks = ch.wait_round_ack(acks, timeout)?;
            Ok(())
        })?;
        ev.watchdog.feed();
        let pages = session
            .mem_stats()
            .and_then(|s| s.phases.last().map(|(_, set)| set.iter().copied().collect()))
            .unwrap_or_default();
        let dirty_after = process.lock().address_space.dirty_count() as u64;
        rounds.push(RoundRecord {
            round,
            pages,
            workload: calls,
            dirty_after,
        });
        if dirty_after <= threshold {
            break;
        }
    }
    Ok(rounds)
}

fn transfer(
    b: &Batch,
    link: &Arc<Link>,
    data: &Endpoint,
    config: ChannelConfig,
    index: usize,
    slot: &mut Option<Session>,
) -> Result<Work, ControlError> {
    let ev = &b.events[index];
    let process = &b.processes[index];
    ev.check_continue()?;
    let mut ch = connect_data(b, link, data, config, ev.pid.0)?;
    ch.set_fault_plan(b.armed.plan_for(index));
    let session = slot.insert(Session::new(
        EventInfo {
            request_id: ev.request_id,
            token: Some(b.token),
            source_pid: ev.pid,
        },
        b.node.registry.read().ordered(),
        b.env.clone(),
        b.node.config.batch_limit,
    ));
    ev.hooks().setup(ev, &process.lock());
    ev.advance(EventState::Running)?;
    let mut rounds = Vec::new();
    if let Strategy::PreCopy {
        max_rounds,
        dirty_threshold,
    } = ev.strategy
    {
        rounds = pre_copy_rounds(b, ev, session, process, &mut ch, max_rounds, dirty_threshold)?;
    }

    quiesce(process, ev.quiesce, b.node.config.quiesce_deadline)?;
    ev.mark_quiesced();
    *b.quiesced[index].lock() = Some(Instant::now());
    process.lock().transition(RunState::Migrating)?;
    if index == 0 && b.armed.cuts_at(Boundary::AfterQuiesce) {
        b.cut_link(link, Boundary::AfterQuiesce);
        return Err(ControlError::Aborted("link cut".into()));
    }

    let mode = match ev.strategy {
        Strategy::StopAndCopy => CheckpointMode::Full,
        Strategy::PreCopy { .. } => CheckpointMode::Final,
        Strategy::PostCopyLazy { .. } => CheckpointMode::LazyMap,
    };
    checkpoint_pass(ev, session, process, &mut ch, PassOptions::with_mode(mode))?;
    let timeout = config.ack_timeout;
    retry_backpressure(ev, || ch.wait_consumed(timeout))?;
    let channel = ch.stats();
    ev.set_stats(channel);
    if index == 0 && b.armed.cuts_at(Boundary::AfterTransfer) {
        b.cut_link(link, Boundary::AfterTransfer);
        return Err(ControlError::Aborted("link cut".into()));
    }
    ev.advance(EventState::Draining)?;
    let mem = session.mem_stats().unwrap_or_default();

    let serve = match ev.strategy {
        Strategy::PostCopyLazy { prefetch } => {
            let pages = process
                .lock()
                .address_space
                .private_pages()
                .filter(|(_, p)| p.dirty)
                .map(|(n, _)| n)
                .collect();
            serve_pages(ev, &mut ch, process, pages, prefetch, b.token, ev.pid.0)?
        }
        _ => ServeStats::default(),
    };
    ev.watchdog.disarm();
    Ok(Work {
        rounds,
        channel,
        mem,
        serve,
    })
}

struct Progress {
    work: Vec<Option<Work>>,
    errors: Vec<Option<ControlError>>,
    sessions: Vec<Option<Session>>,
    acks: Vec<Option<(Instant, u32)>>,
}

impl Progress {
    fn absorb(&mut self, f: Finished) -> Result<(), ControlError> {
        self.sessions[f.index] = f.session;
        match f.result {
            Ok(w) => {
                self.work[f.index] = Some(w);
                Ok(())
            }
            Err(e) => {
                self.errors[f.index] = Some(e.clone());
                Err(e)
            }
        }
    }
}

fn control_loop(
    b: &Batch,
    link: &Link,
    done: &crossbeam_channel::Receiver<Finished>,
    progress: &mut Progress,
    committed: &AtomicBool,
) -> Result<(), NodeError> {
    let deadline = Instant::now() + b.node.config.commit_timeout;
    let failed = |b: &Batch, e: ControlError| -> NodeError {
        match b.injected() {
            Some(at) => NodeError::Injected(at),
            None => e.into(),
        }
    };
    loop {
        while let Ok(f) = done.try_recv() {
            progress.absorb(f).map_err(|e| failed(b, e))?;
        }
        let acked = progress.acks.iter().all(Option::is_some);
        if acked {
            committed.store(true, Ordering::SeqCst);
            if progress.work.iter().all(Option::is_some) {
                return Ok(());
            }
        }
        if let Some(r) = b.events.iter().find_map(|e| e.abort_reason()) {
            return Err(ControlError::Aborted(r).into());
        }
        if Instant::now() > deadline {
            return Err(NodeError::Timeout("resume acknowledgements"));
        }
        let frame = match link.recv(POLL) {
            Ok(Some(f)) => f,
            Ok(None) => continue,
            Err(e) => {
                // A worker may hold the real cause.
                if let Ok(f) = done.recv_timeout(Duration::from_millis(100)) {
                    progress.absorb(f).map_err(|e| failed(b, e))?;
                }
                return Err(failed(b, e.into()));
            }
        };
        match frame.kind {
            msg::RESUME_ACK => {
                let ack = ResumeAck::decode(&frame.payload)?;
                if let Some(i) = b.events.iter().position(|e| e.pid.0 == ack.source_pid) {
                    progress.acks[i].get_or_insert((Instant::now(), ack.dest_pid));
                }
            }
            msg::COMMAND => {
                let m = CommandMessage::decode(&frame.payload)?;
                if m.opcode == Opcode::Abort {
                    let (kind, detail) = FailureKind::parse(&String::from_utf8_lossy(m.body()));
                    return Err(NodeError::Remote { kind, detail });
                }
            }
            _ => {}
        }
    }
}

fn back_to_running(process: &ProcessRef) {
    let mut p = process.lock();
    if matches!(p.run_state, RunState::Quiesced | RunState::Migrating) {
        let _ = p.transition(RunState::Running);
    }
}

fn rollback(b: &Batch, progress: &mut Progress, err: &NodeError) {
    for (i, ev) in b.events.iter().enumerate() {
        let process = &b.processes[i];
        if let Some(s) = progress.sessions[i].as_mut() {
            s.finish(&mut process.lock(), SessionOutcome::Retained);
        }
        back_to_running(process);
        b.node.residuals.release_pid(b.token, ev.pid.0);
        if !ev.state().is_terminal() {
            let cause = progress.errors[i]
                .clone()
                .filter(|e| !matches!(e, ControlError::Aborted(_)))
                .unwrap_or_else(|| match err {
                    NodeError::Control(e) => e.clone(),
                    e => ControlError::Aborted(e.to_string()),
                });
            match &progress.sessions[i] {
                Some(s) => s.record_failure(ev, &cause),
                None if cause == ControlError::Frozen => {
                    ev.freeze();
                }
                None => {
                    ev.fail(&cause.to_string());
                }
            }
        }
        ev.run_cleanup(Some(&process.lock()));
    }
}

fn commit(b: &Batch, link: &Arc<Link>, progress: &mut Progress) -> Result<(), NodeError> {
    if b.armed.cuts_at(Boundary::AfterResumeAck) {
        return Err(b.cut_link(link, Boundary::AfterResumeAck));
    }
    link.send(msg::REMOVED_CONFIRM, b.token, Vec::new())?;
    for (i, ev) in b.events.iter().enumerate() {
        let process = &b.processes[i];
        {
            let mut p = process.lock();
            if let Some(s) = progress.sessions[i].as_mut() {
                s.finish(&mut p, SessionOutcome::Consumed);
            }
            p.transition(RunState::Removed)?;
        }
        b.node.host.lock().remove(ev.pid);
        ev.mark_resumed();
        ev.advance(EventState::Done)?;
        ev.run_cleanup(Some(&process.lock()));
    }
    Ok(())
}

/// Runs one migration batch from this node to the daemon at
/// `spec.endpoint`. The events are `Prepared`, one per pid, in pid order of
/// the request.
pub(crate) fn migrate(
    node: &Arc<Node>,
    id: RequestId,
    token: MigrationToken,
    spec: &RequestSpec,
    events: &[Arc<EventContext>],
    committed: &AtomicBool,
) -> Result<MigrationReport, NodeError> {
    let started = events
        .iter()
        .map(|e| e.created())
        .min()
        .unwrap_or_else(Instant::now);
    let processes: Vec<ProcessRef> = {
        let host = node.host.lock();
        events
            .iter()
            .filter_map(|e| host.get(e.pid).ok())
            .collect()
    };
    let n = events.len();
    let b = Batch {
        node,
        token,
        spec,
        events,
        processes: &processes,
        env: node.step_env(spec.dedup),
        armed: ArmedFault(node.faults.take()),
        cut: Mutex::new(None),
        quiesced: (0..n).map(|_| Mutex::new(None)).collect(),
    };
    let mut progress = Progress {
        work: (0..n).map(|_| None).collect(),
        errors: vec![None; n],
        sessions: (0..n).map(|_| None).collect(),
        acks: vec![None; n],
    };
    let _lease = node.registry.read().lease();
    let mut link: Option<Arc<Link>> = None;
    let mut run = || -> Result<(Accept, u64), NodeError> {
        if processes.len() != n {
            return Err(ControlError::UnknownPid(events[0].pid).into());
        }
        let control: Endpoint = spec.endpoint.parse()?;
        let l = link.insert(Link::start(control.connect()?, Some(node.residuals.clone())));
        let offer = Offer {
            version: msg::PROTOCOL_VERSION,
            page_size: node.config.page_size as u32,
            strategy: spec.strategy,
            quiesce: spec.quiesce,
            exec_ctx: spec.exec_ctx,
            dedup: spec.dedup,
            medium: spec.medium.clone(),
            processes: processes.iter().map(summary).collect(),
            capabilities: node.registry.read().capabilities(),
        };
        let (accept, messages) = handshake(&b, l, &offer)?;
        let data = reachable(&accept.data_endpoint, &control)?;
        let config = ChannelConfig {
            buffer_size: node.config.channel.buffer_size.min(accept.buffer_size.max(1) as usize),
            window: node.config.channel.window.min(accept.window.max(1)),
            ..node.config.channel
        };
        let (job_tx, job_rx) = unbounded::<usize>();
        for i in 0..n {
            job_tx.send(i).expect("open");
        }
        drop(job_tx);
        let (done_tx, done_rx) = unbounded::<Finished>();
        let workers = node.config.workers.clamp(1, n.max(1));
        let l: &Arc<Link> = l;
        thread::scope(|sc| {
            for _ in 0..workers {
                let (jobs, done_tx, b, data) = (job_rx.clone(), done_tx.clone(), &b, &data);
                sc.spawn(move || {
                    while let Ok(index) = jobs.recv() {
                        let mut session = None;
                        let result = transfer(b, l, data, config, index, &mut session);
                        let _ = done_tx.send(Finished {
                            index,
                            session,
                            result,
                        });
                    }
                });
            }
            drop(done_tx);
            let r = control_loop(&b, l, &done_rx, &mut progress, committed);
            if let Err(e) = &r {
                for ev in events {
                    ev.request_abort(&e.to_string());
                }
                if b.injected().is_none() && !matches!(e, NodeError::Remote { .. }) {
                    let reason = match e {
                        NodeError::Control(c) => msg::abort_reason(c),
                        e => format!("failed: {e}"),
                    };
                    let _ = l.send_command(&CommandMessage::abort(token, crate::medium::BATCH_PID, &reason));
                }
                l.close();
            }
            for f in done_rx.iter() {
                let _ = progress.absorb(f);
            }
            r
        })?;
        commit(&b, l, &mut progress)?;
        Ok((accept, messages))
    };
    let result = run();
    let (accept, negotiation_msgs) = match result {
        Ok(v) => v,
        Err(e) => {
            if let Some(l) = &link {
                l.close();
            }
            rollback(&b, &mut progress, &e);
            return Err(e);
        }
    };
    let link = link.expect("connected");
    if node.residuals.holds(token) {
        node.keep_source_link(token, link);
    } else {
        link.close();
    }

    let processes = (0..n)
        .map(|i| {
            let ev = &events[i];
            let w = progress.work[i].take().expect("finished");
            let (acked, dest_pid) = progress.acks[i].expect("acknowledged");
            let quiesced = b.quiesced[i].lock().unwrap_or(acked);
            let final_pages = w
                .mem
                .phases
                .iter()
                .rev()
                .find(|(m, _)| matches!(m, CheckpointMode::Full | CheckpointMode::Final))
                .map(|(_, s)| s.iter().copied().collect())
                .unwrap_or_default();
            PidReport {
                source_pid: ev.pid.0,
                dest_pid,
                freeze_time: acked.saturating_duration_since(quiesced),
                latency: acked.saturating_duration_since(ev.created()),
                bytes_pre_resume: w.channel.bytes_pushed,
                bytes_post_resume: w.serve.bytes,
                pages_pre_resume: w.mem.pages_sent,
                pages_post_resume: w.serve.pages,
                pull_requests: w.serve.pull_requests,
                region_pages: w.mem.region_pages_sent,
                pages_scanned: w.mem.pages_scanned,
                final_pages,
                rounds: w.rounds,
                channel: w.channel,
                mem: w.mem,
            }
        })
        .collect();
    Ok(MigrationReport {
        token: token.hex(),
        request_id: id.0,
        dest_request_id: accept.request_id,
        strategy: spec.strategy,
        negotiation_msgs,
        processes,
        elapsed: started.elapsed(),
    })
}
