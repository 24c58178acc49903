//! Daemon side: accepts control connections and data connections and
//! rebuilds the processes of each offered batch.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError};

use crate::control::{
    restart_worker, ControlError, EventContext, EventKind, EventState, RequestSpec, Session,
};
use crate::guest::{GuestError, GuestProcess, PageFaultHandler, Pid, ProcessRef, ResourcePolicy};
use crate::ids::MigrationToken;
use crate::medium::{
    ChannelConfig, CommandMessage, Connection, CtlFrame, DataChannel, Endpoint,
    MediumError, Opcode, Role, BATCH_PID,
};
use crate::node::{Node, NodeError, ResidualRoute};
use crate::subsystem::EventInfo;

use super::lazy::PullHandler;
use super::link::Link;
use super::msg::{self, Accept, FrameSetup, Offer, Reject, RejectReason, ResumeAck};
use super::DATA_MAGIC;

const POLL: Duration = Duration::from_millis(5);

/// A running daemon. Dropping it stops accepting new connections.
pub struct DaemonHandle {
    control: Endpoint,
    data: Endpoint,
    stop: Arc<AtomicBool>,
    threads: Vec<thread::JoinHandle<()>>,
}

impl std::fmt::Debug for DaemonHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DaemonHandle")
            .field("control", &self.control)
            .field("data", &self.data)
            .finish()
    }
}

impl DaemonHandle {
    /// The control endpoint, with the actual port when 0 was asked for.
    pub fn endpoint(&self) -> String {
        self.control.to_string()
    }

    pub fn data_endpoint(&self) -> String {
        self.data.to_string()
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the daemon is shut down from elsewhere.
    pub fn join(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for DaemonHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn data_endpoint_for(control: &Endpoint) -> Result<Endpoint, MediumError> {
    match control {
        Endpoint::Loopback(name) => Ok(Endpoint::Loopback(format!("{name}.data"))),
        Endpoint::Tcp(addr) => {
            let (host, port) = addr.rsplit_once(':').expect("parsed");
            let port: u16 = port.parse().expect("parsed");
            let data = if port == 0 { 0 } else { port.checked_add(1).ok_or(MediumError::Usage("no port above the control port"))? };
            Ok(Endpoint::Tcp(format!("{host}:{data}")))
        }
    }
}

pub(crate) fn start_daemon(node: Arc<Node>, endpoint: &str) -> Result<DaemonHandle, NodeError> {
    let ep: Endpoint = endpoint.parse()?;
    let mut control = ep.listen()?;
    let mut data = data_endpoint_for(&control.endpoint())?.listen()?;
    let (control_ep, data_ep) = (control.endpoint(), data.endpoint());
    let stop = Arc::new(AtomicBool::new(false));
    let tick = Some(Duration::from_millis(20));

    let (n, s, advertised) = (node.clone(), stop.clone(), data_ep.to_string());
    let ctl = thread::Builder::new()
        .name("procmig-daemon".into())
        .spawn(move || {
            while !s.load(Ordering::SeqCst) {
                match control.accept(tick) {
                    Ok(conn) => {
                        let (n, advertised) = (n.clone(), advertised.clone());
                        thread::spawn(move || serve_connection(n, conn, &advertised));
                    }
                    Err(MediumError::Timeout) => {}
                    Err(e) => {
                        log::warn!("control listener stops: {e}");
                        return;
                    }
                }
            }
        })
        .expect("spawn daemon");

    let (n, s) = (node, stop.clone());
    let dat = thread::Builder::new()
        .name("procmig-data".into())
        .spawn(move || {
            while !s.load(Ordering::SeqCst) {
                match data.accept(tick) {
                    Ok(conn) => {
                        let n = n.clone();
                        thread::spawn(move || route_data(&n, conn));
                    }
                    Err(MediumError::Timeout) => {}
                    Err(e) => {
                        log::warn!("data listener stops: {e}");
                        return;
                    }
                }
            }
        })
        .expect("spawn data acceptor");

    Ok(DaemonHandle {
        control: control_ep,
        data: data_ep,
        stop,
        threads: vec![ctl, dat],
    })
}

/// Reads the preamble of a data connection and hands it to the worker
/// waiting for that (token, pid).
fn route_data(node: &Node, mut conn: Connection) {
    let mut preamble = [0u8; 24];
    let mut got = 0;
    let deadline = Instant::now() + node.config.handshake_timeout;
    while got < preamble.len() {
        let left = deadline.saturating_duration_since(Instant::now());
        match conn.reader.read_some(&mut preamble[got..], Some(left)) {
            Ok(0) | Err(_) => return,
            Ok(n) => got += n,
        }
    }
    if &preamble[..4] != DATA_MAGIC {
        log::warn!("data connection from {} without preamble", conn.peer);
        return;
    }
    let token = MigrationToken(preamble[4..20].try_into().expect("16 bytes"));
    let pid = u32::from_be_bytes(preamble[20..24].try_into().expect("4 bytes"));
    match node.pending_data.lock().remove(&(token, pid)) {
        Some(tx) => {
            let _ = tx.send(conn);
        }
        None => log::warn!("data connection for unknown token {token} pid {pid}"),
    }
}

fn serve_connection(node: Arc<Node>, conn: Connection, data_endpoint: &str) {
    let link = Link::start(conn, None);
    loop {
        let frame = match link.recv(Duration::from_millis(100)) {
            Ok(Some(f)) => f,
            Ok(None) => continue,
            Err(_) => return,
        };
        match frame.kind {
            msg::STATUS_QUERY => {
                let body = serde_json::to_vec(&node.status()).unwrap_or_default();
                let _ = link.send(msg::STATUS_REPLY, frame.token, body);
            }
            msg::OFFER => {
                if let Err(e) = serve_batch(&node, &link, &frame, data_endpoint) {
                    log::info!("batch {} ended: {e}", frame.token);
                }
                return;
            }
            other => log::debug!("ignoring control frame {other:#04x} outside a batch"),
        }
    }
}

fn check_offer(node: &Node, offer: &Offer, token: MigrationToken) -> Result<(), Reject> {
    let reject = |reason, subject: &str, detail: String| Reject {
        reason,
        subject: subject.into(),
        detail,
    };
    if offer.version != msg::PROTOCOL_VERSION {
        return Err(reject(
            RejectReason::VersionMismatch,
            "version",
            format!(
                "protocol version {} offered, {} spoken here",
                offer.version,
                msg::PROTOCOL_VERSION
            ),
        ));
    }
    if offer.page_size as usize != node.config.page_size {
        return Err(reject(
            RejectReason::PageSizeMismatch,
            "page_size",
            format!(
                "page size {} at the source, {} at the destination",
                offer.page_size, node.config.page_size
            ),
        ));
    }
    let ours = node.registry.read().capabilities();
    if let Some((subject, detail)) = msg::capability_mismatch(&ours, &offer.capabilities) {
        return Err(reject(RejectReason::CapabilityMismatch, &subject, detail));
    }
    if node.media.read().get(&offer.medium).is_err() {
        return Err(reject(
            RejectReason::Policy,
            &offer.medium,
            format!("medium {} is not enabled here", offer.medium),
        ));
    }
    if offer.processes.is_empty() {
        return Err(reject(RejectReason::Policy, "processes", "empty batch".into()));
    }
    if !node.seen_tokens.lock().insert(token) {
        return Err(reject(
            RejectReason::DuplicateToken,
            &token.hex(),
            "this token was already restarted here".into(),
        ));
    }
    Ok(())
}

struct Slot {
    source_pid: u32,
    ev: Arc<EventContext>,
    frame: ProcessRef,
    data: Receiver<Connection>,
}

enum End {
    Commit,
    Destroy(String),
}

/// Fault handler for processes restored whole: any fault is a bug.
struct Resident;

impl PageFaultHandler for Resident {
    fn resolve(&mut self, page: u64) -> Result<Vec<u8>, GuestError> {
        Err(GuestError::PageFault(page))
    }
}

fn serve_batch(
    node: &Arc<Node>,
    link: &Arc<Link>,
    offer_frame: &CtlFrame,
    data_endpoint: &str,
) -> Result<(), NodeError> {
    let token = offer_frame.token;
    let offer = match Offer::decode(&offer_frame.payload) {
        Ok(o) => o,
        Err(e) => {
            let r = Reject {
                reason: RejectReason::Policy,
                subject: "offer".into(),
                detail: e.to_string(),
            };
            link.send(msg::REJECT, token, r.encode())?;
            return Err(e.into());
        }
    };
    if let Err(r) = check_offer(node, &offer, token) {
        link.send(msg::REJECT, token, r.encode())?;
        return Ok(());
    }
    let request_id = node.next_request_id();
    let mut routes = Vec::new();
    {
        let mut pending = node.pending_data.lock();
        for p in &offer.processes {
            let (tx, rx) = bounded(1);
            pending.insert((token, p.pid), tx);
            routes.push((p.pid, rx));
        }
    }
    let accept = Accept {
        request_id: request_id.0,
        buffer_size: node.config.channel.buffer_size as u32,
        window: node.config.channel.window,
        data_endpoint: data_endpoint.to_string(),
        channels: offer
            .processes
            .iter()
            .enumerate()
            .map(|(i, p)| (p.pid, i as u32))
            .collect(),
    };
    let spec = RequestSpec {
        kind: EventKind::Restart,
        pids: Vec::new(),
        strategy: offer.strategy,
        exec_ctx: offer.exec_ctx,
        quiesce: offer.quiesce,
        medium: offer.medium.clone(),
        endpoint: link.peer.clone(),
        dedup: offer.dedup,
        workload: None,
    };
    let regions_before: HashSet<_> = node.host.lock().regions().ids().into_iter().collect();
    let mut slots: Vec<Slot> = Vec::new();

    let mut setup = || -> Result<(), End> {
        link.send(msg::ACCEPT, token, accept.encode())
            .map_err(|e| End::Destroy(e.to_string()))?;
        let deadline = Instant::now() + node.config.handshake_timeout;
        while slots.len() < offer.processes.len() {
            let f = match link.recv_until(deadline) {
                Ok(Some(f)) => f,
                Ok(None) => return Err(End::Destroy("frame setup timed out".into())),
                Err(e) => return Err(End::Destroy(e.to_string())),
            };
            match f.kind {
                msg::FRAME_SETUP => {
                    let s = FrameSetup::decode(&f.payload).map_err(|e| End::Destroy(e.to_string()))?;
                    let Some(i) = routes.iter().position(|(p, _)| *p == s.source_pid) else {
                        return Err(End::Destroy(format!("frame setup for unoffered pid {}", s.source_pid)));
                    };
                    let (source_pid, data) = routes.swap_remove(i);
                    let (pid, frame) = node.host.lock().create_frame(node.config.page_size);
                    let ev = node.new_event(request_id, pid, Pid(source_pid), Some(token), &spec);
                    slots.push(Slot {
                        source_pid,
                        ev,
                        frame,
                        data,
                    });
                }
                msg::COMMAND => return Err(End::Destroy("aborted by source".into())),
                _ => {}
            }
        }
        Ok(())
    };
    if let Err(End::Destroy(why)) = setup() {
        destroy(node, token, &offer, &slots, &regions_before, &why);
        return Err(ControlError::Aborted(why).into());
    }

    let env = node.step_env(offer.dedup);
    let _lease = node.registry.read().lease();
    let config = ChannelConfig {
        ..node.config.channel
    };
    let (done_tx, done_rx) = unbounded::<(usize, Result<(), ControlError>)>();
    let end = thread::scope(|sc| {
        for (i, slot) in slots.iter().enumerate() {
            let (done_tx, env) = (done_tx.clone(), env.clone());
            let medium = offer.medium.as_str();
            sc.spawn(move || {
                let r = restore(node, link, token, request_id, slot, env, medium, config);
                let _ = done_tx.send((i, r));
            });
        }
        drop(done_tx);
        let end = control_loop(node, link, token, &slots, &done_rx);
        if let End::Destroy(why) = &end {
            for s in &slots {
                s.ev.request_abort(why);
            }
        }
        end
    });
    match end {
        End::Commit => {
            commit(node, link, token, &slots);
            Ok(())
        }
        End::Destroy(why) => {
            destroy(node, token, &offer, &slots, &regions_before, &why);
            Err(ControlError::Aborted(why).into())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn restore(
    node: &Node,
    link: &Arc<Link>,
    token: MigrationToken,
    request_id: crate::ids::RequestId,
    slot: &Slot,
    env: crate::subsystem::StepEnv,
    medium: &str,
    config: ChannelConfig,
) -> Result<(), ControlError> {
    let ev = &slot.ev;
    let deadline = Instant::now() + node.config.commit_timeout;
    let conn = loop {
        ev.check_continue()?;
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            ev.fail("no data connection from the source");
            return Err(MediumError::Timeout.into());
        }
        match slot.data.recv_timeout(left.min(Duration::from_millis(50))) {
            Ok(c) => break c,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => return Err(MediumError::ChannelClosed.into()),
        }
    };
    let mut ch = DataChannel::new(
        medium,
        Role::Receiver,
        None,
        Some(conn.reader),
        Some(Box::new(link.backchannel(slot.source_pid))),
        config,
    )?;
    ch.bind(token, slot.source_pid);
    let mut session = Session::new(
        EventInfo {
            request_id,
            token: Some(token),
            source_pid: Pid(slot.source_pid),
        },
        node.registry.read().ordered(),
        env,
        node.config.batch_limit,
    );
    restart_worker(ev, &mut session, &slot.frame, &mut ch)?;
    let mut after = || -> Result<(), ControlError> {
        let ack = ResumeAck {
            source_pid: slot.source_pid,
            dest_pid: ev.pid.0,
        };
        link.send(msg::RESUME_ACK, token, ack.encode())?;
        let driver = node.driver.read().clone();
        if session.restored_lazily() {
            let mut port = ch
                .take_port()
                .ok_or(MediumError::Unsupported("lazy restore without a backchannel"))?;
            let mut pulls = PullHandler::new(
                &mut port,
                ev,
                token,
                slot.source_pid,
                config.pop_deadline,
            );
            let mut p = slot.frame.lock();
            if let Some(d) = &driver {
                d.run(ev.pid, &mut p, &mut pulls)?;
            }
            pulls.drain(&mut p)?;
            pulls.report_drained()?;
        } else if let Some(d) = &driver {
            let mut p = slot.frame.lock();
            d.run(ev.pid, &mut p, &mut Resident)?;
        }
        ev.watchdog.disarm();
        Ok(())
    };
    let r = after();
    if let Err(e) = &r {
        session.record_failure(ev, e);
    }
    r
}

fn control_loop(
    node: &Node,
    link: &Link,
    token: MigrationToken,
    slots: &[Slot],
    done: &Receiver<(usize, Result<(), ControlError>)>,
) -> End {
    let deadline = Instant::now() + node.config.commit_timeout;
    let mut finished = vec![false; slots.len()];
    loop {
        while let Ok((i, r)) = done.try_recv() {
            match r {
                Ok(()) => finished[i] = true,
                Err(e) => {
                    let reason = msg::abort_reason(&e);
                    let _ = link.send_command(&CommandMessage::abort(token, BATCH_PID, &reason));
                    return End::Destroy(reason);
                }
            }
        }
        if Instant::now() > deadline {
            return End::Destroy("no removal confirmation from the source".into());
        }
        let frame = match link.recv(POLL) {
            Ok(Some(f)) => f,
            Ok(None) => continue,
            Err(_) => return End::Destroy("control link lost".into()),
        };
        match frame.kind {
            msg::REMOVED_CONFIRM if finished.iter().all(|f| *f) => return End::Commit,
            msg::REMOVED_CONFIRM => {
                return End::Destroy("removal confirmed before every process resumed".into())
            }
            msg::COMMAND => {
                if let Ok(m) = CommandMessage::decode(&frame.payload) {
                    if m.opcode == Opcode::Abort {
                        return End::Destroy(String::from_utf8_lossy(m.body()).into_owned());
                    }
                }
            }
            _ => {}
        }
    }
}

fn forwards_files(p: &GuestProcess) -> bool {
    p.file_table
        .iter()
        .any(|f| f.policy == ResourcePolicy::ForwardToSource)
}

fn commit(node: &Node, link: &Arc<Link>, token: MigrationToken, slots: &[Slot]) {
    let mut keep = false;
    for s in slots {
        let _ = s.ev.advance(EventState::Done);
        let p = s.frame.lock();
        if forwards_files(&p) {
            keep = true;
            node.residual_routes.lock().insert(
                s.ev.pid,
                ResidualRoute {
                    link: link.clone(),
                    token,
                    source_pid: s.source_pid,
                },
            );
        }
        s.ev.run_cleanup(Some(&p));
    }
    if !keep {
        link.close();
    }
}

fn destroy(
    node: &Node,
    token: MigrationToken,
    offer: &Offer,
    slots: &[Slot],
    regions_before: &HashSet<crate::guest::RegionId>,
    why: &str,
) {
    {
        let mut pending = node.pending_data.lock();
        for p in &offer.processes {
            pending.remove(&(token, p.pid));
        }
    }
    let mut host = node.host.lock();
    for s in slots {
        host.remove(s.ev.pid);
        if !s.ev.state().is_terminal() {
            s.ev.fail(why);
        }
        s.ev.run_cleanup(None);
    }
    let regions = host.regions().clone();
    for id in regions.ids() {
        if !regions_before.contains(&id) {
            regions.remove_unreferenced(id);
        }
    }
}
