//! One control connection per batch, shared by handshake frames and the
//! per-process backchannels.
//!
//! A reader thread sorts incoming frames: command frames addressed to a
//! pid go to that pid's route, residual-file requests are answered on the
//! spot from the node's residual table, and everything else (handshake,
//! commit, batch-wide aborts) is queued for the batch driver.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;

use crate::ids::MigrationToken;
use crate::medium::{
    Backchannel, ByteRead, ByteWrite, CommandMessage, Connection, CtlFrame, FrameReader,
    MediumError, Opcode, BATCH_PID, FILE_ADVANCE_OFFSET, FILE_QUERY_OFFSET, FILE_REPLY,
    FILE_STATUS_GONE,
};
use crate::subsystem::{ResidualKey, ResidualTable};

use super::msg;

type Route = (Sender<CommandMessage>, Option<Receiver<CommandMessage>>);

#[derive(Default)]
struct Routes {
    pids: HashMap<u32, Route>,
    closed: bool,
}

struct Shared {
    writer: Mutex<Box<dyn ByteWrite>>,
    routes: Mutex<Routes>,
    residual_replies: Mutex<Option<Sender<CommandMessage>>>,
    closed: AtomicBool,
    stop: AtomicBool,
    frames_sent: AtomicU64,
    frames_received: AtomicU64,
    handshake_frames: AtomicU64,
}

/// A control connection with its reader thread.
pub struct Link {
    shared: Arc<Shared>,
    ctl: Receiver<CtlFrame>,
    residual_rx: Receiver<CommandMessage>,
    residual_lock: Mutex<()>,
    pub peer: String,
    reader: Mutex<Option<thread::JoinHandle<()>>>,
}

impl std::fmt::Debug for Link {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Link").field("peer", &self.peer).finish()
    }
}

fn is_handshake(kind: u8) -> bool {
    matches!(kind, msg::OFFER | msg::ACCEPT | msg::REJECT | msg::FRAME_SETUP)
}

fn serve_residual(table: &ResidualTable, m: &CommandMessage) -> CommandMessage {
    let (fd, op, arg) = (
        m.body_u32(0).unwrap_or(0),
        m.body_u8(4).unwrap_or(0xff),
        m.body_u64(5).unwrap_or(0),
    );
    let key = ResidualKey {
        token: m.token,
        pid: m.pid(),
        fd,
    };
    let r = match op {
        FILE_QUERY_OFFSET => table.query(key),
        FILE_ADVANCE_OFFSET => table.advance(key, arg),
        _ => Err(crate::subsystem::file::ResidualError::SourceGone),
    };
    match r {
        Ok(offset) => CommandMessage::residual_file(m.token, m.pid(), fd, FILE_REPLY | op, offset),
        Err(_) => CommandMessage::residual_file(m.token, m.pid(), fd, FILE_STATUS_GONE, 0),
    }
}

impl Link {
    /// Starts the reader thread. With `residuals`, residual-file requests
    /// from the peer are answered from that table.
    pub fn start(conn: Connection, residuals: Option<Arc<ResidualTable>>) -> Arc<Link> {
        let Connection {
            reader,
            writer,
            peer,
        } = conn;
        let (ctl_tx, ctl_rx) = unbounded();
        let (res_tx, res_rx) = unbounded();
        let shared = Arc::new(Shared {
            writer: Mutex::new(writer),
            routes: Mutex::new(Routes::default()),
            residual_replies: Mutex::new(Some(res_tx)),
            closed: AtomicBool::new(false),
            stop: AtomicBool::new(false),
            frames_sent: AtomicU64::new(0),
            frames_received: AtomicU64::new(0),
            handshake_frames: AtomicU64::new(0),
        });
        let s = shared.clone();
        let handle = thread::Builder::new()
            .name("procmig-link".into())
            .spawn(move || read_loop(s, reader, ctl_tx, residuals))
            .expect("spawn link reader");
        Arc::new(Link {
            shared,
            ctl: ctl_rx,
            residual_rx: res_rx,
            residual_lock: Mutex::new(()),
            peer,
            reader: Mutex::new(Some(handle)),
        })
    }

    pub fn send(&self, kind: u8, token: MigrationToken, payload: Vec<u8>) -> Result<(), MediumError> {
        send_frame(&self.shared, &CtlFrame::new(kind, token, payload))
    }

    pub fn send_command(&self, m: &CommandMessage) -> Result<(), MediumError> {
        send_frame(
            &self.shared,
            &CtlFrame::new(msg::COMMAND, m.token, m.encode()),
        )
    }

    /// The next batch-level frame. `Err(ChannelClosed)` once the peer is gone
    /// and the queue is drained.
    pub fn recv(&self, timeout: Duration) -> Result<Option<CtlFrame>, MediumError> {
        match self.ctl.recv_timeout(timeout) {
            Ok(f) => Ok(Some(f)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(MediumError::ChannelClosed),
        }
    }

    pub fn recv_until(&self, deadline: Instant) -> Result<Option<CtlFrame>, MediumError> {
        self.recv(deadline.saturating_duration_since(Instant::now()))
    }

    /// The backchannel of one process of the batch.
    pub fn backchannel(self: &Arc<Self>, pid: u32) -> RoutedBackchannel {
        let mut routes = self.shared.routes.lock();
        let rx = if routes.closed {
            unbounded().1
        } else {
            let route = routes.pids.entry(pid).or_insert_with(|| {
                let (tx, rx) = unbounded();
                (tx, Some(rx))
            });
            route.1.take().unwrap_or_else(|| {
                // Already claimed: give the new holder a fresh queue.
                let (tx, rx) = unbounded();
                route.0 = tx;
                rx
            })
        };
        RoutedBackchannel {
            link: self.clone(),
            rx,
        }
    }

    /// Sends a residual-file operation and waits for the reply.
    pub fn residual_op(
        &self,
        token: MigrationToken,
        source_pid: u32,
        fd: u32,
        op: u8,
        arg: u64,
        timeout: Duration,
    ) -> Result<Option<u64>, MediumError> {
        let _one_at_a_time = self.residual_lock.lock();
        if self
            .send_command(&CommandMessage::residual_file(token, source_pid, fd, op, arg))
            .is_err()
        {
            return Ok(None);
        }
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.residual_rx.recv_timeout(left) {
                Ok(m) if m.body_u32(0).ok() == Some(fd) && m.pid() == source_pid => {
                    return match m.body_u8(4)? {
                        FILE_STATUS_GONE => Ok(None),
                        _ => Ok(Some(m.body_u64(5)?)),
                    };
                }
                Ok(_) => continue,
                Err(RecvTimeoutError::Timeout) => return Err(MediumError::Timeout),
                Err(RecvTimeoutError::Disconnected) => return Ok(None),
            }
        }
    }

    pub fn is_closed(&self) -> bool {
        self.shared.closed.load(Ordering::SeqCst)
    }

    /// Handshake frames (offer, accept, reject, frame setup) sent plus received.
    pub fn handshake_frames(&self) -> u64 {
        self.shared.handshake_frames.load(Ordering::SeqCst)
    }

    pub fn frames_sent(&self) -> u64 {
        self.shared.frames_sent.load(Ordering::SeqCst)
    }

    pub fn frames_received(&self) -> u64 {
        self.shared.frames_received.load(Ordering::SeqCst)
    }

    /// Closes our direction and stops the reader.
    pub fn close(&self) {
        self.shared.writer.lock().shutdown();
        self.shared.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.reader.lock().take() {
            if h.thread().id() != thread::current().id() {
                let _ = h.join();
            }
        }
    }
}

impl Drop for Link {
    fn drop(&mut self) {
        self.shared.writer.lock().shutdown();
        self.shared.stop.store(true, Ordering::SeqCst);
    }
}

fn send_frame(shared: &Shared, frame: &CtlFrame) -> Result<(), MediumError> {
    if shared.closed.load(Ordering::SeqCst) {
        return Err(MediumError::ChannelClosed);
    }
    let bytes = frame.encode();
    let mut w = shared.writer.lock();
    w.write_all(&bytes)?;
    w.flush()?;
    shared.frames_sent.fetch_add(1, Ordering::SeqCst);
    if is_handshake(frame.kind) {
        shared.handshake_frames.fetch_add(1, Ordering::SeqCst);
    }
    Ok(())
}

fn read_loop(
    shared: Arc<Shared>,
    mut reader: Box<dyn ByteRead>,
    ctl: Sender<CtlFrame>,
    residuals: Option<Arc<ResidualTable>>,
) {
    let mut frames = FrameReader::new();
    let end = |shared: &Shared| {
        shared.closed.store(true, Ordering::SeqCst);
        let mut routes = shared.routes.lock();
        routes.closed = true;
        routes.pids.clear();
        shared.residual_replies.lock().take();
    };
    loop {
        if shared.stop.load(Ordering::SeqCst) {
            end(&shared);
            return;
        }
        let deadline = Instant::now() + Duration::from_millis(50);
        let frame = match CtlFrame::read_from(&mut frames, reader.as_mut(), Some(deadline)) {
            Ok(Some(f)) => f,
            Ok(None) => {
                end(&shared);
                return;
            }
            Err(MediumError::Timeout) => continue,
            Err(e) => {
                log::debug!("control link reader stops: {e}");
                end(&shared);
                return;
            }
        };
        shared.frames_received.fetch_add(1, Ordering::SeqCst);
        if is_handshake(frame.kind) {
            shared.handshake_frames.fetch_add(1, Ordering::SeqCst);
        }
        if frame.kind != msg::COMMAND {
            let _ = ctl.send(frame);
            continue;
        }
        let m = match CommandMessage::decode(&frame.payload) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("dropping undecodable command: {e}");
                continue;
            }
        };
        if m.opcode == Opcode::ResidualFileOp {
            let op = m.body_u8(4).unwrap_or(0);
            if op & FILE_REPLY != 0 {
                if let Some(tx) = shared.residual_replies.lock().as_ref() {
                    let _ = tx.send(m);
                }
            } else {
                let reply = match &residuals {
                    Some(t) => serve_residual(t, &m),
                    None => CommandMessage::residual_file(
                        m.token,
                        m.pid(),
                        m.body_u32(0).unwrap_or(0),
                        FILE_STATUS_GONE,
                        0,
                    ),
                };
                let _ = send_frame(&shared, &CtlFrame::new(msg::COMMAND, reply.token, reply.encode()));
            }
            continue;
        }
        let pid = m.pid();
        if pid == BATCH_PID {
            let _ = ctl.send(frame);
            continue;
        }
        let mut routes = shared.routes.lock();
        let route = routes.pids.entry(pid).or_insert_with(|| {
            let (tx, rx) = unbounded();
            (tx, Some(rx))
        });
        let _ = route.0.send(m);
    }
}

/// The backchannel of one pid over a shared [`Link`].
pub struct RoutedBackchannel {
    link: Arc<Link>,
    rx: Receiver<CommandMessage>,
}

impl Backchannel for RoutedBackchannel {
    fn send(&self, m: &CommandMessage) -> Result<(), MediumError> {
        self.link.send_command(m)
    }

    fn recv(&self, timeout: Duration) -> Result<Option<CommandMessage>, MediumError> {
        match self.rx.recv_timeout(timeout) {
            Ok(m) => Ok(Some(m)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(MediumError::ChannelClosed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::loopback_pair;

    #[test]
    fn routes_commands_by_pid() {
        let (a, b) = loopback_pair("a", "b");
        let la = Link::start(a, None);
        let lb = Link::start(b, None);
        let t = MigrationToken([1; 16]);
        let b7 = lb.backchannel(7);
        let b8 = lb.backchannel(8);
        la.send_command(&CommandMessage::step_ack(t, 8, 3, 0)).unwrap();
        la.send_command(&CommandMessage::step_ack(t, 7, 5, 0)).unwrap();
        la.send(msg::OFFER, t, vec![1, 2]).unwrap();
        assert_eq!(b7.recv(Duration::from_secs(1)).unwrap().unwrap().body_u64(0).unwrap(), 5);
        assert_eq!(b8.recv(Duration::from_secs(1)).unwrap().unwrap().body_u64(0).unwrap(), 3);
        let f = lb.recv(Duration::from_secs(1)).unwrap().unwrap();
        assert_eq!(f.kind, msg::OFFER);
        assert_eq!(la.handshake_frames(), 1);
        assert_eq!(lb.handshake_frames(), 1);
        la.close();
        assert_eq!(
            b7.recv(Duration::from_secs(1)).unwrap_err(),
            MediumError::ChannelClosed
        );
        assert_eq!(
            lb.recv(Duration::from_secs(1)).unwrap_err(),
            MediumError::ChannelClosed
        );
    }

    #[test]
    fn residual_ops_are_served_by_the_peer() {
        let (a, b) = loopback_pair("a", "b");
        let table = Arc::new(ResidualTable::default());
        let t = MigrationToken([2; 16]);
        table.register(
            ResidualKey { token: t, pid: 4, fd: 3 },
            crate::subsystem::ResidualFile {
                path: "/log".into(),
                offset: 10,
            },
        );
        let source = Link::start(a, Some(table.clone()));
        let dest = Link::start(b, None);
        let w = Duration::from_secs(1);
        assert_eq!(dest.residual_op(t, 4, 3, FILE_ADVANCE_OFFSET, 5, w).unwrap(), Some(15));
        assert_eq!(dest.residual_op(t, 4, 3, FILE_QUERY_OFFSET, 0, w).unwrap(), Some(15));
        table.release(t);
        assert_eq!(dest.residual_op(t, 4, 3, FILE_QUERY_OFFSET, 0, w).unwrap(), None);
        source.close();
        assert_eq!(dest.residual_op(t, 4, 3, FILE_QUERY_OFFSET, 0, w).unwrap(), None);
    }
}
