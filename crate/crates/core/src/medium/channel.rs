use std::collections::VecDeque;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;
use serde::Serialize;

use crate::ids::{MigrationToken, SubsystemId};

use super::{
    parse_header, ByteRead, ByteWrite, Chunk, ChunkKind, CommandMessage, Connection, CtlFrame,
    FrameReader, MediumError, Opcode, Role, ACK_DONE, BATCH_PID, CHUNK_HEADER_LEN,
};

pub const DEFAULT_BUFFER_SIZE: usize = 64 * 1024;
pub const DEFAULT_WINDOW: u32 = 32;

/// Control-frame kind used for command messages on framed byte streams.
pub const COMMAND_FRAME_KIND: u8 = 0x07;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelConfig {
    /// Bytes buffered by the sender before a medium write.
    pub buffer_size: usize,
    /// Maximum unacknowledged chunks in flight when a backchannel exists.
    pub window: u32,
    /// How long `popdata` blocks.
    pub pop_deadline: Duration,
    /// How long `pushdata` waits for window space before giving up.
    pub ack_timeout: Duration,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            buffer_size: DEFAULT_BUFFER_SIZE,
            window: DEFAULT_WINDOW,
            pop_deadline: Duration::from_secs(5),
            ack_timeout: Duration::from_millis(200),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ChannelStats {
    pub bytes_pushed: u64,
    pub chunks_pushed: u64,
    pub bytes_popped: u64,
    pub chunks_popped: u64,
    pub medium_writes: u64,
    pub retransmits: u64,
    pub commands_sent: u64,
    pub commands_received: u64,
    pub command_bytes_sent: u64,
    pub command_bytes_received: u64,
    /// Largest number of unacknowledged chunks observed by the sender.
    pub max_in_flight: u64,
}

/// Injected sender-side failures, addressed by frame index (0-based count
/// of frames pushed on the channel).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultPlan {
    /// Corrupt one byte of this frame. With `persistent`, retransmissions
    /// are corrupted too.
    pub corrupt_frame: Option<u64>,
    pub persistent: bool,
    /// Sever the connection instead of sending this frame.
    pub cut_at_frame: Option<u64>,
}

/// Transport for command messages between the two ends of a channel.
pub trait Backchannel: Send {
    fn send(&self, msg: &CommandMessage) -> Result<(), MediumError>;
    /// Waits up to `timeout` for the next message; `Ok(None)` on timeout.
    fn recv(&self, timeout: Duration) -> Result<Option<CommandMessage>, MediumError>;
}

/// In-process backchannel backed by a pair of queues.
pub struct LocalBackchannel {
    tx: Sender<CommandMessage>,
    rx: Receiver<CommandMessage>,
}

impl LocalBackchannel {
    pub fn pair() -> (LocalBackchannel, LocalBackchannel) {
        let (atx, arx) = unbounded();
        let (btx, brx) = unbounded();
        (
            LocalBackchannel { tx: atx, rx: brx },
            LocalBackchannel { tx: btx, rx: arx },
        )
    }
}

impl Backchannel for LocalBackchannel {
    fn send(&self, msg: &CommandMessage) -> Result<(), MediumError> {
        self.tx.send(msg.clone()).map_err(|_| MediumError::ChannelClosed)
    }

    fn recv(&self, timeout: Duration) -> Result<Option<CommandMessage>, MediumError> {
        match self.rx.recv_timeout(timeout) {
            Ok(m) => Ok(Some(m)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(MediumError::ChannelClosed),
        }
    }
}

/// Backchannel over the reverse direction of a data connection. Only the
/// receiving end can originate commands; the data path stays one-way.
pub struct StreamBackchannel {
    inner: Mutex<StreamBackchannelInner>,
}

enum StreamBackchannelInner {
    Writer(Box<dyn ByteWrite>),
    Reader(Box<dyn ByteRead>, FrameReader),
}

impl StreamBackchannel {
    fn writer(w: Box<dyn ByteWrite>) -> Self {
        StreamBackchannel {
            inner: Mutex::new(StreamBackchannelInner::Writer(w)),
        }
    }

    fn reader(r: Box<dyn ByteRead>) -> Self {
        StreamBackchannel {
            inner: Mutex::new(StreamBackchannelInner::Reader(r, FrameReader::new())),
        }
    }
}

impl Backchannel for StreamBackchannel {
    fn send(&self, msg: &CommandMessage) -> Result<(), MediumError> {
        match &mut *self.inner.lock() {
            StreamBackchannelInner::Writer(w) => {
                let frame = CtlFrame::new(COMMAND_FRAME_KIND, msg.token, msg.encode());
                w.write_all(&frame.encode())?;
                w.flush()
            }
            StreamBackchannelInner::Reader(..) => Err(MediumError::Unsupported(
                "sender-originated commands on a standalone stream",
            )),
        }
    }

    fn recv(&self, timeout: Duration) -> Result<Option<CommandMessage>, MediumError> {
        match &mut *self.inner.lock() {
            StreamBackchannelInner::Reader(r, fr) => {
                match CtlFrame::read_from(fr, r.as_mut(), Some(Instant::now() + timeout)) {
                    Ok(Some(f)) if f.kind == COMMAND_FRAME_KIND => {
                        CommandMessage::decode(&f.payload).map(Some)
                    }
                    Ok(Some(f)) => Err(MediumError::Protocol(format!(
                        "unexpected control frame kind {:#04x} on backchannel",
                        f.kind
                    ))),
                    Ok(None) => Err(MediumError::ChannelClosed),
                    Err(MediumError::Timeout) => Ok(None),
                    Err(e) => Err(e),
                }
            }
            StreamBackchannelInner::Writer(_) => Ok(None),
        }
    }
}

/// A backchannel plus a queue of received messages nobody has claimed yet.
pub struct CommandPort {
    link: Box<dyn Backchannel>,
    inbox: VecDeque<CommandMessage>,
    closed: bool,
    pub sent: u64,
    pub received: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl CommandPort {
    pub fn new(link: Box<dyn Backchannel>) -> Self {
        CommandPort {
            link,
            inbox: VecDeque::new(),
            closed: false,
            sent: 0,
            received: 0,
            bytes_sent: 0,
            bytes_received: 0,
        }
    }

    pub fn send(&mut self, msg: &CommandMessage) -> Result<(), MediumError> {
        self.link.send(msg)?;
        self.sent += 1;
        self.bytes_sent += msg.encode().len() as u64;
        Ok(())
    }

    /// Next message from the link, ignoring the inbox.
    fn recv_link(&mut self, timeout: Duration) -> Result<Option<CommandMessage>, MediumError> {
        if self.closed {
            return Err(MediumError::ChannelClosed);
        }
        match self.link.recv(timeout) {
            Ok(Some(m)) => {
                self.received += 1;
                self.bytes_received += m.encode().len() as u64;
                Ok(Some(m))
            }
            Ok(None) => Ok(None),
            Err(e) => {
                self.closed = true;
                Err(e)
            }
        }
    }

    /// Next message, queued ones first.
    pub fn recv(&mut self, timeout: Duration) -> Result<Option<CommandMessage>, MediumError> {
        if let Some(m) = self.inbox.pop_front() {
            return Ok(Some(m));
        }
        self.recv_link(timeout)
    }

    /// Waits for the first message accepted by `want`, queueing the rest.
    pub fn wait_for(
        &mut self,
        timeout: Duration,
        mut want: impl FnMut(&CommandMessage) -> bool,
    ) -> Result<Option<CommandMessage>, MediumError> {
        if let Some(i) = self.inbox.iter().position(&mut want) {
            return Ok(self.inbox.remove(i));
        }
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.recv_link(left)? {
                Some(m) if want(&m) => return Ok(Some(m)),
                Some(m) => self.inbox.push_back(m),
                None => return Ok(None),
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
        }
    }

    pub fn push_back(&mut self, msg: CommandMessage) {
        self.inbox.push_back(msg);
    }

    pub fn pending(&self) -> usize {
        self.inbox.len()
    }
}

struct SendState {
    writer: Box<dyn ByteWrite>,
    out: Vec<u8>,
    next_frame: u64,
    acked: u64,
    /// Frames `acked..next_frame` kept for go-back-N retransmission.
    unacked: VecDeque<Vec<u8>>,
    done_acked: bool,
    round_acks: u64,
    drain_requested: bool,
    drained: bool,
    faults: FaultPlan,
}

struct RecvState {
    reader: Box<dyn ByteRead>,
    frames: FrameReader,
    frame_index: u64,
    consumed: u64,
    last_ack: u64,
    eop_seen: bool,
    bad: Option<(u64, SubsystemId, ChunkKind, u32)>,
    resync: Option<(SubsystemId, ChunkKind, u32)>,
}

enum Side {
    Send(SendState),
    Recv(RecvState),
}

/// One end of a simplex chunk channel.
pub struct DataChannel {
    medium_id: String,
    role: Role,
    side: Side,
    port: Option<CommandPort>,
    token: MigrationToken,
    pid: u32,
    config: ChannelConfig,
    stats: ChannelStats,
    closed: bool,
}

impl std::fmt::Debug for DataChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DataChannel")
            .field("medium_id", &self.medium_id)
            .field("role", &self.role)
            .field("stats", &self.stats)
            .finish()
    }
}

impl DataChannel {
    /// Builds a channel end from raw halves. `backchannel` may be absent for
    /// offline media, which disables flow control and resends.
    pub fn new(
        medium_id: &str,
        role: Role,
        writer: Option<Box<dyn ByteWrite>>,
        reader: Option<Box<dyn ByteRead>>,
        backchannel: Option<Box<dyn Backchannel>>,
        config: ChannelConfig,
    ) -> Result<Self, MediumError> {
        let side = match role {
            Role::Sender => Side::Send(SendState {
                writer: writer.ok_or(MediumError::Usage("sender needs a writer"))?,
                out: Vec::new(),
                next_frame: 0,
                acked: 0,
                unacked: VecDeque::new(),
                done_acked: false,
                round_acks: 0,
                drain_requested: false,
                drained: false,
                faults: FaultPlan::default(),
            }),
            Role::Receiver => Side::Recv(RecvState {
                reader: reader.ok_or(MediumError::Usage("receiver needs a reader"))?,
                frames: FrameReader::new(),
                frame_index: 0,
                consumed: 0,
                last_ack: 0,
                eop_seen: false,
                bad: None,
                resync: None,
            }),
        };
        Ok(DataChannel {
            medium_id: medium_id.to_string(),
            role,
            side,
            port: backchannel.map(CommandPort::new),
            token: MigrationToken::default(),
            pid: BATCH_PID,
            config,
            stats: ChannelStats::default(),
            closed: false,
        })
    }

    /// A channel over a duplex connection whose reverse direction carries
    /// the receiver's commands.
    pub fn over_connection(
        medium_id: &str,
        role: Role,
        conn: Connection,
        config: ChannelConfig,
    ) -> Self {
        let Connection { reader, writer, .. } = conn;
        let r = match role {
            Role::Sender => DataChannel::new(
                medium_id,
                role,
                Some(writer),
                None,
                Some(Box::new(StreamBackchannel::reader(reader))),
                config,
            ),
            Role::Receiver => DataChannel::new(
                medium_id,
                role,
                None,
                Some(reader),
                Some(Box::new(StreamBackchannel::writer(writer))),
                config,
            ),
        };
        r.expect("both halves supplied")
    }

    /// A connected in-process sender/receiver pair with a local backchannel.
    pub fn loopback_pair(config: ChannelConfig) -> (DataChannel, DataChannel) {
        let (a, b) = super::loopback_pair("sender", "receiver");
        let (ba, bb) = LocalBackchannel::pair();
        let tx = DataChannel::new(
            "loopback",
            Role::Sender,
            Some(a.writer),
            None,
            Some(Box::new(ba)),
            config,
        )
        .expect("writer supplied");
        let rx = DataChannel::new(
            "loopback",
            Role::Receiver,
            None,
            Some(b.reader),
            Some(Box::new(bb)),
            config,
        )
        .expect("reader supplied");
        (tx, rx)
    }

    /// Binds the channel to an event so commands it emits carry the token.
    pub fn bind(&mut self, token: MigrationToken, pid: u32) {
        self.token = token;
        self.pid = pid;
    }

    pub fn medium_id(&self) -> &str {
        &self.medium_id
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn config(&self) -> ChannelConfig {
        self.config
    }

    pub fn has_backchannel(&self) -> bool {
        self.port.is_some()
    }

    pub fn stats(&self) -> ChannelStats {
        let mut s = self.stats;
        if let Some(p) = &self.port {
            s.commands_sent = p.sent;
            s.commands_received = p.received;
            s.command_bytes_sent = p.bytes_sent;
            s.command_bytes_received = p.bytes_received;
        }
        s
    }

    pub fn set_fault_plan(&mut self, plan: FaultPlan) {
        if let Side::Send(s) = &mut self.side {
            s.faults = plan;
        }
    }

    fn check_open(&self) -> Result<(), MediumError> {
        if self.closed {
            Err(MediumError::ChannelClosed)
        } else {
            Ok(())
        }
    }

    // ---------------------------------------------------------------- sender

    /// Enqueues a chunk. With a backchannel, blocks while the window is full
    /// and fails with [`MediumError::BackpressureTimeout`] (without enqueueing)
    /// if the peer does not acknowledge within the ack timeout.
    pub fn pushdata(&mut self, chunk: &Chunk) -> Result<(), MediumError> {
        if self.role != Role::Sender {
            return Err(MediumError::Usage("pushdata on the receiving end"));
        }
        self.check_open()?;
        if self.port.is_some() {
            self.service(Duration::ZERO)?;
            let window = self.config.window.max(1) as usize;
            let deadline = Instant::now() + self.config.ack_timeout;
            while self.send_state().unacked.len() >= window {
                // Buffered frames must reach the peer before its ack can.
                self.write_out()?;
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    return Err(MediumError::BackpressureTimeout);
                }
                self.service(left)?;
            }
        }
        let has_port = self.port.is_some();
        let mut frame = chunk.encode();
        let s = self.send_state();
        let index = s.next_frame;
        if s.faults.cut_at_frame == Some(index) {
            let out = std::mem::take(&mut s.out);
            let _ = s.writer.write_all(&out);
            s.writer.shutdown();
            self.closed = true;
            return Err(MediumError::ChannelClosed);
        }
        if has_port {
            s.unacked.push_back(frame.clone());
        }
        if s.faults.corrupt_frame == Some(index) {
            corrupt(&mut frame);
        }
        s.out.extend_from_slice(&frame);
        s.next_frame += 1;
        let in_flight = s.next_frame - s.acked;
        let buffered = s.out.len();
        self.stats.bytes_pushed += frame.len() as u64;
        self.stats.chunks_pushed += 1;
        self.stats.max_in_flight = self.stats.max_in_flight.max(in_flight);
        if buffered >= self.config.buffer_size {
            self.write_out()?;
        }
        Ok(())
    }

    /// Makes every pushed chunk visible to the peer.
    pub fn flush(&mut self) -> Result<(), MediumError> {
        self.check_open()?;
        if self.role == Role::Sender {
            self.write_out()?;
            self.send_state().writer.flush()?;
        }
        Ok(())
    }

    fn send_state(&mut self) -> &mut SendState {
        match &mut self.side {
            Side::Send(s) => s,
            Side::Recv(_) => unreachable!("sender state on receiving end"),
        }
    }

    fn write_out(&mut self) -> Result<(), MediumError> {
        let s = self.send_state();
        if s.out.is_empty() {
            return Ok(());
        }
        let out = std::mem::take(&mut s.out);
        if let Err(e) = s.writer.write_all(&out) {
            self.closed = true;
            return Err(e);
        }
        self.stats.medium_writes += 1;
        Ok(())
    }

    /// Processes flow-control commands from the peer for up to `timeout`
    /// (returning after the first batch of messages). Other commands are
    /// queued for [`DataChannel::take_command`].
    pub fn service(&mut self, timeout: Duration) -> Result<(), MediumError> {
        let mut wait = timeout;
        loop {
            let Some(port) = self.port.as_mut() else {
                return Ok(());
            };
            let msg = match port.recv_link(wait) {
                Ok(Some(m)) => m,
                Ok(None) => return Ok(()),
                Err(MediumError::ChannelClosed)
                    if self.role == Role::Receiver || self.consumed_through_end() =>
                {
                    return Ok(())
                }
                Err(e) => return Err(e),
            };
            wait = Duration::ZERO;
            self.handle_command(msg)?;
        }
    }

    fn handle_command(&mut self, msg: CommandMessage) -> Result<(), MediumError> {
        match (self.role, msg.opcode) {
            (Role::Sender, Opcode::StepAck) => {
                let consumed = msg.body_u64(0)?;
                let flags = msg.body_u8(8).unwrap_or(0);
                let s = self.send_state();
                while s.acked < consumed && !s.unacked.is_empty() {
                    s.unacked.pop_front();
                    s.acked += 1;
                }
                s.acked = s.acked.max(consumed.min(s.next_frame));
                if flags & super::ACK_ROUND != 0 {
                    s.round_acks += 1;
                }
                if flags & super::ACK_DRAIN != 0 {
                    s.drain_requested = true;
                }
                if flags & super::ACK_DRAINED != 0 {
                    s.drained = true;
                }
                if flags & ACK_DONE != 0 {
                    s.done_acked = true;
                }
            }
            (Role::Sender, Opcode::SetBufferSize) => {
                self.config.buffer_size = msg.body_u32(0)?.max(1) as usize;
            }
            (Role::Sender, Opcode::ResendRequest) => {
                let from = msg.body_u64(0)?;
                self.retransmit(from)?;
            }
            (_, Opcode::Abort) => {
                self.closed = true;
                return Err(MediumError::Aborted(
                    String::from_utf8_lossy(msg.body()).into_owned(),
                ));
            }
            _ => {
                if let Some(p) = self.port.as_mut() {
                    p.push_back(msg);
                }
            }
        }
        Ok(())
    }

    fn retransmit(&mut self, from: u64) -> Result<(), MediumError> {
        let s = self.send_state();
        if from < s.acked || from >= s.next_frame {
            return Err(MediumError::Protocol(format!(
                "resend of frame {from} outside window {}..{}",
                s.acked, s.next_frame
            )));
        }
        let skip = (from - s.acked) as usize;
        let mut bytes = Vec::new();
        let mut count = 0;
        for (i, f) in s.unacked.iter().enumerate().skip(skip) {
            let mut f = f.clone();
            if s.faults.persistent && s.faults.corrupt_frame == Some(s.acked + i as u64) {
                corrupt(&mut f);
            }
            bytes.extend_from_slice(&f);
            count += 1;
        }
        s.out.extend_from_slice(&bytes);
        self.stats.retransmits += count;
        self.stats.bytes_pushed += bytes.len() as u64;
        self.write_out()?;
        self.send_state().writer.flush()
    }

    /// Waits until the receiver reports it consumed the end-of-process
    /// marker, serving resend requests meanwhile. Without a backchannel
    /// this is a flush.
    pub fn wait_consumed(&mut self, timeout: Duration) -> Result<(), MediumError> {
        self.flush()?;
        if self.port.is_none() {
            return Ok(());
        }
        let deadline = Instant::now() + timeout;
        while !self.send_state().done_acked {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(MediumError::BackpressureTimeout);
            }
            self.service(left.min(Duration::from_millis(50)))?;
        }
        Ok(())
    }

    /// Waits for the next round acknowledgement after `seen` previous ones.
    pub fn wait_round_ack(&mut self, seen: u64, timeout: Duration) -> Result<u64, MediumError> {
        self.flush()?;
        if self.port.is_none() {
            return Err(MediumError::Unsupported("round acknowledgements"));
        }
        let deadline = Instant::now() + timeout;
        loop {
            let acks = self.send_state().round_acks;
            if acks > seen {
                return Ok(acks);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(MediumError::BackpressureTimeout);
            }
            self.service(left.min(Duration::from_millis(50)))?;
        }
    }

    pub fn drain_requested(&self) -> bool {
        matches!(&self.side, Side::Send(s) if s.drain_requested)
    }

    pub fn drained(&self) -> bool {
        matches!(&self.side, Side::Send(s) if s.drained)
    }

    // -------------------------------------------------------------- receiver

    /// Returns the next chunk in push order, blocking up to the pop deadline.
    pub fn popdata(&mut self) -> Result<Chunk, MediumError> {
        let deadline = Instant::now() + self.config.pop_deadline;
        self.popdata_until(deadline)
    }

    pub fn popdata_until(&mut self, deadline: Instant) -> Result<Chunk, MediumError> {
        if self.role != Role::Receiver {
            return Err(MediumError::Usage("popdata on the sending end"));
        }
        self.check_open()?;
        if self.port.is_some() {
            self.service(Duration::ZERO)?;
        }
        loop {
            let raw = self.next_frame(deadline)?;
            let r = self.recv_state();
            let index = r.frame_index;
            r.frame_index += 1;
            match Chunk::decode(&raw) {
                Ok(chunk) => {
                    if let Some(target) = r.resync {
                        if (chunk.subsystem, chunk.kind, chunk.sequence) != target {
                            continue;
                        }
                        r.resync = None;
                    }
                    r.bad = None;
                    r.consumed += 1;
                    if chunk.kind == ChunkKind::EndOfProcess {
                        r.eop_seen = true;
                    }
                    self.stats.chunks_popped += 1;
                    self.stats.bytes_popped += raw.len() as u64;
                    self.ack_progress(chunk.kind == ChunkKind::EndOfProcess)?;
                    return Ok(chunk);
                }
                Err(MediumError::ChecksumMismatch {
                    subsystem,
                    sequence,
                }) => {
                    let kind = ChunkKind::from_wire(raw[22]).expect("header parsed");
                    if let Some(target) = r.resync {
                        if (subsystem, kind, sequence) != target {
                            continue;
                        }
                        // The retransmission is bad as well.
                        r.resync = None;
                    }
                    r.bad = Some((index, subsystem, kind, sequence));
                    return Err(MediumError::ChecksumMismatch {
                        subsystem,
                        sequence,
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn recv_state(&mut self) -> &mut RecvState {
        match &mut self.side {
            Side::Recv(r) => r,
            Side::Send(_) => unreachable!("receiver state on sending end"),
        }
    }

    fn next_frame(&mut self, deadline: Instant) -> Result<Vec<u8>, MediumError> {
        let r = self.recv_state();
        let RecvState { reader, frames, .. } = r;
        if !frames.fill(reader.as_mut(), CHUNK_HEADER_LEN, Some(deadline))? {
            return Err(self.end_of_stream());
        }
        let header = parse_header(frames.buffered()[..CHUNK_HEADER_LEN].try_into().unwrap())?;
        let len = header.frame_len();
        if !frames.fill(reader.as_mut(), len, Some(deadline))? {
            return Err(self.end_of_stream());
        }
        Ok(frames.consume(len))
    }

    fn end_of_stream(&mut self) -> MediumError {
        let r = self.recv_state();
        if r.eop_seen && r.frames.buffered().is_empty() {
            MediumError::ChannelClosed
        } else {
            MediumError::TruncatedStream
        }
    }

    fn ack_progress(&mut self, done: bool) -> Result<(), MediumError> {
        if self.port.is_none() {
            return Ok(());
        }
        let half = (self.config.window / 2).max(1) as u64;
        let r = self.recv_state();
        let consumed = r.consumed;
        if !done && consumed - r.last_ack < half {
            return Ok(());
        }
        r.last_ack = consumed;
        let msg = CommandMessage::step_ack(
            self.token,
            self.pid,
            consumed,
            if done { ACK_DONE } else { 0 },
        );
        self.port.as_mut().expect("checked").send(&msg)
    }

    /// Acknowledges everything consumed so far with extra flags.
    pub fn send_ack(&mut self, flags: u8) -> Result<(), MediumError> {
        let consumed = self.recv_state().consumed;
        self.recv_state().last_ack = consumed;
        let msg = CommandMessage::step_ack(self.token, self.pid, consumed, flags);
        self.command_port()?.send(&msg)
    }

    /// Asks the sender to retransmit from the last corrupt frame. The next
    /// `popdata` skips frames already in flight until the retransmission
    /// arrives.
    pub fn request_resend(&mut self) -> Result<(), MediumError> {
        if self.port.is_none() {
            return Err(MediumError::Unsupported("resend without a backchannel"));
        }
        let (token, pid) = (self.token, self.pid);
        let r = self.recv_state();
        let (index, subsystem, kind, sequence) = r
            .bad
            .take()
            .ok_or(MediumError::Usage("no corrupt frame to resend"))?;
        r.resync = Some((subsystem, kind, sequence));
        let msg = CommandMessage::resend(token, subsystem, pid, index, sequence);
        self.command_port()?.send(&msg)
    }

    // ---------------------------------------------------------- both sides

    fn command_port(&mut self) -> Result<&mut CommandPort, MediumError> {
        self.port
            .as_mut()
            .ok_or(MediumError::Unsupported("no backchannel on this medium"))
    }

    /// Sends a command to the peer. A page pull waits for the matching
    /// reply, up to the pop deadline.
    pub fn command(&mut self, msg: &CommandMessage) -> Result<Option<CommandMessage>, MediumError> {
        self.check_open()?;
        let deadline = self.config.pop_deadline;
        let role = self.role;
        let port = self.command_port()?;
        port.send(msg)?;
        match msg.opcode {
            Opcode::SetBufferSize if role == Role::Sender => {
                self.config.buffer_size = msg.body_u32(0)?.max(1) as usize;
                Ok(None)
            }
            Opcode::PagePullRequest => {
                let page = msg.body_u64(0)?;
                let pid = msg.pid();
                let reply = port.wait_for(deadline, |m| {
                    m.opcode == Opcode::PagePullReply
                        && m.pid() == pid
                        && m.body_u64(0).ok() == Some(page)
                })?;
                reply.map(Some).ok_or(MediumError::Timeout)
            }
            _ => Ok(None),
        }
    }

    /// Takes the next queued or newly received non-flow-control command.
    pub fn take_command(&mut self, timeout: Duration) -> Result<Option<CommandMessage>, MediumError> {
        if self.role == Role::Sender {
            self.service(Duration::ZERO)?;
        }
        let Some(port) = self.port.as_mut() else {
            return Ok(None);
        };
        if port.pending() > 0 {
            return port.recv(Duration::ZERO);
        }
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let msg = match self.port.as_mut().expect("checked").recv_link(left)? {
                Some(m) => m,
                None => return Ok(None),
            };
            self.handle_command(msg)?;
            let port = self.port.as_mut().expect("checked");
            if port.pending() > 0 {
                return port.recv(Duration::ZERO);
            }
            if Instant::now() >= deadline {
                return Ok(None);
            }
        }
    }

    /// Detaches the backchannel, e.g. to keep serving commands after the
    /// data path is finished.
    pub fn take_port(&mut self) -> Option<CommandPort> {
        self.port.take()
    }

    /// Closes the channel. The sender's pending bytes are written first.
    pub fn close(&mut self) -> Result<(), MediumError> {
        if self.closed {
            return Err(MediumError::ChannelClosed);
        }
        if self.role == Role::Sender {
            let r = self.flush();
            self.send_state().writer.shutdown();
            self.closed = true;
            r
        } else {
            self.closed = true;
            Ok(())
        }
    }

    /// Abandons the channel without flushing, as a crashed sender would.
    pub fn abandon(mut self) {
        if let Side::Send(s) = &mut self.side {
            s.out.clear();
            s.writer.shutdown();
        }
    }

    /// Whether the sender has seen its frames consumed through end of process.
    pub fn consumed_through_end(&self) -> bool {
        matches!(&self.side, Side::Send(s) if s.done_acked)
    }
}

fn corrupt(frame: &mut [u8]) {
    // Flip a payload byte when there is one, else the checksum; the header
    // stays intact so the receiver can name the chunk.
    let i = if frame.len() > CHUNK_HEADER_LEN + 4 {
        CHUNK_HEADER_LEN
    } else {
        frame.len() - 1
    };
    frame[i] ^= 0x5a;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::Chunk;
    use std::thread;

    fn mem() -> SubsystemId {
        SubsystemId::new("mem").unwrap()
    }

    fn entity(seq: u32, len: usize) -> Chunk {
        Chunk::new(mem(), ChunkKind::Entity, seq, vec![seq as u8; len])
    }

    #[test]
    fn push_flush_pop_identity() {
        let (mut tx, mut rx) = DataChannel::loopback_pair(ChannelConfig::default());
        let c = entity(0, 100);
        tx.pushdata(&c).unwrap();
        tx.flush().unwrap();
        assert_eq!(rx.popdata().unwrap(), c);
        assert_eq!(rx.stats().bytes_popped, c.wire_len() as u64);
    }

    #[test]
    fn simplex_rule() {
        let (mut tx, mut rx) = DataChannel::loopback_pair(ChannelConfig::default());
        assert!(matches!(rx.pushdata(&entity(0, 1)), Err(MediumError::Usage(_))));
        assert!(matches!(tx.popdata(), Err(MediumError::Usage(_))));
    }

    #[test]
    fn empty_pop_with_zero_deadline_times_out() {
        let cfg = ChannelConfig {
            pop_deadline: Duration::ZERO,
            ..Default::default()
        };
        let (_tx, mut rx) = DataChannel::loopback_pair(cfg);
        assert_eq!(rx.popdata(), Err(MediumError::Timeout));
    }

    #[test]
    fn flush_on_empty_and_after_close() {
        let (mut tx, _rx) = DataChannel::loopback_pair(ChannelConfig::default());
        tx.flush().unwrap();
        tx.close().unwrap();
        assert_eq!(tx.flush(), Err(MediumError::ChannelClosed));
    }

    #[test]
    fn buffer_size_controls_medium_writes() {
        let cfg = ChannelConfig {
            buffer_size: 1 << 20,
            ..Default::default()
        };
        let (mut tx, _rx) = DataChannel::loopback_pair(cfg);
        for i in 0..4 {
            tx.pushdata(&entity(i, 1000)).unwrap();
        }
        assert_eq!(tx.stats().medium_writes, 0);
        tx.command(&CommandMessage::set_buffer_size(MigrationToken::default(), 1, 16384))
            .unwrap();
        assert_eq!(tx.config().buffer_size, 16384);
        for i in 4..20 {
            tx.pushdata(&entity(i, 1000)).unwrap();
        }
        // 20 frames of 1035 bytes against a 16 KiB buffer.
        assert_eq!(tx.stats().medium_writes, 1);
    }

    #[test]
    fn window_bounds_in_flight_and_eop_is_acked() {
        let cfg = ChannelConfig {
            window: 4,
            ..Default::default()
        };
        let (mut tx, mut rx) = DataChannel::loopback_pair(cfg);
        let n = 50;
        let h = thread::spawn(move || {
            let mut got = Vec::new();
            loop {
                let c = rx.popdata().unwrap();
                if c.kind == ChunkKind::EndOfProcess {
                    break;
                }
                got.push(c.sequence);
            }
            got
        });
        for i in 0..n {
            loop {
                match tx.pushdata(&entity(i, 10)) {
                    Ok(()) => break,
                    Err(MediumError::BackpressureTimeout) => continue,
                    Err(e) => panic!("{e}"),
                }
            }
        }
        tx.pushdata(&Chunk::end_of_process()).unwrap();
        tx.wait_consumed(Duration::from_secs(5)).unwrap();
        assert_eq!(h.join().unwrap(), (0..n).collect::<Vec<_>>());
        assert!(tx.stats().max_in_flight <= 4);
    }

    #[test]
    fn stalled_receiver_backpressures() {
        let cfg = ChannelConfig {
            window: 2,
            ack_timeout: Duration::from_millis(20),
            ..Default::default()
        };
        let (mut tx, _rx) = DataChannel::loopback_pair(cfg);
        tx.pushdata(&entity(0, 1)).unwrap();
        tx.pushdata(&entity(1, 1)).unwrap();
        assert_eq!(tx.pushdata(&entity(2, 1)), Err(MediumError::BackpressureTimeout));
        assert_eq!(tx.stats().chunks_pushed, 2);
    }

    #[test]
    fn single_corruption_recovers_by_resend() {
        let (mut tx, mut rx) = DataChannel::loopback_pair(ChannelConfig::default());
        tx.set_fault_plan(FaultPlan {
            corrupt_frame: Some(2),
            ..Default::default()
        });
        for i in 0..6 {
            tx.pushdata(&entity(i, 20)).unwrap();
        }
        tx.pushdata(&Chunk::end_of_process()).unwrap();
        tx.flush().unwrap();
        let h = thread::spawn(move || tx.wait_consumed(Duration::from_secs(5)).map(|_| tx));
        let mut seqs = Vec::new();
        loop {
            match rx.popdata() {
                Ok(c) if c.kind == ChunkKind::EndOfProcess => break,
                Ok(c) => seqs.push(c.sequence),
                Err(MediumError::ChecksumMismatch { sequence, .. }) => {
                    assert_eq!(sequence, 2);
                    rx.request_resend().unwrap();
                }
                Err(e) => panic!("{e}"),
            }
        }
        assert_eq!(seqs, vec![0, 1, 2, 3, 4, 5]);
        let tx = h.join().unwrap().unwrap();
        assert_eq!(tx.stats().retransmits, 5);
    }

    #[test]
    fn persistent_corruption_fails_twice() {
        let (mut tx, mut rx) = DataChannel::loopback_pair(ChannelConfig::default());
        tx.set_fault_plan(FaultPlan {
            corrupt_frame: Some(0),
            persistent: true,
            ..Default::default()
        });
        tx.pushdata(&entity(0, 20)).unwrap();
        tx.pushdata(&Chunk::end_of_process()).unwrap();
        tx.flush().unwrap();
        assert!(matches!(rx.popdata(), Err(MediumError::ChecksumMismatch { .. })));
        rx.request_resend().unwrap();
        tx.service(Duration::from_secs(1)).unwrap();
        assert!(matches!(rx.popdata(), Err(MediumError::ChecksumMismatch { sequence: 0, .. })));
    }

    #[test]
    fn cut_link_truncates() {
        let (mut tx, mut rx) = DataChannel::loopback_pair(ChannelConfig::default());
        tx.set_fault_plan(FaultPlan {
            cut_at_frame: Some(1),
            ..Default::default()
        });
        tx.pushdata(&entity(0, 5)).unwrap();
        assert_eq!(tx.pushdata(&entity(1, 5)), Err(MediumError::ChannelClosed));
        assert_eq!(rx.popdata().unwrap().sequence, 0);
        assert_eq!(rx.popdata(), Err(MediumError::TruncatedStream));
    }

    #[test]
    fn clean_close_after_end_of_process() {
        let (mut tx, mut rx) = DataChannel::loopback_pair(ChannelConfig::default());
        tx.pushdata(&Chunk::end_of_process()).unwrap();
        tx.close().unwrap();
        assert_eq!(rx.popdata().unwrap().kind, ChunkKind::EndOfProcess);
        assert_eq!(rx.popdata(), Err(MediumError::ChannelClosed));
    }

    #[test]
    fn abort_from_peer_fails_sender() {
        let (mut tx, mut rx) = DataChannel::loopback_pair(ChannelConfig::default());
        rx.command(&CommandMessage::abort(MigrationToken::default(), 1, "vetoed"))
            .unwrap();
        assert_eq!(
            tx.service(Duration::from_secs(1)),
            Err(MediumError::Aborted("vetoed".into()))
        );
    }

    #[test]
    fn page_pull_round_trip() {
        let (mut tx, mut rx) = DataChannel::loopback_pair(ChannelConfig::default());
        let t = MigrationToken([1; 16]);
        let h = thread::spawn(move || {
            let req = tx.take_command(Duration::from_secs(2)).unwrap().unwrap();
            assert_eq!(req.opcode, Opcode::PagePullRequest);
            let page = req.body_u64(0).unwrap();
            tx.command(&CommandMessage::page_reply(t, mem(), 3, page, crate::medium::PULL_OK, &[7; 8]))
                .unwrap();
        });
        let reply = rx
            .command(&CommandMessage::page_pull(t, mem(), 3, 42))
            .unwrap()
            .unwrap();
        assert_eq!(reply.body_u64(0).unwrap(), 42);
        assert_eq!(&reply.body()[9..], &[7; 8]);
        h.join().unwrap();
    }
}
