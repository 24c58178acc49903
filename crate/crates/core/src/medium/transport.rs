//! Byte transports underneath the channels: in-process loopback pipes and
//! TCP streams, addressed by an [`Endpoint`].

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::{Condvar, Mutex};

use super::MediumError;

pub trait ByteWrite: Send {
    fn write_all(&mut self, buf: &[u8]) -> Result<(), MediumError>;
    fn flush(&mut self) -> Result<(), MediumError>;
    /// Closes the connection in both directions.
    fn shutdown(&mut self);
}

pub trait ByteRead: Send {
    /// Reads at least one byte, or returns `Ok(0)` at end of stream.
    /// `None` waits indefinitely; an elapsed timeout is [`MediumError::Timeout`].
    fn read_some(&mut self, buf: &mut [u8], timeout: Option<Duration>)
        -> Result<usize, MediumError>;
}

/// Both halves of an established duplex connection.
pub struct Connection {
    pub reader: Box<dyn ByteRead>,
    pub writer: Box<dyn ByteWrite>,
    pub peer: String,
}

impl fmt::Debug for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Connection").field("peer", &self.peer).finish()
    }
}

pub trait Listener: Send {
    fn accept(&mut self, timeout: Option<Duration>) -> Result<Connection, MediumError>;
    fn endpoint(&self) -> Endpoint;
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Endpoint {
    /// In-process rendezvous point, written `loopback:NAME`.
    Loopback(String),
    /// TCP address, written `HOST:PORT`.
    Tcp(String),
}

impl FromStr for Endpoint {
    type Err = MediumError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(name) = s.strip_prefix("loopback:") {
            if name.is_empty() {
                return Err(MediumError::Usage("empty loopback endpoint name"));
            }
            return Ok(Endpoint::Loopback(name.to_string()));
        }
        if s.rsplit_once(':').is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok()) {
            return Ok(Endpoint::Tcp(s.to_string()));
        }
        Err(MediumError::Protocol(format!("unparseable endpoint {s:?}")))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Loopback(n) => write!(f, "loopback:{n}"),
            Endpoint::Tcp(a) => f.write_str(a),
        }
    }
}

impl Endpoint {
    pub fn connect(&self) -> Result<Connection, MediumError> {
        match self {
            Endpoint::Loopback(name) => LoopbackHub::global().connect(name),
            Endpoint::Tcp(addr) => tcp_connect(addr),
        }
    }

    pub fn listen(&self) -> Result<Box<dyn Listener>, MediumError> {
        match self {
            Endpoint::Loopback(name) => Ok(Box::new(LoopbackHub::global().listen(name)?)),
            Endpoint::Tcp(addr) => Ok(Box::new(TcpAcceptor::bind(addr)?)),
        }
    }
}

// ---------------------------------------------------------------------------
// Loopback pipes

#[derive(Default)]
struct PipeState {
    buf: VecDeque<u8>,
    closed: bool,
}

#[derive(Default)]
struct Pipe {
    state: Mutex<PipeState>,
    ready: Condvar,
}

impl Pipe {
    fn close(&self) {
        self.state.lock().closed = true;
        self.ready.notify_all();
    }
}

struct PipeWriter {
    out: Arc<Pipe>,
    back: Arc<Pipe>,
}

struct PipeReader {
    inp: Arc<Pipe>,
}

impl ByteWrite for PipeWriter {
    fn write_all(&mut self, buf: &[u8]) -> Result<(), MediumError> {
        let mut st = self.out.state.lock();
        if st.closed {
            return Err(MediumError::ChannelClosed);
        }
        st.buf.extend(buf);
        drop(st);
        self.out.ready.notify_all();
        Ok(())
    }

    fn flush(&mut self) -> Result<(), MediumError> {
        Ok(())
    }

    fn shutdown(&mut self) {
        self.out.close();
        self.back.close();
    }
}

impl Drop for PipeWriter {
    fn drop(&mut self) {
        self.out.close();
    }
}

impl ByteRead for PipeReader {
    fn read_some(
        &mut self,
        buf: &mut [u8],
        timeout: Option<Duration>,
    ) -> Result<usize, MediumError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.inp.state.lock();
        loop {
            if !st.buf.is_empty() {
                let n = buf.len().min(st.buf.len());
                for (dst, src) in buf.iter_mut().zip(st.buf.drain(..n)) {
                    *dst = src;
                }
                return Ok(n);
            }
            if st.closed {
                return Ok(0);
            }
            match deadline {
                None => self.inp.ready.wait(&mut st),
                Some(d) => {
                    if self.inp.ready.wait_until(&mut st, d).timed_out() && st.buf.is_empty() && !st.closed {
                        return Err(MediumError::Timeout);
                    }
                }
            }
        }
    }
}

/// A connected pair of in-process duplex connections.
pub fn loopback_pair(a: &str, b: &str) -> (Connection, Connection) {
    let ab = Arc::new(Pipe::default());
    let ba = Arc::new(Pipe::default());
    let left = Connection {
        reader: Box::new(PipeReader { inp: ba.clone() }),
        writer: Box::new(PipeWriter {
            out: ab.clone(),
            back: ba.clone(),
        }),
        peer: b.to_string(),
    };
    let right = Connection {
        reader: Box::new(PipeReader { inp: ab.clone() }),
        writer: Box::new(PipeWriter { out: ba, back: ab }),
        peer: a.to_string(),
    };
    (left, right)
}

/// Registry of named in-process listeners.
type ListenerMap = Arc<Mutex<HashMap<String, Sender<Connection>>>>;

#[derive(Default)]
pub struct LoopbackHub {
    listeners: ListenerMap,
}

impl LoopbackHub {
    pub fn global() -> &'static LoopbackHub {
        static HUB: OnceLock<LoopbackHub> = OnceLock::new();
        HUB.get_or_init(LoopbackHub::default)
    }

    pub fn listen(&self, name: &str) -> Result<LoopbackListener, MediumError> {
        let mut map = self.listeners.lock();
        if map.contains_key(name) {
            return Err(MediumError::AddressInUse(format!("loopback:{name}")));
        }
        let (tx, rx) = unbounded();
        map.insert(name.to_string(), tx);
        Ok(LoopbackListener {
            name: name.to_string(),
            incoming: rx,
            map: self.listeners.clone(),
        })
    }

    pub fn connect(&self, name: &str) -> Result<Connection, MediumError> {
        let tx = self
            .listeners
            .lock()
            .get(name)
            .cloned()
            .ok_or_else(|| MediumError::ConnectRefused(format!("loopback:{name}")))?;
        let (client, server) = loopback_pair("client", &format!("loopback:{name}"));
        tx.send(server)
            .map_err(|_| MediumError::ConnectRefused(format!("loopback:{name}")))?;
        Ok(client)
    }
}

pub struct LoopbackListener {
    name: String,
    incoming: Receiver<Connection>,
    map: ListenerMap,
}

impl Drop for LoopbackListener {
    fn drop(&mut self) {
        self.map.lock().remove(&self.name);
    }
}

impl Listener for LoopbackListener {
    fn accept(&mut self, timeout: Option<Duration>) -> Result<Connection, MediumError> {
        match timeout {
            None => self.incoming.recv().map_err(|_| MediumError::ChannelClosed),
            Some(t) => self.incoming.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => MediumError::Timeout,
                RecvTimeoutError::Disconnected => MediumError::ChannelClosed,
            }),
        }
    }

    fn endpoint(&self) -> Endpoint {
        Endpoint::Loopback(self.name.clone())
    }
}

// ---------------------------------------------------------------------------
// TCP

struct TcpWriter(TcpStream);
struct TcpReader(TcpStream);

fn io_err(e: std::io::Error) -> MediumError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => MediumError::Timeout,
        ErrorKind::BrokenPipe
        | ErrorKind::ConnectionReset
        | ErrorKind::ConnectionAborted
        | ErrorKind::NotConnected
        | ErrorKind::UnexpectedEof => MediumError::ChannelClosed,
        _ => MediumError::Io(e.to_string()),
    }
}

impl ByteWrite for TcpWriter {
    fn write_all(&mut self, buf: &[u8]) -> Result<(), MediumError> {
        self.0.write_all(buf).map_err(io_err)
    }

    fn flush(&mut self) -> Result<(), MediumError> {
        self.0.flush().map_err(io_err)
    }

    fn shutdown(&mut self) {
        let _ = self.0.shutdown(Shutdown::Both);
    }
}

impl ByteRead for TcpReader {
    fn read_some(
        &mut self,
        buf: &mut [u8],
        timeout: Option<Duration>,
    ) -> Result<usize, MediumError> {
        // A zero duration is rejected by set_read_timeout.
        let timeout = timeout.map(|t| t.max(Duration::from_millis(1)));
        self.0.set_read_timeout(timeout).map_err(io_err)?;
        loop {
            match self.0.read(buf) {
                Ok(n) => return Ok(n),
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) if e.kind() == ErrorKind::ConnectionReset => return Ok(0),
                Err(e) => return Err(io_err(e)),
            }
        }
    }
}

fn tcp_connection(stream: TcpStream) -> Result<Connection, MediumError> {
    let _ = stream.set_nodelay(true);
    let peer = stream
        .peer_addr()
        .map(|a| a.to_string())
        .unwrap_or_default();
    let reader = stream.try_clone().map_err(io_err)?;
    Ok(Connection {
        reader: Box::new(TcpReader(reader)),
        writer: Box::new(TcpWriter(stream)),
        peer,
    })
}

fn tcp_connect(addr: &str) -> Result<Connection, MediumError> {
    let addrs: Vec<SocketAddr> = addr
        .to_socket_addrs()
        .map_err(|e| MediumError::ConnectRefused(format!("{addr}: {e}")))?
        .collect();
    let mut last = None;
    for a in addrs {
        match TcpStream::connect_timeout(&a, Duration::from_secs(5)) {
            Ok(s) => return tcp_connection(s),
            Err(e) => last = Some(e),
        }
    }
    Err(MediumError::ConnectRefused(format!(
        "{addr}: {}",
        last.map(|e| e.to_string()).unwrap_or_else(|| "no address".into())
    )))
}

pub struct TcpAcceptor {
    listener: TcpListener,
}

impl TcpAcceptor {
    pub fn bind(addr: &str) -> Result<Self, MediumError> {
        let listener = TcpListener::bind(addr).map_err(|e| match e.kind() {
            ErrorKind::AddrInUse => MediumError::AddressInUse(addr.to_string()),
            _ => MediumError::Io(e.to_string()),
        })?;
        Ok(TcpAcceptor { listener })
    }
}

impl Listener for TcpAcceptor {
    fn accept(&mut self, timeout: Option<Duration>) -> Result<Connection, MediumError> {
        match timeout {
            None => {
                self.listener.set_nonblocking(false).map_err(io_err)?;
                let (s, _) = self.listener.accept().map_err(io_err)?;
                tcp_connection(s)
            }
            Some(t) => {
                self.listener.set_nonblocking(true).map_err(io_err)?;
                let deadline = Instant::now() + t;
                loop {
                    match self.listener.accept() {
                        Ok((s, _)) => {
                            s.set_nonblocking(false).map_err(io_err)?;
                            return tcp_connection(s);
                        }
                        Err(e) if e.kind() == ErrorKind::WouldBlock => {
                            if Instant::now() >= deadline {
                                return Err(MediumError::Timeout);
                            }
                            std::thread::sleep(Duration::from_millis(2));
                        }
                        Err(e) => return Err(io_err(e)),
                    }
                }
            }
        }
    }

    fn endpoint(&self) -> Endpoint {
        Endpoint::Tcp(
            self.listener
                .local_addr()
                .map(|a| a.to_string())
                .unwrap_or_default(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_exact(r: &mut dyn ByteRead, n: usize) -> Vec<u8> {
        let mut out = vec![0; n];
        let mut got = 0;
        while got < n {
            let k = r.read_some(&mut out[got..], Some(Duration::from_secs(2))).unwrap();
            assert!(k > 0, "unexpected eof");
            got += k;
        }
        out
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!(
            "loopback:b".parse::<Endpoint>().unwrap(),
            Endpoint::Loopback("b".into())
        );
        assert_eq!(
            "127.0.0.1:7141".parse::<Endpoint>().unwrap(),
            Endpoint::Tcp("127.0.0.1:7141".into())
        );
        assert!("nonsense".parse::<Endpoint>().is_err());
    }

    #[test]
    fn pipe_timeout_and_eof() {
        let (mut a, mut b) = loopback_pair("a", "b");
        let mut buf = [0u8; 4];
        assert_eq!(
            b.reader.read_some(&mut buf, Some(Duration::ZERO)),
            Err(MediumError::Timeout)
        );
        a.writer.write_all(b"hi").unwrap();
        assert_eq!(read_exact(b.reader.as_mut(), 2), b"hi");
        a.writer.shutdown();
        assert_eq!(b.reader.read_some(&mut buf, None).unwrap(), 0);
        assert_eq!(b.writer.write_all(b"x"), Err(MediumError::ChannelClosed));
    }

    #[test]
    fn loopback_hub_rendezvous() {
        let hub = LoopbackHub::default();
        assert!(matches!(
            hub.connect("nobody"),
            Err(MediumError::ConnectRefused(_))
        ));
        let mut l = hub.listen("svc").unwrap();
        let mut c = hub.connect("svc").unwrap();
        let mut s = l.accept(Some(Duration::from_secs(1))).unwrap();
        c.writer.write_all(b"ping").unwrap();
        assert_eq!(read_exact(s.reader.as_mut(), 4), b"ping");
        s.writer.write_all(b"pong").unwrap();
        assert_eq!(read_exact(c.reader.as_mut(), 4), b"pong");
    }

    #[test]
    fn tcp_roundtrip_and_refusal() {
        let mut l = TcpAcceptor::bind("127.0.0.1:0").unwrap();
        let ep = l.endpoint();
        let mut c = ep.connect().unwrap();
        let mut s = l.accept(Some(Duration::from_secs(2))).unwrap();
        c.writer.write_all(b"abc").unwrap();
        assert_eq!(read_exact(s.reader.as_mut(), 3), b"abc");
        drop(l);
        let dead = match ep {
            Endpoint::Tcp(a) => a,
            _ => unreachable!(),
        };
        drop(s);
        drop(c);
        // The listener is gone, so the port refuses.
        assert!(matches!(tcp_connect(&dead), Err(MediumError::ConnectRefused(_))));
    }
}
