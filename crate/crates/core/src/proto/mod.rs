//! The migration protocol between two nodes.
//!
//! A batch opens one control connection from the source node (the
//! coordinator) to the destination daemon. The handshake is an offer, an
//! accept or reject, then one frame-setup message per process. Each process
//! then gets its own data connection, opened with a short preamble that
//! names the batch token and the source pid, and its own backchannel routed
//! over the control connection.
//!
//! ```text
//! data preamble   "PMCH" | token (16) | source pid u32
//! ```
//!
//! The destination acknowledges every resumed process; once all are
//! acknowledged (and, for lazy restores, drained) the source sends the
//! removal confirmation and drops its copies. Until that confirmation the
//! destination frames are provisional and are destroyed if the link fails.

pub mod fault;
pub mod lazy;
pub mod msg;
pub mod report;

mod dest;
mod link;
mod source;

use std::time::{Duration, Instant};

pub use dest::DaemonHandle;
pub use fault::{Boundary, Fault, FaultInjector};
pub use lazy::{GuestDriver, PullHandler, ServeStats, TouchPages};
pub use link::{Link, RoutedBackchannel};
pub use report::{MigrationReport, PidReport, RoundRecord, WorkloadCall};

pub(crate) use dest::start_daemon;
pub(crate) use source::migrate;

use crate::ids::MigrationToken;
use crate::medium::{Endpoint, MediumError};

pub const DATA_MAGIC: &[u8; 4] = b"PMCH";

/// Asks the daemon at `endpoint` for its status, returned as JSON text.
pub fn query_status(endpoint: &str, timeout: Duration) -> Result<String, MediumError> {
    let ep: Endpoint = endpoint.parse()?;
    let link = Link::start(ep.connect()?, None);
    link.send(msg::STATUS_QUERY, MigrationToken::default(), Vec::new())?;
    let deadline = Instant::now() + timeout;
    let r = loop {
        match link.recv_until(deadline)? {
            Some(f) if f.kind == msg::STATUS_REPLY => {
                break String::from_utf8(f.payload).map_err(|e| MediumError::Protocol(e.to_string()))
            }
            Some(_) => continue,
            None => break Err(MediumError::Timeout),
        }
    };
    link.close();
    r
}
