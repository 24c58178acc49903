use std::fmt;

use parking_lot::Mutex;

use crate::medium::FaultPlan;

/// Points of a migration at which a fault can be injected, in protocol
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Boundary {
    AfterOffer,
    AfterAccept,
    AfterFrameSetup,
    AfterQuiesce,
    MidTransfer,
    AfterTransfer,
    AfterResumeAck,
}

impl Boundary {
    pub const ALL: [Boundary; 7] = [
        Boundary::AfterOffer,
        Boundary::AfterAccept,
        Boundary::AfterFrameSetup,
        Boundary::AfterQuiesce,
        Boundary::MidTransfer,
        Boundary::AfterTransfer,
        Boundary::AfterResumeAck,
    ];
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Boundary::AfterOffer => "after-offer",
            Boundary::AfterAccept => "after-accept",
            Boundary::AfterFrameSetup => "after-frame-setup",
            Boundary::AfterQuiesce => "after-quiesce",
            Boundary::MidTransfer => "mid-transfer",
            Boundary::AfterTransfer => "after-transfer",
            Boundary::AfterResumeAck => "after-resume-ack",
        };
        f.write_str(s)
    }
}

/// A fault the coordinator injects into its next migration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Sever the control link (and with it every data channel) at the
    /// boundary. `MidTransfer` cuts the first data channel after `frame`
    /// frames instead.
    Cut { at: Boundary, frame: u64 },
    /// Corrupt data frame `frame` of the first process; with `persistent`
    /// every retransmission is corrupt too.
    Corrupt { frame: u64, persistent: bool },
}

impl Fault {
    pub fn cut(at: Boundary) -> Self {
        Fault::Cut { at, frame: 2 }
    }
}

/// Holds at most one pending fault; the next migration takes it.
#[derive(Debug, Default)]
pub struct FaultInjector {
    pending: Mutex<Option<Fault>>,
}

impl FaultInjector {
    pub fn arm(&self, fault: Fault) {
        *self.pending.lock() = Some(fault);
    }

    pub fn take(&self) -> Option<Fault> {
        self.pending.lock().take()
    }
}

/// The fault a running migration carries.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ArmedFault(pub Option<Fault>);

impl ArmedFault {
    pub fn cuts_at(&self, b: Boundary) -> bool {
        matches!(self.0, Some(Fault::Cut { at, .. }) if at == b && b != Boundary::MidTransfer)
    }

    /// Channel faults for the process at `index` in the batch.
    pub fn plan_for(&self, index: usize) -> FaultPlan {
        if index != 0 {
            return FaultPlan::default();
        }
        match self.0 {
            Some(Fault::Cut {
                at: Boundary::MidTransfer,
                frame,
            }) => FaultPlan {
                cut_at_frame: Some(frame),
                ..FaultPlan::default()
            },
            Some(Fault::Corrupt { frame, persistent }) => FaultPlan {
                corrupt_frame: Some(frame),
                persistent,
                cut_at_frame: None,
            },
            _ => FaultPlan::default(),
        }
    }
}
