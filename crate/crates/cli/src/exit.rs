//! Process exit codes. Every failure path of the CLI maps to one of these.

use procmig::control::ControlError;
use procmig::medium::MediumError;
use procmig::proto::msg::{FailureKind, RejectReason};
use procmig::NodeError;

pub const OK: u8 = 0;
pub const OTHER: u8 = 1;
/// Bad command line (clap's own code).
pub const USAGE: u8 = 2;
pub const INVALID_COMBINATION: u8 = 10;
pub const CONNECT_REFUSED: u8 = 11;
pub const FAILED: u8 = 12;
pub const FROZEN: u8 = 13;
pub const TRUNCATED_STREAM: u8 = 14;
pub const UNKNOWN_SUBSYSTEM: u8 = 15;
pub const CHECKSUM_MISMATCH: u8 = 16;
pub const CAPABILITY_MISMATCH: u8 = 17;
pub const PORT_BUSY: u8 = 18;
pub const CONFIG: u8 = 19;

pub const ALL: [(u8, &str); 13] = [
    (OK, "ok"),
    (OTHER, "other error (e.g. image file unreadable)"),
    (USAGE, "usage error"),
    (INVALID_COMBINATION, "invalid strategy / medium / context combination"),
    (CONNECT_REFUSED, "destination unreachable"),
    (FAILED, "event failed or was aborted"),
    (FROZEN, "event frozen by the watchdog"),
    (TRUNCATED_STREAM, "stream or image ended early"),
    (UNKNOWN_SUBSYSTEM, "stream carries an unregistered subsystem"),
    (CHECKSUM_MISMATCH, "corrupt chunk"),
    (CAPABILITY_MISMATCH, "module set, page size or protocol version mismatch"),
    (PORT_BUSY, "listen address in use"),
    (CONFIG, "bad workload config, module, medium or pid"),
];

pub fn for_medium(e: &MediumError) -> u8 {
    match e {
        MediumError::ConnectRefused(_) => CONNECT_REFUSED,
        MediumError::AddressInUse(_) => PORT_BUSY,
        MediumError::TruncatedStream => TRUNCATED_STREAM,
        MediumError::ChecksumMismatch { .. } => CHECKSUM_MISMATCH,
        MediumError::UnknownMedium(_) => CONFIG,
        MediumError::Usage(_) | MediumError::Protocol(_) => USAGE,
        MediumError::Io(_) => OTHER,
        _ => FAILED,
    }
}

pub fn for_control(e: &ControlError) -> u8 {
    match e {
        ControlError::InvalidCombination(_) => INVALID_COMBINATION,
        ControlError::Frozen => FROZEN,
        ControlError::UnknownSubsystem(_) => UNKNOWN_SUBSYSTEM,
        ControlError::UnknownPid(_) | ControlError::UnknownMedium(_) => CONFIG,
        ControlError::Guest(procmig::guest::GuestError::Config(_)) => CONFIG,
        ControlError::Medium(m) => for_medium(m),
        _ => FAILED,
    }
}

pub fn for_node(e: &NodeError) -> u8 {
    match e {
        NodeError::Control(c) => for_control(c),
        NodeError::CapabilityMismatch { .. } | NodeError::VersionMismatch(_) => CAPABILITY_MISMATCH,
        NodeError::Rejected { reason, .. } => match reason {
            RejectReason::CapabilityMismatch
            | RejectReason::VersionMismatch
            | RejectReason::PageSizeMismatch => CAPABILITY_MISMATCH,
            RejectReason::Policy | RejectReason::DuplicateToken => FAILED,
        },
        NodeError::Remote { kind, .. } => match kind {
            FailureKind::Checksum => CHECKSUM_MISMATCH,
            FailureKind::Truncated => TRUNCATED_STREAM,
            FailureKind::UnknownSubsystem => UNKNOWN_SUBSYSTEM,
            FailureKind::Frozen => FROZEN,
            FailureKind::Veto | FailureKind::Other => FAILED,
        },
        NodeError::Registry(_) => CONFIG,
        NodeError::Timeout(_) | NodeError::SourceGone | NodeError::Injected(_) => FAILED,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn codes_are_distinct() {
        let codes: HashSet<u8> = ALL.iter().map(|(c, _)| *c).collect();
        assert_eq!(codes.len(), ALL.len());
    }

    #[test]
    fn remote_failures_keep_their_kind() {
        let e = NodeError::Remote {
            kind: FailureKind::Truncated,
            detail: String::new(),
        };
        assert_eq!(for_node(&e), TRUNCATED_STREAM);
        let e = NodeError::Control(ControlError::Medium(MediumError::ConnectRefused("x".into())));
        assert_eq!(for_node(&e), CONNECT_REFUSED);
    }
}
