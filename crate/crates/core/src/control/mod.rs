//! Event control: per-request contexts, hooks, quiescing, the iterative
//! checkpoint/restart workers and the watchdog.

mod event;
mod hooks;
mod quiesce;
mod worker;

pub use event::{
    EventContext, EventState, EventStatus, EventTable, Timestamps, Watchdog,
    DEFAULT_WATCHDOG_PERIOD,
};
pub use hooks::{HookCall, NoHooks, ProcessHooks, RecordingHooks};
pub use quiesce::{quiesce, QuiesceReport};
pub use worker::{
    checkpoint_pass, checkpoint_worker, restart_pass, restart_worker, Inlet, Outlet, PassOptions,
    Session,
};

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::guest::{GuestError, Pid};
use crate::ids::{RequestId, SubsystemId};
use crate::medium::{MediumDescriptor, MediumError};
use crate::subsystem::SubsystemError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    Checkpoint,
    Restart,
    Migrate,
}

/// Who drives the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecCtx {
    /// The guest's own thread, at a barrier point.
    Internal,
    /// A framework worker operating on a frozen guest.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuiesceMethod {
    /// Every thread enters a barrier.
    Synchronous,
    /// The process is frozen from outside at the next safe point.
    Asynchronous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Strategy {
    StopAndCopy,
    PreCopy { max_rounds: u32, dirty_threshold: u64 },
    PostCopyLazy { prefetch: u32 },
}

impl Strategy {
    pub const DEFAULT_MAX_ROUNDS: u32 = 5;
    pub const DEFAULT_DIRTY_THRESHOLD: u64 = 16;

    pub fn pre_copy() -> Self {
        Strategy::PreCopy {
            max_rounds: Self::DEFAULT_MAX_ROUNDS,
            dirty_threshold: Self::DEFAULT_DIRTY_THRESHOLD,
        }
    }

    pub fn lazy() -> Self {
        Strategy::PostCopyLazy { prefetch: 0 }
    }

    /// Whether the strategy needs commands flowing while data moves.
    pub fn needs_backchannel(&self) -> bool {
        !matches!(self, Strategy::StopAndCopy)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::StopAndCopy => "stop-and-copy",
            Strategy::PreCopy { .. } => "pre-copy",
            Strategy::PostCopyLazy { .. } => "lazy",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stop-and-copy" | "stop" => Ok(Strategy::StopAndCopy),
            "pre-copy" | "precopy" => Ok(Strategy::pre_copy()),
            "lazy" | "post-copy" => Ok(Strategy::lazy()),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

/// A request as submitted to a node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestSpec {
    pub kind: EventKind,
    pub pids: Vec<Pid>,
    pub strategy: Strategy,
    pub exec_ctx: ExecCtx,
    pub quiesce: QuiesceMethod,
    pub medium: String,
    /// Daemon control endpoint for migrations, image path otherwise.
    pub endpoint: String,
    /// Send a region shared by several processes of the batch only once.
    pub dedup: bool,
    /// Guest activity to run while pre-copy rounds transfer memory.
    pub workload: Option<LiveWorkload>,
}

/// Writes a live guest performs during pre-copy: `steps` workload steps of
/// `write_rate` writes after every transferred batch of pages. Call `i` of
/// the migration is seeded with `seed + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LiveWorkload {
    pub steps: u64,
    pub write_rate: u64,
    pub seed: u64,
}

impl RequestSpec {
    pub fn migrate(pids: Vec<Pid>, endpoint: &str, strategy: Strategy) -> Self {
        let medium = if endpoint.starts_with("loopback:") {
            "loopback"
        } else {
            "stream"
        };
        RequestSpec {
            kind: EventKind::Migrate,
            pids,
            strategy,
            exec_ctx: ExecCtx::External,
            quiesce: QuiesceMethod::Asynchronous,
            medium: medium.into(),
            endpoint: endpoint.into(),
            dedup: true,
            workload: None,
        }
    }

    pub fn checkpoint(pid: Pid, image: &str) -> Self {
        RequestSpec {
            kind: EventKind::Checkpoint,
            pids: vec![pid],
            strategy: Strategy::StopAndCopy,
            exec_ctx: ExecCtx::External,
            quiesce: QuiesceMethod::Asynchronous,
            medium: "image-file".into(),
            endpoint: image.into(),
            dedup: true,
            workload: None,
        }
    }

    pub fn restart(image: &str) -> Self {
        RequestSpec {
            kind: EventKind::Restart,
            pids: Vec::new(),
            strategy: Strategy::StopAndCopy,
            exec_ctx: ExecCtx::External,
            quiesce: QuiesceMethod::Asynchronous,
            medium: "image-file".into(),
            endpoint: image.into(),
            dedup: true,
            workload: None,
        }
    }

    /// Checks the rules that do not depend on node state. `medium` is the
    /// registered descriptor of `self.medium`.
    pub fn validate(&self, medium: &MediumDescriptor) -> Result<(), ControlError> {
        use ControlError::InvalidCombination as Invalid;
        match self.kind {
            EventKind::Restart if self.exec_ctx == ExecCtx::Internal => {
                return Err(Invalid(
                    "restart needs an external execution context: the destination process does not exist yet",
                ))
            }
            EventKind::Migrate | EventKind::Checkpoint
                if self.exec_ctx == ExecCtx::Internal
                    && self.quiesce == QuiesceMethod::Asynchronous =>
            {
                return Err(Invalid(
                    "internal execution context needs synchronous quiesce: a frozen process cannot drive its own event",
                ))
            }
            _ => {}
        }
        if self.strategy.needs_backchannel() && !medium.has_backchannel() {
            return Err(Invalid(
                "pre-copy and lazy strategies need a live backchannel; offline media have none",
            ));
        }
        if let Strategy::PreCopy { max_rounds, .. } = self.strategy {
            if max_rounds == 0 {
                return Err(Invalid("pre-copy needs at least one round"));
            }
        }
        match self.kind {
            EventKind::Migrate if !medium.has_backchannel() => {
                Err(Invalid("migration needs a live medium; write an image with checkpoint instead"))
            }
            EventKind::Checkpoint | EventKind::Restart if medium.has_backchannel() => Err(Invalid(
                "standalone checkpoint and restart use the image-file medium",
            )),
            EventKind::Checkpoint | EventKind::Restart if self.strategy.needs_backchannel() => {
                Err(Invalid("standalone checkpoint and restart are stop-and-copy only"))
            }
            EventKind::Migrate | EventKind::Checkpoint if self.pids.is_empty() => {
                Err(Invalid("no pids given"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ControlError {
    #[error("invalid combination: {0}")]
    InvalidCombination(&'static str),
    #[error("unknown pid {0}")]
    UnknownPid(Pid),
    #[error("unknown medium {0:?}")]
    UnknownMedium(String),
    #[error("pid {0} is already part of an active event")]
    Busy(Pid),
    #[error("no event with request id {0}")]
    NotFound(RequestId),
    #[error("event {0} already reached a terminal state")]
    AlreadyTerminal(RequestId),
    #[error("quiesce timed out: {entered} of {threads} threads reached the barrier")]
    QuiesceTimeout { entered: usize, threads: usize },
    #[error("restart hook vetoed resume: {0}")]
    HookVeto(String),
    #[error("illegal event transition {from:?} -> {to:?}")]
    IllegalTransition { from: EventState, to: EventState },
    #[error("event frozen: no progress within the watchdog period")]
    Frozen,
    #[error("event aborted: {0}")]
    Aborted(String),
    #[error("stream carries chunks of unknown subsystem {0}")]
    UnknownSubsystem(SubsystemId),
    #[error(transparent)]
    Subsystem(SubsystemError),
    #[error(transparent)]
    Medium(#[from] MediumError),
    #[error(transparent)]
    Guest(#[from] GuestError),
}

impl From<SubsystemError> for ControlError {
    fn from(e: SubsystemError) -> Self {
        match e {
            SubsystemError::Medium(m) => ControlError::Medium(m),
            SubsystemError::Guest(g) => ControlError::Guest(g),
            SubsystemError::UnknownSubsystem(id) => ControlError::UnknownSubsystem(id),
            other => ControlError::Subsystem(other),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::MediumRegistry;

    fn check(spec: &RequestSpec) -> Result<(), ControlError> {
        spec.validate(MediumRegistry::default().get(&spec.medium).unwrap())
    }

    #[test]
    fn execution_context_rules() {
        let mut m = RequestSpec::migrate(vec![Pid(1)], "loopback:b", Strategy::StopAndCopy);
        m.exec_ctx = ExecCtx::External;
        m.quiesce = QuiesceMethod::Asynchronous;
        assert_eq!(check(&m), Ok(()));
        m.exec_ctx = ExecCtx::Internal;
        assert!(matches!(check(&m), Err(ControlError::InvalidCombination(_))));
        m.quiesce = QuiesceMethod::Synchronous;
        assert_eq!(check(&m), Ok(()));

        let mut r = RequestSpec::restart("/tmp/x.img");
        r.exec_ctx = ExecCtx::Internal;
        assert!(matches!(check(&r), Err(ControlError::InvalidCombination(_))));
    }

    #[test]
    fn offline_media_reject_live_strategies() {
        let mut c = RequestSpec::checkpoint(Pid(1), "/tmp/x.img");
        c.strategy = Strategy::lazy();
        assert!(matches!(check(&c), Err(ControlError::InvalidCombination(_))));
        let mut m = RequestSpec::migrate(vec![Pid(1)], "/tmp/x.img", Strategy::lazy());
        m.medium = "image-file".into();
        assert!(matches!(check(&m), Err(ControlError::InvalidCombination(_))));
    }

    #[test]
    fn strategy_names_parse() {
        assert_eq!("lazy".parse::<Strategy>().unwrap(), Strategy::lazy());
        assert_eq!(
            "pre-copy".parse::<Strategy>().unwrap(),
            Strategy::PreCopy {
                max_rounds: 5,
                dirty_threshold: 16
            }
        );
        assert!("warp".parse::<Strategy>().is_err());
    }
}
