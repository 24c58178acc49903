//! Pluggable state handlers.
//!
//! A subsystem serializes one slice of a [`GuestProcess`] into chunks and
//! rebuilds it from them. Every subsystem implements [`SubsystemOps`]:
//!
//! | operation    | purpose                                                  |
//! |--------------|----------------------------------------------------------|
//! | `checkpoint` | emit up to `batch_limit` entities per call until done    |
//! | `restart`    | consume this subsystem's chunks until its end marker     |
//! | `fault`      | decide how to recover one entity after an error          |
//! | `status`     | report entities done against the estimated total         |
//! | `dump`       | describe a failed or frozen event                        |
//!
//! Per-event state lives in the [`StepContext`] handed to every call, so a
//! single registered subsystem serves any number of concurrent events.
//!
//! Payload layouts of the built-in subsystems are documented in their
//! modules: [`cpu`], [`mem`], [`file`] and the sample third-party module
//! [`counter`].

pub mod counter;
pub mod cpu;
pub mod file;
mod ledger;
pub mod mem;
mod registry;
mod wire;

pub use file::{ResidualFile, ResidualKey, ResidualTable};
pub use ledger::{Claim, LedgerState, RegionAssembly, SharedResourceLedger};
pub use registry::{Capability, RegistryError, RegistryLease, SubsystemRegistry};
pub use wire::PayloadReader;

use std::any::Any;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::guest::{GuestError, GuestProcess, Pid, Regions};
use crate::ids::{MigrationToken, RequestId, SubsystemId};
use crate::medium::{Chunk, ChunkKind, DataChannel, MediumError};

/// Entities emitted per checkpoint call unless configured otherwise.
pub const DEFAULT_BATCH_LIMIT: usize = 64;

#[derive(Clone)]
pub struct SubsystemDescriptor {
    pub subsystem_id: SubsystemId,
    pub version: u32,
    /// Position in checkpoint and restart order; ties break on the id.
    pub order_key: i32,
    pub ops: Arc<dyn SubsystemOps>,
}

impl fmt::Debug for SubsystemDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubsystemDescriptor")
            .field("subsystem_id", &self.subsystem_id)
            .field("version", &self.version)
            .field("order_key", &self.order_key)
            .finish()
    }
}

impl SubsystemDescriptor {
    pub fn new(id: &str, version: u32, order_key: i32, ops: Arc<dyn SubsystemOps>) -> Self {
        SubsystemDescriptor {
            subsystem_id: SubsystemId::new(id).expect("valid subsystem id"),
            version,
            order_key,
            ops,
        }
    }

    pub fn capability(&self) -> Capability {
        Capability {
            id: self.subsystem_id,
            version: self.version,
            order_key: self.order_key,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepReport {
    pub entities_processed: u64,
    pub done: bool,
    /// Whether the call moved the event forward; feeds the watchdog.
    pub progressed: bool,
    /// Restart side only: a pre-copy round boundary was consumed.
    pub round_complete: bool,
}

impl StepReport {
    pub fn done() -> Self {
        StepReport {
            done: true,
            ..Default::default()
        }
    }

    pub fn processed(n: u64, done: bool) -> Self {
        StepReport {
            entities_processed: n,
            done,
            progressed: n > 0 || done,
            round_complete: false,
        }
    }

    pub fn waiting() -> Self {
        StepReport::default()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct ProgressSummary {
    pub entities_done: u64,
    pub entities_total_estimate: u64,
}

/// Names the entity a fault concerns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityRef {
    pub subsystem: SubsystemId,
    pub sequence: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FaultOutcome {
    /// Ask the peer to send the entity again.
    Resend,
    /// Give up; the event fails with this reason.
    Fail(String),
}

/// Why diagnostics are being collected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DumpReason {
    Frozen,
    Failed(String),
}

/// What a checkpoint call should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointMode {
    /// Everything, on a quiesced process.
    Full,
    /// One live pre-copy round; only the memory subsystem participates.
    Round(u32),
    /// The stop phase after pre-copy rounds: what is still dirty.
    Final,
    /// Everything except private page contents, which stay behind for
    /// demand paging.
    LazyMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionOutcome {
    /// The source copy is gone (migrated and removed).
    Consumed,
    /// The source keeps running (standalone checkpoint or abort).
    Retained,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SubsystemError {
    #[error(transparent)]
    Medium(#[from] MediumError),
    #[error(transparent)]
    Guest(#[from] GuestError),
    #[error("malformed chunk {sequence} of subsystem {subsystem}: {reason}")]
    Malformed {
        subsystem: SubsystemId,
        sequence: u32,
        reason: String,
    },
    #[error("stream carries chunks of unknown subsystem {0}")]
    UnknownSubsystem(SubsystemId),
    #[error("{0}")]
    Failed(String),
}

/// Event identity visible to subsystems.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventInfo {
    pub request_id: RequestId,
    pub token: Option<MigrationToken>,
    /// Pid of the process on the node that originated the state.
    pub source_pid: Pid,
}

/// Node resources shared by the events of one batch.
#[derive(Debug, Clone)]
pub struct StepEnv {
    pub regions: Regions,
    pub ledger: Arc<SharedResourceLedger>,
    pub assembly: Arc<RegionAssembly>,
    pub residuals: Arc<ResidualTable>,
}

impl StepEnv {
    pub fn new(regions: Regions) -> Self {
        StepEnv {
            regions,
            ledger: Arc::new(SharedResourceLedger::new(true)),
            assembly: Arc::new(RegionAssembly::default()),
            residuals: Arc::new(ResidualTable::default()),
        }
    }
}

/// Per-(event, subsystem) state passed to every operation.
pub struct StepContext {
    pub event: EventInfo,
    pub subsystem: SubsystemId,
    pub mode: CheckpointMode,
    pub batch_limit: usize,
    /// Sequence number of the next chunk this subsystem emits or expects.
    pub sequence: u32,
    pub entities_done: u64,
    pub entities_total: u64,
    pub last_entity: Option<String>,
    pub env: StepEnv,
    state: Option<Box<dyn Any + Send>>,
}

impl fmt::Debug for StepContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StepContext")
            .field("event", &self.event)
            .field("subsystem", &self.subsystem)
            .field("mode", &self.mode)
            .field("sequence", &self.sequence)
            .field("entities_done", &self.entities_done)
            .finish()
    }
}

impl StepContext {
    pub fn new(event: EventInfo, subsystem: SubsystemId, env: StepEnv) -> Self {
        StepContext {
            event,
            subsystem,
            mode: CheckpointMode::Full,
            batch_limit: DEFAULT_BATCH_LIMIT,
            sequence: 0,
            entities_done: 0,
            entities_total: 0,
            last_entity: None,
            env,
            state: None,
        }
    }

    /// Pushes one chunk with the next sequence number. The sequence only
    /// advances if the sink accepted the chunk.
    pub fn emit(
        &mut self,
        sink: &mut dyn ChunkSink,
        kind: ChunkKind,
        payload: Vec<u8>,
    ) -> Result<(), MediumError> {
        let chunk = Chunk::new(self.subsystem, kind, self.sequence, payload);
        sink.push(&chunk)?;
        self.sequence += 1;
        Ok(())
    }

    /// Takes the subsystem's private state, creating it on first use.
    pub fn take_state<T: Default + Send + 'static>(&mut self) -> Box<T> {
        self.state
            .take()
            .and_then(|s| s.downcast::<T>().ok())
            .unwrap_or_default()
    }

    pub fn put_state<T: Send + 'static>(&mut self, state: Box<T>) {
        self.state = Some(state);
    }

    pub fn progress(&self) -> ProgressSummary {
        ProgressSummary {
            entities_done: self.entities_done,
            entities_total_estimate: self.entities_total.max(self.entities_done),
        }
    }

    /// Checks that a chunk is the next one of this subsystem.
    pub fn expect_sequence(&mut self, chunk: &Chunk) -> Result<(), SubsystemError> {
        if chunk.sequence != self.sequence {
            return Err(self.malformed(
                chunk,
                format!("expected sequence {}, got {}", self.sequence, chunk.sequence),
            ));
        }
        self.sequence += 1;
        Ok(())
    }

    pub fn malformed(&self, chunk: &Chunk, reason: impl Into<String>) -> SubsystemError {
        SubsystemError::Malformed {
            subsystem: chunk.subsystem,
            sequence: chunk.sequence,
            reason: reason.into(),
        }
    }
}

/// Destination of checkpoint chunks.
pub trait ChunkSink {
    fn push(&mut self, chunk: &Chunk) -> Result<(), MediumError>;
}

impl ChunkSink for DataChannel {
    fn push(&mut self, chunk: &Chunk) -> Result<(), MediumError> {
        self.pushdata(chunk)
    }
}

impl ChunkSink for Vec<Chunk> {
    fn push(&mut self, chunk: &Chunk) -> Result<(), MediumError> {
        Vec::push(self, chunk.clone());
        Ok(())
    }
}

/// Chunks of one subsystem, in stream order.
pub trait ChunkSource {
    /// The next chunk of this subsystem, or `None` once the stream moves on
    /// to another subsystem.
    fn next(&mut self) -> Result<Option<Chunk>, MediumError>;
}

/// The five operations of a subsystem.
pub trait SubsystemOps: Send + Sync {
    /// Emits up to `ctx.batch_limit` entities. Reports `done` once nothing
    /// is left; the caller then emits the end marker.
    fn checkpoint(
        &self,
        ctx: &mut StepContext,
        process: &mut GuestProcess,
        sink: &mut dyn ChunkSink,
    ) -> Result<StepReport, SubsystemError>;

    /// Consumes available chunks; `done` once the end marker is consumed
    /// and the subsystem's slice of the process is complete.
    fn restart(
        &self,
        ctx: &mut StepContext,
        process: &mut GuestProcess,
        source: &mut dyn ChunkSource,
    ) -> Result<StepReport, SubsystemError>;

    fn fault(&self, _ctx: &mut StepContext, entity: &EntityRef) -> FaultOutcome {
        match entity.error.contains("checksum") {
            true => FaultOutcome::Resend,
            false => FaultOutcome::Fail(entity.error.clone()),
        }
    }

    fn status(&self, ctx: &StepContext) -> ProgressSummary {
        ctx.progress()
    }

    fn dump(&self, ctx: &StepContext, reason: Option<&DumpReason>) -> String {
        default_dump(ctx, reason)
    }

    /// Entities a checkpoint of `process` is expected to emit.
    fn estimate(&self, _ctx: &StepContext, _process: &GuestProcess) -> u64 {
        0
    }

    /// Called once when the event ends, on the source side.
    fn finish(&self, _ctx: &mut StepContext, _process: &mut GuestProcess, _outcome: SessionOutcome) {}
}

/// The report every built-in subsystem produces for [`SubsystemOps::dump`].
pub fn default_dump(ctx: &StepContext, reason: Option<&DumpReason>) -> String {
    let Some(reason) = reason else {
        return String::new();
    };
    let token = ctx
        .event
        .token
        .map(|t| t.hex())
        .unwrap_or_else(|| "-".into());
    let what = match reason {
        DumpReason::Frozen => "frozen: no progress within the watchdog period".to_string(),
        DumpReason::Failed(e) => format!("failed: {e}"),
    };
    format!(
        "subsystem {} request {} token {}: {}; {} of ~{} entities done, next sequence {}, last entity {}",
        ctx.subsystem,
        ctx.event.request_id,
        token,
        what,
        ctx.entities_done,
        ctx.entities_total,
        ctx.sequence,
        ctx.last_entity.as_deref().unwrap_or("none"),
    )
}

/// The built-in descriptors `cpu`, `mem` and `file`.
pub fn builtin_subsystems() -> Vec<SubsystemDescriptor> {
    vec![cpu::descriptor(), mem::descriptor(), file::descriptor()]
}

/// A descriptor for a module name accepted on the command line.
pub fn descriptor_by_name(name: &str) -> Option<SubsystemDescriptor> {
    match name {
        "cpu" => Some(cpu::descriptor()),
        "mem" => Some(mem::descriptor()),
        "file" => Some(file::descriptor()),
        "counter" => Some(counter::descriptor()),
        _ => None,
    }
}
