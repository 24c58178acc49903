use std::time::Duration;

use serde::Serialize;

use crate::control::Strategy;
use crate::medium::ChannelStats;
use crate::subsystem::mem::MemStats;

/// One burst of guest activity run during a live pre-copy round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WorkloadCall {
    pub steps: u64,
    pub write_rate: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoundRecord {
    pub round: u32,
    /// Pages sent in this round, ascending.
    pub pages: Vec<u64>,
    /// Guest activity interleaved with the round, in order.
    pub workload: Vec<WorkloadCall>,
    /// Dirty private pages once the round was acknowledged.
    pub dirty_after: u64,
}

/// Per-process outcome of a migration.
#[derive(Debug, Clone, Serialize)]
pub struct PidReport {
    pub source_pid: u32,
    pub dest_pid: u32,
    /// Quiesce on the source to the destination's resume acknowledgement.
    #[serde(serialize_with = "micros")]
    pub freeze_time: Duration,
    /// Request submission to the destination's resume acknowledgement.
    #[serde(serialize_with = "micros")]
    pub latency: Duration,
    pub bytes_pre_resume: u64,
    pub bytes_post_resume: u64,
    pub pages_pre_resume: u64,
    pub pages_post_resume: u64,
    pub pull_requests: u64,
    pub region_pages: u64,
    pub pages_scanned: u64,
    /// Pages sent in the stop phase (the whole address space for
    /// stop-and-copy).
    pub final_pages: Vec<u64>,
    pub rounds: Vec<RoundRecord>,
    pub channel: ChannelStats,
    #[serde(skip)]
    pub mem: MemStats,
}

impl PidReport {
    pub fn round_count(&self) -> usize {
        self.rounds.len().max(1)
    }
}

/// Outcome of one migration batch, as seen by the coordinator.
#[derive(Debug, Clone, Serialize)]
pub struct MigrationReport {
    pub token: String,
    pub request_id: u64,
    pub dest_request_id: u64,
    pub strategy: Strategy,
    /// Offer, accept and one frame setup per process.
    pub negotiation_msgs: u64,
    pub processes: Vec<PidReport>,
    #[serde(serialize_with = "micros")]
    pub elapsed: Duration,
}

impl MigrationReport {
    pub fn bytes_pre_resume(&self) -> u64 {
        self.processes.iter().map(|p| p.bytes_pre_resume).sum()
    }

    pub fn bytes_post_resume(&self) -> u64 {
        self.processes.iter().map(|p| p.bytes_post_resume).sum()
    }

    pub fn max_freeze(&self) -> Duration {
        self.processes
            .iter()
            .map(|p| p.freeze_time)
            .max()
            .unwrap_or_default()
    }
}

fn micros<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u64(d.as_micros() as u64)
}
