//! Benchmark scenarios measuring how migration cost scales.
//!
//! | scenario | sweep | measured |
//! |---|---|---|
//! | `fig3` | one guest of 1, 3, 5, 7, 9 MiB; all pages dirty or none; stop-and-copy or lazy | latency, bytes |
//! | `fig4` | the same sizes and footprints, stop-and-copy | page-table entries scanned vs dirty-page bytes |
//! | `fig5` | 1..=9 identical 1 MiB guests in one batch | negotiation messages, freeze time per process |
//! | `fig6` | 1..=9 guests sharing a 1 MiB region, dedup on and off | total bytes, region bytes, elapsed |
//!
//! Durations are in microseconds. Byte columns are deterministic; with
//! the same options two runs produce identical byte columns.

use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use procmig::control::{RequestSpec, Strategy};
use procmig::guest::{GuestSpec, Pid, RegionId, DEFAULT_PAGE_SIZE};
use procmig::medium::CHUNK_OVERHEAD;
use procmig::proto::{DaemonHandle, MigrationReport};
use procmig::subsystem::mem::REGION_PAGE_PREFIX_LEN;
use procmig::{Node, NodeConfig, NodeError};

use crate::workload::{RegionConfig, Workload, WorkloadError};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

pub const MIB: u64 = 1 << 20;
pub const SIZES_MIB: [u64; 5] = [1, 3, 5, 7, 9];
pub const MAX_PROCESSES: usize = 9;
pub const SHARED_REGION: RegionId = RegionId(1);
/// Private pages of each guest in the shared-region scenario.
pub const SHARED_SCENARIO_PRIVATE_PAGES: u64 = 16;

/// One CSV row. `latency` and `freeze_time` are microseconds; for rows
/// covering a whole batch they are the largest per-process value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BenchRow {
    pub scenario: String,
    pub n_processes: usize,
    pub address_space_bytes: u64,
    pub strategy: String,
    pub latency: u64,
    pub freeze_time: u64,
    pub negotiation_msgs: u64,
    pub bytes_pre_resume: u64,
    pub bytes_post_resume: u64,
    pub region_bytes_on_wire: u64,
    pub variant: String,
    pub pages_scanned: u64,
    pub trial: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Fig3,
    Fig4,
    Fig5,
    Fig6,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Fig3, Scenario::Fig4, Scenario::Fig5, Scenario::Fig6];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Fig3 => "fig3",
            Scenario::Fig4 => "fig4",
            Scenario::Fig5 => "fig5",
            Scenario::Fig6 => "fig6",
        }
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown scenario {s:?} (expected fig3, fig4, fig5 or fig6)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Loopback,
    Tcp,
}

impl FromStr for Transport {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loopback" => Ok(Transport::Loopback),
            "tcp" => Ok(Transport::Tcp),
            other => Err(format!("unknown transport {other:?} (expected loopback or tcp)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    /// Daemon of the in-process destination node.
    pub transport: Transport,
    /// Migrate to this external daemon instead of an in-process one.
    pub dest: Option<String>,
    pub trials: u32,
    pub sizes_mib: Vec<u64>,
    pub max_processes: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            transport: Transport::Loopback,
            dest: None,
            trials: 1,
            sizes_mib: SIZES_MIB.to_vec(),
            max_processes: MAX_PROCESSES,
        }
    }
}

/// A source node plus the daemon it migrates to.
pub struct Harness {
    pub source: Arc<Node>,
    pub dest: Option<Arc<Node>>,
    endpoint: String,
    _daemon: Option<DaemonHandle>,
}

static HARNESS: AtomicU32 = AtomicU32::new(0);

impl Harness {
    pub fn new(opts: &BenchOptions) -> Result<Self, NodeError> {
        let source = Node::new(NodeConfig::named("bench-src"));
        if let Some(ep) = &opts.dest {
            return Ok(Harness {
                source,
                dest: None,
                endpoint: ep.clone(),
                _daemon: None,
            });
        }
        let dest = Node::new(NodeConfig::named("bench-dst"));
        let listen = match opts.transport {
            Transport::Loopback => format!(
                "loopback:bench-{}-{}",
                std::process::id(),
                HARNESS.fetch_add(1, Ordering::SeqCst)
            ),
            Transport::Tcp => "127.0.0.1:0".to_string(),
        };
        let daemon = dest.start_daemon(&listen)?;
        Ok(Harness {
            source,
            endpoint: daemon.endpoint(),
            dest: Some(dest),
            _daemon: Some(daemon),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Spawns `workload` on the source and migrates all of it in one batch,
    /// then drops the migrated processes from an in-process destination.
    pub fn migrate(
        &self,
        workload: &Workload,
        strategy: Strategy,
        dedup: bool,
    ) -> Result<MigrationReport, BenchError> {
        let pids = workload.spawn_on(&self.source)?;
        let mut spec = RequestSpec::migrate(pids.clone(), &self.endpoint, strategy);
        spec.dedup = dedup;
        spec.workload = workload.live.map(Into::into);
        let result = self
            .source
            .run(spec)
            .map(|o| o.migration().expect("a migrate request reports a migration"));
        if result.is_err() {
            let mut host = self.source.host();
            for p in pids {
                host.remove(p);
            }
        }
        if let (Ok(r), Some(dest)) = (&result, &self.dest) {
            let mut host = dest.host();
            for p in &r.processes {
                host.remove(Pid(p.dest_pid));
            }
            for id in host.regions().ids() {
                host.regions().remove_unreferenced(id);
            }
        }
        Ok(result?)
    }
}

fn micros(d: Duration) -> u64 {
    d.as_micros() as u64
}

/// Wire bytes of one region page.
pub fn region_page_wire_bytes(page_size: usize) -> u64 {
    (CHUNK_OVERHEAD + REGION_PAGE_PREFIX_LEN + page_size) as u64
}

fn batch_row(
    scenario: Scenario,
    variant: &str,
    trial: u32,
    address_space_bytes: u64,
    r: &MigrationReport,
) -> BenchRow {
    let ps = &r.processes;
    BenchRow {
        scenario: scenario.name().into(),
        n_processes: ps.len(),
        address_space_bytes,
        strategy: r.strategy.name().into(),
        latency: ps.iter().map(|p| micros(p.latency)).max().unwrap_or(0),
        freeze_time: ps.iter().map(|p| micros(p.freeze_time)).max().unwrap_or(0),
        negotiation_msgs: r.negotiation_msgs,
        bytes_pre_resume: r.bytes_pre_resume(),
        bytes_post_resume: r.bytes_post_resume(),
        region_bytes_on_wire: ps
            .iter()
            .map(|p| p.region_pages * region_page_wire_bytes(DEFAULT_PAGE_SIZE))
            .sum(),
        variant: variant.into(),
        pages_scanned: ps.iter().map(|p| p.pages_scanned).sum(),
        trial,
    }
}

pub fn single_guest(bytes: u64, footprint: bool) -> Workload {
    Workload::single(GuestSpec::new(1, bytes).with_footprint(footprint))
}

pub fn identical_guests(n: usize, bytes: u64) -> Workload {
    Workload {
        regions: Vec::new(),
        guests: vec![(n, GuestSpec::new(1, bytes))],
        live: None,
    }
}

/// `n` guests each mapping the whole 1 MiB shared region after a few
/// private pages.
pub fn sharing_guests(n: usize) -> Workload {
    let page = DEFAULT_PAGE_SIZE as u64;
    let region_pages = MIB / page;
    let spec = GuestSpec::new(1, MIB + SHARED_SCENARIO_PRIVATE_PAGES * page).with_shared(
        SHARED_REGION,
        SHARED_SCENARIO_PRIVATE_PAGES,
        region_pages,
    );
    Workload {
        regions: vec![RegionConfig {
            id: SHARED_REGION.0,
            size: MIB as usize,
        }],
        guests: vec![(n, spec)],
        live: None,
    }
}

fn footprint_name(f: bool) -> &'static str {
    if f {
        "footprint"
    } else {
        "no-footprint"
    }
}

pub fn run(scenario: Scenario, opts: &BenchOptions) -> Result<Vec<BenchRow>, BenchError> {
    let h = Harness::new(opts)?;
    let mut rows = Vec::new();
    for trial in 0..opts.trials.max(1) {
        match scenario {
            Scenario::Fig3 => {
                for &mib in &opts.sizes_mib {
                    for footprint in [true, false] {
                        for strategy in [Strategy::StopAndCopy, Strategy::lazy()] {
                            let r = h.migrate(&single_guest(mib * MIB, footprint), strategy, true)?;
                            rows.push(batch_row(scenario, footprint_name(footprint), trial, mib * MIB, &r));
                        }
                    }
                }
            }
            Scenario::Fig4 => {
                for &mib in &opts.sizes_mib {
                    for footprint in [true, false] {
                        let r = h.migrate(&single_guest(mib * MIB, footprint), Strategy::StopAndCopy, true)?;
                        rows.push(batch_row(scenario, footprint_name(footprint), trial, mib * MIB, &r));
                    }
                }
            }
            Scenario::Fig5 => {
                for n in 1..=opts.max_processes {
                    let r = h.migrate(&identical_guests(n, MIB), Strategy::StopAndCopy, true)?;
                    for (i, p) in r.processes.iter().enumerate() {
                        rows.push(BenchRow {
                            scenario: scenario.name().into(),
                            n_processes: n,
                            address_space_bytes: MIB,
                            strategy: r.strategy.name().into(),
                            latency: micros(p.latency),
                            freeze_time: micros(p.freeze_time),
                            negotiation_msgs: r.negotiation_msgs,
                            bytes_pre_resume: p.bytes_pre_resume,
                            bytes_post_resume: p.bytes_post_resume,
                            region_bytes_on_wire: 0,
                            variant: format!("process-{i}"),
                            pages_scanned: p.pages_scanned,
                            trial,
                        });
                    }
                }
            }
            Scenario::Fig6 => {
                for n in 1..=opts.max_processes {
                    for dedup in [true, false] {
                        let w = sharing_guests(n);
                        let r = h.migrate(&w, Strategy::StopAndCopy, dedup)?;
                        let mut row = batch_row(
                            scenario,
                            if dedup { "dedup" } else { "no-dedup" },
                            trial,
                            w.guests[0].1.address_space_size_bytes,
                            &r,
                        );
                        row.latency = micros(r.elapsed);
                        rows.push(row);
                    }
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const CSV_HEADER: &str = "scenario,n_processes,address_space_bytes,strategy,latency,freeze_time,negotiation_msgs,bytes_pre_resume,bytes_post_resume,region_bytes_on_wire,variant,pages_scanned,trial";
