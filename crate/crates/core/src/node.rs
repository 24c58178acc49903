//! A node: a guest host with its subsystem registry, event table and the
//! entry point for checkpoint, restart and migration requests.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::Sender;
use parking_lot::{Condvar, Mutex, MutexGuard, RwLock, RwLockReadGuard};
use serde::Serialize;
use thiserror::Error;

use crate::control::{
    checkpoint_worker, restart_worker, ControlError, EventContext, EventKind, EventState,
    EventStatus, EventTable, NoHooks, ProcessHooks, RequestSpec, Session,
};
use crate::guest::{snapshot_digest, Digest, GuestError, GuestSpec, Host, Pid, ProcessRef, RunState};
use crate::ids::{MigrationToken, RequestId, SubsystemId};
use crate::medium::{
    ChannelConfig, Connection, MediumError, MediumRegistry, Role, FILE_ADVANCE_OFFSET,
    FILE_QUERY_OFFSET,
};
use crate::proto::msg::{FailureKind, RejectReason};
use crate::proto::{
    Boundary, DaemonHandle, Fault, FaultInjector, GuestDriver, Link, MigrationReport,
};
use crate::subsystem::{
    EventInfo, RegionAssembly, RegistryError, ResidualTable, SharedResourceLedger, StepEnv,
    SubsystemDescriptor, SubsystemRegistry, DEFAULT_BATCH_LIMIT,
};

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub name: String,
    pub page_size: usize,
    pub watchdog_period: Duration,
    pub batch_limit: usize,
    pub channel: ChannelConfig,
    /// Processes of one migration batch transferred at the same time.
    pub workers: usize,
    pub quiesce_deadline: Duration,
    pub handshake_timeout: Duration,
    /// How long a coordinator waits for resume acknowledgements, and a
    /// daemon for data connections, before giving up on a batch.
    pub commit_timeout: Duration,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            name: "node".into(),
            page_size: crate::guest::DEFAULT_PAGE_SIZE,
            watchdog_period: crate::control::DEFAULT_WATCHDOG_PERIOD,
            batch_limit: DEFAULT_BATCH_LIMIT,
            channel: ChannelConfig::default(),
            workers: thread::available_parallelism().map_or(1, |n| n.get()),
            quiesce_deadline: Duration::from_secs(1),
            handshake_timeout: Duration::from_secs(5),
            commit_timeout: Duration::from_secs(30),
        }
    }
}

impl NodeConfig {
    pub fn named(name: &str) -> Self {
        NodeConfig {
            name: name.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NodeError {
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("capability mismatch on {subsystem}: {detail}")]
    CapabilityMismatch { subsystem: String, detail: String },
    #[error("protocol version mismatch: {0}")]
    VersionMismatch(String),
    #[error("rejected by destination ({reason:?}) on {subject}: {detail}")]
    Rejected {
        reason: RejectReason,
        subject: String,
        detail: String,
    },
    #[error("destination failed ({}): {detail}", kind.as_str())]
    Remote { kind: FailureKind, detail: String },
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("source of the residual file is gone")]
    SourceGone,
    #[error("link cut by fault injection {0}")]
    Injected(Boundary),
}

impl From<MediumError> for NodeError {
    fn from(e: MediumError) -> Self {
        NodeError::Control(e.into())
    }
}

impl From<GuestError> for NodeError {
    fn from(e: GuestError) -> Self {
        NodeError::Control(e.into())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckpointReport {
    pub request_id: u64,
    pub pid: u32,
    pub image: String,
    pub bytes: u64,
    pub chunks: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RestartReport {
    pub request_id: u64,
    pub pid: u32,
    pub image: String,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "outcome", rename_all = "kebab-case")]
pub enum Outcome {
    Migrated(MigrationReport),
    Checkpointed(CheckpointReport),
    Restarted(RestartReport),
}

impl Outcome {
    pub fn migration(self) -> Option<MigrationReport> {
        match self {
            Outcome::Migrated(r) => Some(r),
            _ => None,
        }
    }

    pub fn restarted_pid(&self) -> Option<Pid> {
        match self {
            Outcome::Restarted(r) => Some(Pid(r.pid)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProcessStatus {
    pub pid: u32,
    pub run_state: String,
    pub threads: usize,
    pub pages: usize,
    pub non_resident: usize,
    /// Snapshot digest; absent while pages are still missing.
    pub digest: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct NodeStatus {
    pub name: String,
    pub subsystems: Vec<String>,
    pub processes: Vec<ProcessStatus>,
    pub events: Vec<EventStatus>,
}

pub(crate) struct Batch {
    pub events: Mutex<Vec<Arc<EventContext>>>,
    /// Set once every destination resumed; the batch can no longer be
    /// aborted.
    pub committed: AtomicBool,
    result: Mutex<Option<Result<Outcome, NodeError>>>,
    done: Condvar,
}

/// Where a destination forwards operations on a residual file.
#[derive(Clone)]
pub(crate) struct ResidualRoute {
    pub link: Arc<Link>,
    pub token: MigrationToken,
    pub source_pid: u32,
}

pub struct Node {
    pub(crate) config: NodeConfig,
    pub(crate) host: Mutex<Host>,
    pub(crate) registry: RwLock<SubsystemRegistry>,
    pub(crate) media: RwLock<MediumRegistry>,
    pub(crate) events: EventTable,
    pub(crate) residuals: Arc<ResidualTable>,
    pub(crate) hooks: RwLock<Arc<dyn ProcessHooks>>,
    pub(crate) driver: RwLock<Option<Arc<dyn GuestDriver>>>,
    pub(crate) faults: FaultInjector,
    next_request: AtomicU64,
    busy: Mutex<HashSet<Pid>>,
    batches: Mutex<HashMap<RequestId, Arc<Batch>>>,
    pub(crate) seen_tokens: Mutex<HashSet<MigrationToken>>,
    pub(crate) pending_data: Mutex<HashMap<(MigrationToken, u32), Sender<Connection>>>,
    pub(crate) residual_routes: Mutex<HashMap<Pid, ResidualRoute>>,
    source_links: Mutex<HashMap<MigrationToken, Arc<Link>>>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node").field("name", &self.config.name).finish()
    }
}

fn watchdog_loop(node: Weak<Node>, period: Duration) {
    let tick = (period / 4).clamp(Duration::from_millis(1), Duration::from_millis(50));
    loop {
        thread::sleep(tick);
        let Some(node) = node.upgrade() else {
            return;
        };
        for ev in node.events.watchdog_scan(Instant::now()) {
            log::warn!(
                "event {} (pid {}) frozen: no progress within {:?}",
                ev.request_id,
                ev.pid,
                ev.watchdog.period()
            );
        }
    }
}

impl Node {
    pub fn new(config: NodeConfig) -> Arc<Node> {
        Self::with_registry(config, SubsystemRegistry::with_builtins())
    }

    pub fn with_registry(config: NodeConfig, registry: SubsystemRegistry) -> Arc<Node> {
        let period = config.watchdog_period;
        let node = Arc::new(Node {
            media: RwLock::new(MediumRegistry::with_defaults(config.channel.buffer_size)),
            config,
            host: Mutex::new(Host::new()),
            registry: RwLock::new(registry),
            events: EventTable::default(),
            residuals: Arc::new(ResidualTable::default()),
            hooks: RwLock::new(Arc::new(NoHooks)),
            driver: RwLock::new(None),
            faults: FaultInjector::default(),
            next_request: AtomicU64::new(1),
            busy: Mutex::new(HashSet::new()),
            batches: Mutex::new(HashMap::new()),
            seen_tokens: Mutex::new(HashSet::new()),
            pending_data: Mutex::new(HashMap::new()),
            residual_routes: Mutex::new(HashMap::new()),
            source_links: Mutex::new(HashMap::new()),
        });
        let weak = Arc::downgrade(&node);
        thread::Builder::new()
            .name("procmig-watchdog".into())
            .spawn(move || watchdog_loop(weak, period))
            .expect("spawn watchdog");
        node
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn host(&self) -> MutexGuard<'_, Host> {
        self.host.lock()
    }

    pub fn spawn(&self, spec: &GuestSpec) -> Result<Pid, NodeError> {
        Ok(self.host.lock().spawn_guest(spec)?)
    }

    pub fn process(&self, pid: Pid) -> Option<ProcessRef> {
        self.host.lock().get(pid).ok()
    }

    pub fn pids(&self) -> Vec<Pid> {
        self.host.lock().pids()
    }

    /// Digest of a process with every page resident.
    pub fn digest(&self, pid: Pid) -> Result<Digest, NodeError> {
        let (p, regions) = {
            let host = self.host.lock();
            (host.get(pid)?, host.regions().clone())
        };
        let p = p.lock();
        Ok(snapshot_digest(&p, &regions, true)?)
    }

    pub fn registry(&self) -> RwLockReadGuard<'_, SubsystemRegistry> {
        self.registry.read()
    }

    pub fn register(&self, d: SubsystemDescriptor) -> Result<SubsystemId, NodeError> {
        Ok(self.registry.write().register(d)?)
    }

    pub fn unregister(&self, id: SubsystemId) -> Result<(), NodeError> {
        Ok(self.registry.write().unregister(id)?)
    }

    /// Limits the media this node uses and accepts to `ids`.
    pub fn restrict_media(&self, ids: &[&str]) -> Result<(), MediumError> {
        let mut media = self.media.write();
        *media = media.clone().only(ids)?;
        Ok(())
    }

    pub fn media(&self) -> Vec<String> {
        self.media.read().ids().into_iter().map(str::to_string).collect()
    }

    pub fn set_hooks(&self, hooks: Arc<dyn ProcessHooks>) {
        *self.hooks.write() = hooks;
    }

    /// Installs the code a destination runs on each process right after
    /// it resumes.
    pub fn set_guest_driver(&self, driver: Option<Arc<dyn GuestDriver>>) {
        *self.driver.write() = driver;
    }

    /// Arms a fault for the next migration this node coordinates.
    pub fn inject(&self, fault: Fault) {
        self.faults.arm(fault);
    }

    pub(crate) fn next_request_id(&self) -> RequestId {
        RequestId(self.next_request.fetch_add(1, Ordering::SeqCst))
    }

    pub(crate) fn step_env(&self, dedup: bool) -> StepEnv {
        StepEnv {
            regions: self.host.lock().regions().clone(),
            ledger: Arc::new(SharedResourceLedger::new(dedup)),
            assembly: Arc::new(RegionAssembly::default()),
            residuals: self.residuals.clone(),
        }
    }

    pub(crate) fn new_event(
        &self,
        request_id: RequestId,
        pid: Pid,
        source_pid: Pid,
        token: Option<MigrationToken>,
        spec: &RequestSpec,
    ) -> Arc<EventContext> {
        let ev = Arc::new(EventContext::new(
            request_id,
            pid,
            source_pid,
            token,
            spec.kind,
            spec.strategy,
            spec.exec_ctx,
            spec.quiesce,
            self.config.watchdog_period,
            self.hooks.read().clone(),
        ));
        ev.advance(EventState::Prepared).expect("fresh event");
        self.events.insert(ev.clone());
        ev
    }

    /// Validates `spec`, creates its events and starts the batch in the
    /// background.
    pub fn submit(self: &Arc<Self>, spec: RequestSpec) -> Result<RequestId, NodeError> {
        {
            let media = self.media.read();
            let medium = media
                .get(&spec.medium)
                .map_err(|_| ControlError::UnknownMedium(spec.medium.clone()))?;
            spec.validate(medium)?;
        }
        if spec.kind == EventKind::Checkpoint && spec.pids.len() != 1 {
            return Err(ControlError::InvalidCombination("a checkpoint image holds one process").into());
        }
        {
            let host = self.host.lock();
            if let Some(p) = spec.pids.iter().find(|p| !host.contains(**p)) {
                return Err(ControlError::UnknownPid(*p).into());
            }
        }
        {
            let mut busy = self.busy.lock();
            let mut seen = HashSet::new();
            if let Some(p) = spec
                .pids
                .iter()
                .find(|p| busy.contains(*p) || !seen.insert(**p))
            {
                return Err(ControlError::Busy(*p).into());
            }
            busy.extend(spec.pids.iter().copied());
        }
        let id = self.next_request_id();
        let token = (spec.kind == EventKind::Migrate).then(MigrationToken::random);
        let events = spec
            .pids
            .iter()
            .map(|&pid| self.new_event(id, pid, pid, token, &spec))
            .collect();
        let batch = Arc::new(Batch {
            events: Mutex::new(events),
            committed: AtomicBool::new(false),
            result: Mutex::new(None),
            done: Condvar::new(),
        });
        self.batches.lock().insert(id, batch.clone());
        let node = self.clone();
        thread::Builder::new()
            .name(format!("procmig-batch-{}", id.0))
            .spawn(move || {
                let result = node.execute(id, token, &spec, &batch);
                {
                    let mut busy = node.busy.lock();
                    for p in &spec.pids {
                        busy.remove(p);
                    }
                }
                *batch.result.lock() = Some(result);
                batch.done.notify_all();
            })
            .expect("spawn batch");
        Ok(id)
    }

    /// Blocks until the batch ends.
    pub fn wait(&self, id: RequestId) -> Result<Outcome, NodeError> {
        let batch = self
            .batches
            .lock()
            .get(&id)
            .cloned()
            .ok_or(ControlError::NotFound(id))?;
        let mut r = batch.result.lock();
        while r.is_none() {
            batch.done.wait(&mut r);
        }
        r.clone().expect("set")
    }

    /// Submits and waits.
    pub fn run(self: &Arc<Self>, spec: RequestSpec) -> Result<Outcome, NodeError> {
        let id = self.submit(spec)?;
        self.wait(id)
    }

    /// Aborts a batch that has not reached its commit point.
    pub fn abort(&self, id: RequestId) -> Result<(), ControlError> {
        let batch = self
            .batches
            .lock()
            .get(&id)
            .cloned()
            .ok_or(ControlError::NotFound(id))?;
        let events = batch.events.lock().clone();
        if batch.committed.load(Ordering::SeqCst)
            || batch.result.lock().is_some()
            || events.iter().all(|e| e.state().is_terminal())
        {
            return Err(ControlError::AlreadyTerminal(id));
        }
        for ev in &events {
            ev.request_abort("aborted by request");
        }
        Ok(())
    }

    pub fn events(&self, id: RequestId) -> Option<Vec<Arc<EventContext>>> {
        self.events.get(id)
    }

    pub fn event_status(&self, id: RequestId) -> Option<Vec<EventStatus>> {
        self.events
            .get(id)
            .map(|evs| evs.iter().map(|e| e.status()).collect())
    }

    pub fn status(&self) -> NodeStatus {
        let processes = {
            let host = self.host.lock();
            host.pids()
                .into_iter()
                .filter_map(|pid| host.get(pid).ok())
                .map(|p| {
                    let p = p.lock();
                    ProcessStatus {
                        pid: p.pid.0,
                        run_state: format!("{:?}", p.run_state),
                        threads: p.threads.len(),
                        pages: p.address_space.pages.len(),
                        non_resident: p.address_space.non_resident_count(),
                        digest: snapshot_digest(&p, host.regions(), true).ok().map(|d| d.to_string()),
                    }
                })
                .collect()
        };
        NodeStatus {
            name: self.config.name.clone(),
            subsystems: self
                .registry
                .read()
                .capabilities()
                .iter()
                .map(|c| c.to_string())
                .collect(),
            processes,
            events: self.events.all().iter().map(|e| e.status()).collect(),
        }
    }

    /// Listens for migration batches on `endpoint`.
    pub fn start_daemon(self: &Arc<Self>, endpoint: &str) -> Result<DaemonHandle, NodeError> {
        crate::proto::start_daemon(self.clone(), endpoint)
    }

    /// Runs a residual-file operation for a migrated process on this
    /// (destination) node against its source.
    pub fn residual_file_op(&self, pid: Pid, fd: u32, op: u8, arg: u64) -> Result<u64, NodeError> {
        if op != FILE_QUERY_OFFSET && op != FILE_ADVANCE_OFFSET {
            return Err(ControlError::InvalidCombination("unknown residual file operation").into());
        }
        let route = self
            .residual_routes
            .lock()
            .get(&pid)
            .cloned()
            .ok_or(NodeError::SourceGone)?;
        route
            .link
            .residual_op(
                route.token,
                route.source_pid,
                fd,
                op,
                arg,
                self.config.handshake_timeout,
            )
            .map_err(|_| NodeError::Timeout("residual file reply"))?
            .ok_or(NodeError::SourceGone)
    }

    /// Drops the source-side records of a migrated batch; later residual
    /// operations from its destination get `SourceGone`.
    pub fn release_residuals(&self, token: MigrationToken) {
        self.residuals.release(token);
        if let Some(link) = self.source_links.lock().remove(&token) {
            link.close();
        }
    }

    pub(crate) fn keep_source_link(&self, token: MigrationToken, link: Arc<Link>) {
        self.source_links.lock().insert(token, link);
    }

    fn execute(
        self: &Arc<Self>,
        id: RequestId,
        token: Option<MigrationToken>,
        spec: &RequestSpec,
        batch: &Arc<Batch>,
    ) -> Result<Outcome, NodeError> {
        match spec.kind {
            EventKind::Migrate => {
                let events = batch.events.lock().clone();
                crate::proto::migrate(
                    self,
                    id,
                    token.expect("migrations carry a token"),
                    spec,
                    &events,
                    &batch.committed,
                )
                .map(Outcome::Migrated)
            }
            EventKind::Checkpoint => self.checkpoint_image(id, spec, batch),
            EventKind::Restart => self.restart_image(id, spec, batch),
        }
    }

    fn session(&self, ev: &EventContext, source_pid: Pid, dedup: bool) -> Session {
        Session::new(
            EventInfo {
                request_id: ev.request_id,
                token: ev.token,
                source_pid,
            },
            self.registry.read().ordered(),
            self.step_env(dedup),
            self.config.batch_limit,
        )
    }

    fn checkpoint_image(
        &self,
        id: RequestId,
        spec: &RequestSpec,
        batch: &Batch,
    ) -> Result<Outcome, NodeError> {
        let ev = batch.events.lock()[0].clone();
        let process = self.host.lock().get(ev.pid)?;
        let _lease = self.registry.read().lease();
        let mut session = self.session(&ev, ev.pid, spec.dedup);
        let mut ch = match self.media.read().open_channel(
            &spec.medium,
            &spec.endpoint,
            Role::Sender,
            self.config.channel,
        ) {
            Ok(ch) => ch,
            Err(e) => {
                ev.fail(&e.to_string());
                ev.run_cleanup(Some(&process.lock()));
                return Err(e.into());
            }
        };
        checkpoint_worker(&ev, &mut session, &process, &mut ch, self.config.quiesce_deadline)?;
        ch.close()?;
        let stats = ch.stats();
        Ok(Outcome::Checkpointed(CheckpointReport {
            request_id: id.0,
            pid: ev.pid.0,
            image: spec.endpoint.clone(),
            bytes: stats.bytes_pushed,
            chunks: stats.chunks_pushed,
        }))
    }

    fn restart_image(
        &self,
        id: RequestId,
        spec: &RequestSpec,
        batch: &Batch,
    ) -> Result<Outcome, NodeError> {
        let (pid, frame) = self.host.lock().create_frame(self.config.page_size);
        let ev = self.new_event(id, pid, pid, None, spec);
        batch.events.lock().push(ev.clone());
        let _lease = self.registry.read().lease();
        let mut session = self.session(&ev, pid, spec.dedup);
        let result = self
            .media
            .read()
            .open_channel(&spec.medium, &spec.endpoint, Role::Receiver, self.config.channel)
            .map_err(ControlError::from)
            .and_then(|mut ch| restart_worker(&ev, &mut session, &frame, &mut ch));
        match result {
            Ok(()) => {
                ev.advance(EventState::Done)?;
                ev.run_cleanup(Some(&frame.lock()));
                Ok(Outcome::Restarted(RestartReport {
                    request_id: id.0,
                    pid: pid.0,
                    image: spec.endpoint.clone(),
                }))
            }
            Err(e) => {
                if !ev.state().is_terminal() {
                    session.record_failure(&ev, &e);
                }
                self.host.lock().remove(pid);
                ev.run_cleanup(None);
                Err(e.into())
            }
        }
    }

    /// Pids currently in the given run state.
    pub fn pids_in(&self, state: RunState) -> Vec<Pid> {
        let host = self.host.lock();
        host.pids()
            .into_iter()
            .filter(|p| host.get(*p).map(|r| r.lock().run_state == state).unwrap_or(false))
            .collect()
    }
}
