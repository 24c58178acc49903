use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use procmig::control::{ExecCtx, QuiesceMethod, RequestSpec, Strategy};
use procmig::guest::Pid;
use procmig::proto::{query_status, MigrationReport};
use procmig::subsystem::{descriptor_by_name, SubsystemRegistry};
use procmig::{Node, NodeConfig, NodeError, Outcome};

use procmig_cli::bench::{self, BenchError, BenchOptions, Scenario, Transport};
use procmig_cli::exit;
use procmig_cli::workload::Workload;

#[derive(Parser)]
#[command(name = "procmig", version, about = "Checkpoint, restart and migrate simulated guest processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve incoming migrations until killed.
    Daemon(DaemonArgs),
    /// Spawn a workload and print its processes.
    Spawn(SpawnArgs),
    /// Spawn a workload and migrate it to a daemon.
    Migrate(MigrateArgs),
    /// Spawn a workload and write one guest to an image file.
    Checkpoint(CheckpointArgs),
    /// Restore a process from an image file.
    Restart(RestartArgs),
    /// Run a benchmark scenario and write CSV rows.
    Bench(BenchArgs),
    /// Print a daemon's status as JSON.
    Status(StatusArgs),
    /// List the exit codes.
    ExitCodes,
}

#[derive(Args)]
struct NodeArgs {
    /// Subsystem modules to load.
    #[arg(long, value_delimiter = ',', default_value = "cpu,mem,file")]
    modules: Vec<String>,
    /// Watchdog period in milliseconds.
    #[arg(long = "watchdog-period", env = "PROCMIG_WATCHDOG_MS")]
    watchdog_ms: Option<u64>,
    #[arg(long)]
    page_size: Option<usize>,
}

#[derive(Args)]
struct DaemonArgs {
    #[arg(long, default_value = "0.0.0.0")]
    bind: String,
    /// Control port; data connections use the next port.
    #[arg(long, env = "PROCMIG_PORT", default_value_t = 7141)]
    port: u16,
    /// Full listen endpoint, overriding --bind and --port.
    #[arg(long)]
    endpoint: Option<String>,
    /// Media the daemon accepts.
    #[arg(long, value_delimiter = ',')]
    media: Option<Vec<String>>,
    #[arg(long, default_value = "dest")]
    name: String,
    #[command(flatten)]
    node: NodeArgs,
}

#[derive(Args)]
struct SpawnArgs {
    #[arg(long)]
    workload: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Quiesce {
    Sync,
    Async,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ctx {
    Internal,
    External,
}

#[derive(Args)]
struct MigrateArgs {
    #[arg(long)]
    workload: PathBuf,
    /// Daemon control endpoint (`host:port` or `loopback:name`).
    #[arg(long, env = "PROCMIG_DEST")]
    dest: String,
    /// Pids of the spawned guests to migrate (1 is the first); all by default.
    #[arg(long = "pid")]
    pids: Vec<u32>,
    /// stop-and-copy, pre-copy or lazy.
    #[arg(long, default_value = "stop-and-copy")]
    strategy: Strategy,
    #[arg(long)]
    max_rounds: Option<u32>,
    #[arg(long)]
    dirty_threshold: Option<u64>,
    #[arg(long)]
    prefetch: Option<u32>,
    #[arg(long, value_enum, default_value = "sync")]
    quiesce: Quiesce,
    #[arg(long, value_enum, default_value = "external")]
    exec_ctx: Ctx,
    /// Medium override; chosen from the endpoint by default.
    #[arg(long)]
    medium: Option<String>,
    /// Send shared regions once per process instead of once per batch.
    #[arg(long)]
    no_dedup: bool,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    node: NodeArgs,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    workload: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Pid of the spawned guest to checkpoint.
    #[arg(long, default_value_t = 1)]
    pid: u32,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    node: NodeArgs,
}

#[derive(Args)]
struct RestartArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    node: NodeArgs,
}

#[derive(Args)]
struct BenchArgs {
    scenario: Scenario,
    /// CSV output file; stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
    /// External daemon to migrate to instead of an in-process one.
    #[arg(long, env = "PROCMIG_DEST")]
    dest: Option<String>,
    #[arg(long, default_value = "loopback")]
    transport: Transport,
    #[arg(long, default_value_t = 1)]
    trials: u32,
    /// Guest sizes in MiB for fig3 and fig4.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7,9")]
    sizes: Vec<u64>,
    /// Largest batch for fig5 and fig6.
    #[arg(long, default_value_t = bench::MAX_PROCESSES)]
    max_processes: usize,
}

#[derive(Args)]
struct StatusArgs {
    #[arg(long, env = "PROCMIG_DEST")]
    dest: String,
    #[arg(long, default_value_t = 5000)]
    timeout_ms: u64,
}

/// A failure with its exit code.
struct Fail(u8, String);

impl From<NodeError> for Fail {
    fn from(e: NodeError) -> Self {
        Fail(exit::for_node(&e), e.to_string())
    }
}

impl From<procmig_cli::workload::WorkloadError> for Fail {
    fn from(e: procmig_cli::workload::WorkloadError) -> Self {
        Fail(exit::CONFIG, e.to_string())
    }
}

impl From<io::Error> for Fail {
    fn from(e: io::Error) -> Self {
        Fail(exit::OTHER, e.to_string())
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail(exit::OTHER, e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Daemon(a) => daemon(a),
        Command::Spawn(a) => spawn(a),
        Command::Migrate(a) => migrate(a),
        Command::Checkpoint(a) => checkpoint(a),
        Command::Restart(a) => restart(a),
        Command::Bench(a) => run_bench(a),
        Command::Status(a) => status(a),
        Command::ExitCodes => {
            for (code, what) in exit::ALL {
                println!("{code:>3}  {what}");
            }
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("procmig: {msg}");
            ExitCode::from(code)
        }
    }
}

fn build_node(name: &str, a: &NodeArgs) -> Result<std::sync::Arc<Node>, Fail> {
    let mut cfg = NodeConfig::named(name);
    if let Some(ms) = a.watchdog_ms {
        cfg.watchdog_period = Duration::from_millis(ms);
    }
    if let Some(ps) = a.page_size {
        cfg.page_size = ps;
    }
    let mut registry = SubsystemRegistry::new();
    for m in &a.modules {
        let d = descriptor_by_name(m).ok_or_else(|| Fail(exit::CONFIG, format!("unknown module {m:?}")))?;
        registry.register(d).map_err(|e| Fail(exit::CONFIG, e.to_string()))?;
    }
    Ok(Node::with_registry(cfg, registry))
}

fn print_json<T: Serialize>(v: &T) -> Result<(), Fail> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    match writeln!(out) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn daemon(a: DaemonArgs) -> Result<(), Fail> {
    let node = build_node(&a.name, &a.node)?;
    if let Some(media) = &a.media {
        let ids: Vec<&str> = media.iter().map(String::as_str).collect();
        node.restrict_media(&ids)
            .map_err(|e| Fail(exit::for_medium(&e), e.to_string()))?;
    }
    let listen = a.endpoint.unwrap_or_else(|| format!("{}:{}", a.bind, a.port));
    let handle = node.start_daemon(&listen)?;
    println!("listening on {}", handle.endpoint());
    println!("modules {}", node.status().subsystems.join(","));
    println!("media {}", node.media().join(","));
    io::stdout().flush()?;
    loop {
        std::thread::park();
    }
}

#[derive(Serialize)]
struct GuestDigest {
    pid: u32,
    digest: String,
}

fn digests(node: &Node, pids: &[Pid]) -> Result<Vec<GuestDigest>, Fail> {
    pids.iter()
        .map(|&p| {
            Ok(GuestDigest {
                pid: p.0,
                digest: node.digest(p)?.to_string(),
            })
        })
        .collect()
}

fn spawn(a: SpawnArgs) -> Result<(), Fail> {
    let w = Workload::load(&a.workload)?;
    let node = Node::new(NodeConfig::named("local"));
    let pids = w.spawn_on(&node)?;
    let d = digests(&node, &pids)?;
    if a.json {
        return print_json(&d);
    }
    for g in d {
        println!("pid {:>4}  {}", g.pid, g.digest);
    }
    Ok(())
}

fn pick(pids: &[Pid], wanted: &[u32]) -> Result<Vec<Pid>, Fail> {
    wanted
        .iter()
        .map(|&n| {
            pids.iter()
                .copied()
                .find(|p| p.0 == n)
                .ok_or_else(|| Fail(exit::CONFIG, format!("the workload spawned no pid {n}")))
        })
        .collect()
}

fn strategy_of(a: &MigrateArgs) -> Result<Strategy, Fail> {
    let misplaced = |flag: &str| {
        Fail(
            exit::USAGE,
            format!("{flag} does not apply to strategy {}", a.strategy),
        )
    };
    match a.strategy {
        Strategy::StopAndCopy => {
            if a.max_rounds.is_some() || a.dirty_threshold.is_some() {
                return Err(misplaced("--max-rounds/--dirty-threshold"));
            }
            if a.prefetch.is_some() {
                return Err(misplaced("--prefetch"));
            }
            Ok(Strategy::StopAndCopy)
        }
        Strategy::PreCopy { max_rounds, dirty_threshold } => {
            if a.prefetch.is_some() {
                return Err(misplaced("--prefetch"));
            }
            Ok(Strategy::PreCopy {
                max_rounds: a.max_rounds.unwrap_or(max_rounds),
                dirty_threshold: a.dirty_threshold.unwrap_or(dirty_threshold),
            })
        }
        Strategy::PostCopyLazy { prefetch } => {
            if a.max_rounds.is_some() || a.dirty_threshold.is_some() {
                return Err(misplaced("--max-rounds/--dirty-threshold"));
            }
            Ok(Strategy::PostCopyLazy {
                prefetch: a.prefetch.unwrap_or(prefetch),
            })
        }
    }
}

#[derive(Serialize)]
struct MigrateOutput<'a> {
    source_digests: Vec<GuestDigest>,
    report: &'a MigrationReport,
}

fn migrate(a: MigrateArgs) -> Result<(), Fail> {
    let strategy = strategy_of(&a)?;
    let w = Workload::load(&a.workload)?;
    let node = build_node("source", &a.node)?;
    let all = w.spawn_on(&node)?;
    let pids = if a.pids.is_empty() { all } else { pick(&all, &a.pids)? };
    let before = digests(&node, &pids)?;
    let mut spec = RequestSpec::migrate(pids, &a.dest, strategy);
    spec.quiesce = match a.quiesce {
        Quiesce::Sync => QuiesceMethod::Synchronous,
        Quiesce::Async => QuiesceMethod::Asynchronous,
    };
    spec.exec_ctx = match a.exec_ctx {
        Ctx::Internal => ExecCtx::Internal,
        Ctx::External => ExecCtx::External,
    };
    if let Some(m) = a.medium {
        spec.medium = m;
    }
    spec.dedup = !a.no_dedup;
    spec.workload = w.live.map(Into::into);
    let report = node
        .run(spec)?
        .migration()
        .expect("a migrate request reports a migration");
    if a.json {
        return print_json(&MigrateOutput {
            source_digests: before,
            report: &report,
        });
    }
    println!(
        "migrated {} process(es) with {} in {} us, {} negotiation messages",
        report.processes.len(),
        report.strategy,
        report.elapsed.as_micros(),
        report.negotiation_msgs
    );
    println!("  src   dst    freeze_us   latency_us    bytes_pre   bytes_post  digest");
    for (p, d) in report.processes.iter().zip(&before) {
        println!(
            "{:>5} {:>5} {:>12} {:>12} {:>12} {:>12}  {}",
            p.source_pid,
            p.dest_pid,
            p.freeze_time.as_micros(),
            p.latency.as_micros(),
            p.bytes_pre_resume,
            p.bytes_post_resume,
            d.digest
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckpointOutput {
    pid: u32,
    image: String,
    bytes: u64,
    chunks: u64,
    digest: String,
}

fn checkpoint(a: CheckpointArgs) -> Result<(), Fail> {
    let w = Workload::load(&a.workload)?;
    let node = build_node("local", &a.node)?;
    let pids = w.spawn_on(&node)?;
    let pid = pick(&pids, &[a.pid])?[0];
    let digest = node.digest(pid)?.to_string();
    let image = a.image.to_string_lossy().into_owned();
    let r = match node.run(RequestSpec::checkpoint(pid, &image))? {
        Outcome::Checkpointed(r) => r,
        other => unreachable!("checkpoint produced {other:?}"),
    };
    let out = CheckpointOutput {
        pid: r.pid,
        image,
        bytes: r.bytes,
        chunks: r.chunks,
        digest,
    };
    if a.json {
        return print_json(&out);
    }
    println!(
        "checkpointed pid {} to {} ({} bytes, {} chunks)  {}",
        out.pid, out.image, out.bytes, out.chunks, out.digest
    );
    Ok(())
}

fn restart(a: RestartArgs) -> Result<(), Fail> {
    let node = build_node("local", &a.node)?;
    let image = a.image.to_string_lossy().into_owned();
    let pid = node
        .run(RequestSpec::restart(&image))?
        .restarted_pid()
        .expect("a restart request reports a pid");
    let d = GuestDigest {
        pid: pid.0,
        digest: node.digest(pid)?.to_string(),
    };
    if a.json {
        return print_json(&d);
    }
    println!("restarted pid {}  {}", d.pid, d.digest);
    Ok(())
}

fn run_bench(a: BenchArgs) -> Result<(), Fail> {
    let opts = BenchOptions {
        transport: a.transport,
        dest: a.dest,
        trials: a.trials,
        sizes_mib: a.sizes,
        max_processes: a.max_processes,
    };
    let rows = bench::run(a.scenario, &opts).map_err(|e| match e {
        BenchError::Node(n) => Fail::from(n),
        BenchError::Workload(w) => Fail::from(w),
    })?;
    let written = match a.out {
        Some(path) => bench::write_csv(&rows, File::create(path)?),
        None => bench::write_csv(&rows, io::stdout().lock()),
    };
    written.map_err(|e| Fail(exit::OTHER, e.to_string()))
}

fn status(a: StatusArgs) -> Result<(), Fail> {
    let json = query_status(&a.dest, Duration::from_millis(a.timeout_ms))
        .map_err(|e| Fail(exit::for_medium(&e), e.to_string()))?;
    println!("{json}");
    Ok(())
}
