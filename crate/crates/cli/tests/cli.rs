use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use procmig::medium::{CHUNK_MAGIC, IMAGE_MAGIC};
use procmig_cli::exit;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_procmig"))
}

fn workload(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../workloads").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> u8 {
    o.status.code().expect("exited normally") as u8
}

fn stdout(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}\n{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
    })
}

struct Daemon {
    child: Child,
    endpoint: String,
    lines: Vec<String>,
}

impl Daemon {
    fn start(extra: &[&str]) -> Daemon {
        let mut child = bin()
            .args(["daemon", "--bind", "127.0.0.1", "--port", "0"])
            .args(extra)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut out = BufReader::new(child.stdout.take().unwrap());
        let mut lines = Vec::new();
        for _ in 0..3 {
            let mut l = String::new();
            out.read_line(&mut l).unwrap();
            lines.push(l.trim().to_string());
        }
        let endpoint = lines[0].strip_prefix("listening on ").expect("endpoint line").to_string();
        Daemon { child, endpoint, lines }
    }

    fn status(&self) -> serde_json::Value {
        stdout(&run(&["status", "--dest", &self.endpoint]))
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn dest_digest(status: &serde_json::Value, pid: &serde_json::Value) -> String {
    status["processes"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| &p["pid"] == pid)
        .unwrap()["digest"]
        .as_str()
        .unwrap()
        .to_string()
}

#[test]
fn migrates_to_a_daemon_process_over_tcp() {
    let d = Daemon::start(&[]);
    for (file, strategy) in [
        ("shared-9x1mib.toml", "stop-and-copy"),
        ("single-1mib.toml", "pre-copy"),
        ("files.toml", "lazy"),
    ] {
        let o = run(&[
            "migrate", "--json", "--workload", workload(file).to_str().unwrap(), "--dest", &d.endpoint,
            "--strategy", strategy,
        ]);
        assert_eq!(code(&o), exit::OK, "{}", String::from_utf8_lossy(&o.stderr));
        let v = stdout(&o);
        let status = d.status();
        let procs = v["report"]["processes"].as_array().unwrap();
        for (p, src) in procs.iter().zip(v["source_digests"].as_array().unwrap()) {
            assert_eq!(dest_digest(&status, &p["dest_pid"]), src["digest"].as_str().unwrap(), "{file}");
        }
        assert_eq!(v["report"]["negotiation_msgs"], 2 + procs.len() as u64);
    }
}

#[test]
fn failures_map_to_their_exit_codes() {
    let single = workload("single-1mib.toml");
    let single = single.to_str().unwrap();
    let o = run(&["migrate", "--workload", single, "--dest", "127.0.0.1:1", "--exec-ctx", "internal", "--quiesce", "async"]);
    assert_eq!(code(&o), exit::INVALID_COMBINATION);
    let o = run(&["migrate", "--workload", single, "--dest", "127.0.0.1:1"]);
    assert_eq!(code(&o), exit::CONNECT_REFUSED);
    let o = run(&["migrate", "--workload", single, "--dest", "/tmp/x.img", "--strategy", "lazy", "--medium", "image-file"]);
    assert_eq!(code(&o), exit::INVALID_COMBINATION);
    let o = run(&["migrate", "--workload", single, "--dest", "127.0.0.1:1", "--pid", "2"]);
    assert_eq!(code(&o), exit::CONFIG);
    let o = run(&["migrate", "--workload", single, "--dest", "127.0.0.1:1", "--prefetch", "3"]);
    assert_eq!(code(&o), exit::USAGE);
    let o = run(&["migrate", "--workload", "/nonexistent.toml", "--dest", "127.0.0.1:1"]);
    assert_eq!(code(&o), exit::CONFIG);
    let o = run(&["daemon", "--modules", "cpu,gpu", "--port", "0"]);
    assert_eq!(code(&o), exit::CONFIG);
    let o = run(&["bogus"]);
    assert_eq!(code(&o), exit::USAGE);
}

#[test]
fn busy_port_is_reported() {
    let d = Daemon::start(&[]);
    let o = run(&["daemon", "--endpoint", &d.endpoint]);
    assert_eq!(code(&o), exit::PORT_BUSY);
}

#[test]
fn daemon_loads_only_the_named_modules() {
    let d = Daemon::start(&["--modules", "cpu,mem", "--media", "stream"]);
    assert!(d.lines[1].contains("cpu") && d.lines[1].contains("mem"));
    assert!(!d.lines[1].contains("file"));
    assert_eq!(d.lines[2], "media stream");
    let subs = d.status()["subsystems"].as_array().unwrap().len();
    assert_eq!(subs, 2);
    // The source has a file module the destination lacks.
    let o = run(&["migrate", "--workload", workload("files.toml").to_str().unwrap(), "--dest", &d.endpoint]);
    assert_eq!(code(&o), exit::CAPABILITY_MISMATCH, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("file"));
}

#[test]
fn checkpoint_and_restart_through_an_image_file() {
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("g.img");
    let image = image.to_str().unwrap();
    let files = workload("files.toml");
    let o = run(&["checkpoint", "--json", "--workload", files.to_str().unwrap(), "--image", image]);
    assert_eq!(code(&o), exit::OK, "{}", String::from_utf8_lossy(&o.stderr));
    let saved = stdout(&o);
    assert_eq!(
        std::fs::metadata(image).unwrap().len(),
        IMAGE_MAGIC.len() as u64 + saved["bytes"].as_u64().unwrap()
    );

    let o = run(&["restart", "--json", "--image", image]);
    assert_eq!(code(&o), exit::OK);
    assert_eq!(stdout(&o)["digest"], saved["digest"]);

    let o = run(&["restart", "--image", image, "--modules", "cpu,mem"]);
    assert_eq!(code(&o), exit::UNKNOWN_SUBSYSTEM);

    let full = std::fs::read(image).unwrap();
    let last = full.windows(4).rposition(|w| w == CHUNK_MAGIC).unwrap();
    std::fs::write(image, &full[..last]).unwrap();
    let o = run(&["restart", "--image", image]);
    assert_eq!(code(&o), exit::TRUNCATED_STREAM);

    let o = run(&["restart", "--image", dir.path().join("missing.img").to_str().unwrap()]);
    assert_eq!(code(&o), exit::OTHER);
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fig5.csv");
    let o = run(&["bench", "fig5", "--max-processes", "3", "--transport", "tcp", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), exit::OK, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), procmig_cli::bench::CSV_HEADER);
    assert_eq!(text.lines().count(), 1 + 1 + 2 + 3);
}
