//! Workload configs: the guests a CLI invocation hosts.
//!
//! ```toml
//! version = 1
//!
//! [[regions]]
//! id = 1
//! size = 1048576
//!
//! [[guests]]
//! count = 3                 # optional, default 1
//! threads = 2
//! address_space = 1048576
//! footprint = true
//! shared = [{ region = 1, base_page = 0, pages = 256 }]
//!
//! [live]                    # optional: guest writes during pre-copy rounds
//! steps = 2
//! write_rate = 4
//! seed = 7
//! ```
//!
//! Every other key of a `[[guests]]` entry is a guest spec key (see
//! `procmig::guest::GuestSpec`).

use std::path::Path;

use serde::Deserialize;

use procmig::control::LiveWorkload;
use procmig::guest::{GuestSpec, Pid, RegionId};
use procmig::Node;

pub const WORKLOAD_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("cannot read {path}: {err}")]
    Read { path: String, err: std::io::Error },
    #[error("bad workload config: {0}")]
    Parse(String),
    #[error("workload config version {0} is not supported (expected {WORKLOAD_VERSION})")]
    Version(u32),
    #[error("guest entry {index}: {err}")]
    Guest { index: usize, err: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub id: u64,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveConfig {
    pub steps: u64,
    pub write_rate: u64,
    #[serde(default)]
    pub seed: u64,
}

impl From<LiveConfig> for LiveWorkload {
    fn from(l: LiveConfig) -> Self {
        LiveWorkload {
            steps: l.steps,
            write_rate: l.write_rate,
            seed: l.seed,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    version: u32,
    #[serde(default)]
    regions: Vec<RegionConfig>,
    #[serde(default)]
    guests: Vec<toml::Table>,
    live: Option<LiveConfig>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workload {
    pub regions: Vec<RegionConfig>,
    /// Guest specs with their repeat counts.
    pub guests: Vec<(usize, GuestSpec)>,
    pub live: Option<LiveConfig>,
}

impl Workload {
    pub fn parse(text: &str) -> Result<Self, WorkloadError> {
        let raw: Raw = toml::from_str(text).map_err(|e| WorkloadError::Parse(e.to_string()))?;
        if raw.version != WORKLOAD_VERSION {
            return Err(WorkloadError::Version(raw.version));
        }
        let mut guests = Vec::new();
        for (index, mut t) in raw.guests.into_iter().enumerate() {
            let count = match t.remove("count") {
                None => 1,
                Some(toml::Value::Integer(n)) if n >= 0 => n as usize,
                Some(v) => {
                    return Err(WorkloadError::Guest {
                        index,
                        err: format!("count must be a non-negative integer, not {v}"),
                    })
                }
            };
            let spec = GuestSpec::deserialize(toml::Value::Table(t)).map_err(|e| WorkloadError::Guest {
                index,
                err: e.to_string(),
            })?;
            guests.push((count, spec));
        }
        Ok(Workload {
            regions: raw.regions,
            guests,
            live: raw.live,
        })
    }

    pub fn load(path: &Path) -> Result<Self, WorkloadError> {
        let text = std::fs::read_to_string(path).map_err(|err| WorkloadError::Read {
            path: path.display().to_string(),
            err,
        })?;
        Self::parse(&text)
    }

    /// One guest of `spec`, nothing else.
    pub fn single(spec: GuestSpec) -> Self {
        Workload {
            regions: Vec::new(),
            guests: vec![(1, spec)],
            live: None,
        }
    }

    pub fn guest_count(&self) -> usize {
        self.guests.iter().map(|(n, _)| n).sum()
    }

    /// Creates the regions and spawns the guests on `node`, in file order.
    pub fn spawn_on(&self, node: &Node) -> Result<Vec<Pid>, WorkloadError> {
        {
            let mut host = node.host();
            for r in &self.regions {
                if !host.regions().contains(RegionId(r.id)) {
                    host.create_region(RegionId(r.id), r.size);
                }
            }
        }
        let mut pids = Vec::with_capacity(self.guest_count());
        for (index, (count, spec)) in self.guests.iter().enumerate() {
            for _ in 0..*count {
                let pid = node.spawn(spec).map_err(|e| WorkloadError::Guest {
                    index,
                    err: e.to_string(),
                })?;
                pids.push(pid);
            }
        }
        Ok(pids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use procmig::NodeConfig;

    const SAMPLE: &str = r#"
version = 1

[[regions]]
id = 4
size = 8192

[[guests]]
count = 2
threads = 1
address_space = 16384
shared = [{ region = 4, base_page = 0, pages = 2 }]

[[guests]]
threads = 3
address_space = 4096
footprint = false

[live]
steps = 2
write_rate = 1
"#;

    #[test]
    fn parses_and_spawns() {
        let w = Workload::parse(SAMPLE).unwrap();
        assert_eq!(w.guest_count(), 3);
        assert_eq!(w.live, Some(LiveConfig { steps: 2, write_rate: 1, seed: 0 }));
        let node = Node::new(NodeConfig::named("t"));
        let pids = w.spawn_on(&node).unwrap();
        assert_eq!(pids.len(), 3);
        assert_eq!(node.host().regions().refcount(RegionId(4)), 2);
        let p = node.process(pids[2]).unwrap();
        assert_eq!(p.lock().threads.len(), 3);
        assert_eq!(p.lock().address_space.dirty_count(), 0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Workload::parse("version = 2"), Err(WorkloadError::Version(2))));
        assert!(matches!(
            Workload::parse("version = 1\n[[guests]]\nthreads = 1\naddress_space = 0\ncolour = 1"),
            Err(WorkloadError::Guest { index: 0, .. })
        ));
        assert!(matches!(
            Workload::parse("version = 1\n[[guests]]\ncount = -1\nthreads = 1\naddress_space = 0"),
            Err(WorkloadError::Guest { .. })
        ));
        assert!(matches!(Workload::parse("version = 1\nbogus = 1"), Err(WorkloadError::Parse(_))));
    }

    #[test]
    fn checked_in_workloads_parse() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../workloads");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                let w = Workload::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                let node = Node::new(NodeConfig::named("t"));
                w.spawn_on(&node).unwrap();
                n += 1;
            }
        }
        assert!(n >= 3);
    }
}
