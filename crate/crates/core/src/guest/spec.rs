//! Declarative guest configuration.
//!
//! A guest is described by a small TOML document:
//!
//! ```toml
//! threads = 2
//! address_space = 1048576   # bytes, a multiple of page_size
//! page_size = 4096          # optional, defaults to 4096
//! footprint = true          # optional; false spawns clean zero pages
//!
//! [[shared]]
//! region = 1                # id of a region created on the node
//! base_page = 0
//! pages = 1
//!
//! [[files]]
//! fd = 3
//! path = "/var/log/app.log"
//! mode = "write"            # read | write | readwrite
//! policy = "transfer"       # use-local | transfer | forward-to-source
//! offset = 0
//! ```

use serde::Deserialize;

use super::{FileMode, GuestError, RegionId, ResourcePolicy, DEFAULT_PAGE_SIZE};

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct SharedAttachment {
    #[serde(rename = "region", deserialize_with = "region_id")]
    pub region: RegionId,
    pub base_page: u64,
    #[serde(rename = "pages")]
    pub page_count: u64,
}

fn region_id<'de, D: serde::Deserializer<'de>>(d: D) -> Result<RegionId, D::Error> {
    u64::deserialize(d).map(RegionId)
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct FileSpec {
    pub fd: u32,
    pub path: String,
    pub mode: FileMode,
    pub policy: ResourcePolicy,
    #[serde(default)]
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuestSpec {
    #[serde(rename = "threads")]
    pub thread_count: usize,
    #[serde(rename = "address_space")]
    pub address_space_size_bytes: u64,
    #[serde(default = "default_page_size")]
    pub page_size: usize,
    #[serde(default = "default_footprint")]
    pub footprint: bool,
    #[serde(default, rename = "shared")]
    pub shared_attachments: Vec<SharedAttachment>,
    #[serde(default)]
    pub files: Vec<FileSpec>,
}

fn default_page_size() -> usize {
    DEFAULT_PAGE_SIZE
}

fn default_footprint() -> bool {
    true
}

impl GuestSpec {
    pub fn new(thread_count: usize, address_space_size_bytes: u64) -> Self {
        GuestSpec {
            thread_count,
            address_space_size_bytes,
            page_size: DEFAULT_PAGE_SIZE,
            footprint: true,
            shared_attachments: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn with_page_size(mut self, page_size: usize) -> Self {
        self.page_size = page_size;
        self
    }

    pub fn with_footprint(mut self, footprint: bool) -> Self {
        self.footprint = footprint;
        self
    }

    pub fn with_shared(mut self, region: RegionId, base_page: u64, page_count: u64) -> Self {
        self.shared_attachments.push(SharedAttachment {
            region,
            base_page,
            page_count,
        });
        self
    }

    pub fn with_file(mut self, file: FileSpec) -> Self {
        self.files.push(file);
        self
    }

    pub fn page_count(&self) -> u64 {
        self.address_space_size_bytes / self.page_size as u64
    }

    pub fn parse(text: &str) -> Result<Self, GuestError> {
        toml::from_str(text).map_err(|e| GuestError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), GuestError> {
        if self.thread_count == 0 {
            return Err(GuestError::ZeroThreads);
        }
        if !self.page_size.is_power_of_two() {
            return Err(GuestError::BadPageSize(self.page_size));
        }
        if !self.address_space_size_bytes.is_multiple_of(self.page_size as u64) {
            return Err(GuestError::Unaligned {
                size: self.address_space_size_bytes,
                page_size: self.page_size,
            });
        }
        let mut fds: Vec<u32> = self.files.iter().map(|f| f.fd).collect();
        fds.sort_unstable();
        if let Some(w) = fds.windows(2).find(|w| w[0] == w[1]) {
            return Err(GuestError::DuplicateFd(w[0]));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_documented_schema() {
        let spec = GuestSpec::parse(
            r#"
threads = 2
address_space = 8192

[[shared]]
region = 7
base_page = 1
pages = 1

[[files]]
fd = 3
path = "/tmp/a"
mode = "readwrite"
policy = "forward-to-source"
offset = 12
"#,
        )
        .unwrap();
        assert_eq!(spec.thread_count, 2);
        assert_eq!(spec.page_size, 4096);
        assert!(spec.footprint);
        assert_eq!(spec.page_count(), 2);
        assert_eq!(spec.shared_attachments[0].region, RegionId(7));
        assert_eq!(spec.files[0].policy, ResourcePolicy::ForwardToSource);
        assert_eq!(spec.files[0].offset, 12);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(matches!(
            GuestSpec::parse("threads = 1\naddress_space = 0\nbogus = 1"),
            Err(GuestError::Config(_))
        ));
    }

    #[test]
    fn validation_errors() {
        assert_eq!(GuestSpec::new(0, 0).validate(), Err(GuestError::ZeroThreads));
        assert!(matches!(
            GuestSpec::new(1, 100).validate(),
            Err(GuestError::Unaligned { .. })
        ));
        assert_eq!(
            GuestSpec::new(1, 0).with_page_size(1000).validate(),
            Err(GuestError::BadPageSize(1000))
        );
    }
}
