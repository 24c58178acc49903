use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::SubsystemId;

use super::SubsystemDescriptor;

/// What a node advertises about one subsystem during the handshake.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Capability {
    pub id: SubsystemId,
    pub version: u32,
    pub order_key: i32,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} v{} @{}", self.id, self.version, self.order_key)
    }
}

impl Serialize for Capability {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        (self.id.as_str(), self.version, self.order_key).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Capability {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let (id, version, order_key) = <(String, u32, i32)>::deserialize(d)?;
        Ok(Capability {
            id: SubsystemId::new(&id).map_err(serde::de::Error::custom)?,
            version,
            order_key,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("subsystem {0} is already registered")]
    DuplicateId(SubsystemId),
    #[error("subsystem {0} is not registered")]
    NotFound(SubsystemId),
    #[error("registry is in use by active events; cannot change subsystem {0}")]
    RegistryBusy(SubsystemId),
}

/// Held by every active event; while any lease is outstanding the registry
/// refuses to change.
#[derive(Debug)]
pub struct RegistryLease(Arc<AtomicUsize>);

impl Drop for RegistryLease {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// The subsystems of one node.
#[derive(Debug, Clone, Default)]
pub struct SubsystemRegistry {
    entries: BTreeMap<SubsystemId, SubsystemDescriptor>,
    version: u64,
    active: Arc<AtomicUsize>,
}

impl SubsystemRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        for d in super::builtin_subsystems() {
            r.register(d).expect("built-in ids are distinct");
        }
        r
    }

    pub fn register(&mut self, descriptor: SubsystemDescriptor) -> Result<SubsystemId, RegistryError> {
        let id = descriptor.subsystem_id;
        if self.entries.contains_key(&id) {
            return Err(RegistryError::DuplicateId(id));
        }
        if self.active_events() > 0 {
            return Err(RegistryError::RegistryBusy(id));
        }
        self.entries.insert(id, descriptor);
        self.version += 1;
        Ok(id)
    }

    pub fn unregister(&mut self, id: SubsystemId) -> Result<(), RegistryError> {
        if !self.entries.contains_key(&id) {
            return Err(RegistryError::NotFound(id));
        }
        if self.active_events() > 0 {
            return Err(RegistryError::RegistryBusy(id));
        }
        self.entries.remove(&id);
        self.version += 1;
        Ok(())
    }

    /// Marks an event active until the lease is dropped.
    pub fn lease(&self) -> RegistryLease {
        self.active.fetch_add(1, Ordering::SeqCst);
        RegistryLease(self.active.clone())
    }

    pub fn active_events(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }

    pub fn get(&self, id: SubsystemId) -> Result<&SubsystemDescriptor, RegistryError> {
        self.entries.get(&id).ok_or(RegistryError::NotFound(id))
    }

    pub fn contains(&self, id: SubsystemId) -> bool {
        self.entries.contains_key(&id)
    }

    /// Descriptors in checkpoint order: by `order_key`, then id.
    pub fn ordered(&self) -> Vec<SubsystemDescriptor> {
        let mut v: Vec<_> = self.entries.values().cloned().collect();
        v.sort_by_key(|d| (d.order_key, d.subsystem_id));
        v
    }

    pub fn capabilities(&self) -> Vec<Capability> {
        self.ordered().iter().map(|d| d.capability()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Bumped on every successful register or unregister.
    pub fn version(&self) -> u64 {
        self.version
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subsystem::{counter, cpu, file, mem};

    #[test]
    fn register_and_duplicate() {
        let mut r = SubsystemRegistry::new();
        assert_eq!(r.register(mem::descriptor()).unwrap().as_str(), "mem");
        assert_eq!(r.len(), 1);
        assert_eq!(r.version(), 1);
        assert!(matches!(
            r.register(mem::descriptor()),
            Err(RegistryError::DuplicateId(_))
        ));
    }

    #[test]
    fn busy_while_leased() {
        let mut r = SubsystemRegistry::with_builtins();
        let lease = r.lease();
        assert!(matches!(
            r.register(counter::descriptor()),
            Err(RegistryError::RegistryBusy(_))
        ));
        assert!(matches!(
            r.unregister(SubsystemId::new("file").unwrap()),
            Err(RegistryError::RegistryBusy(_))
        ));
        drop(lease);
        r.register(counter::descriptor()).unwrap();
        r.unregister(SubsystemId::new("counter").unwrap()).unwrap();
        assert!(matches!(
            r.unregister(SubsystemId::new("counter").unwrap()),
            Err(RegistryError::NotFound(_))
        ));
    }

    #[test]
    fn order_is_key_then_id() {
        let mut r = SubsystemRegistry::new();
        r.register(file::descriptor()).unwrap();
        r.register(counter::descriptor()).unwrap();
        r.register(cpu::descriptor()).unwrap();
        r.register(mem::descriptor()).unwrap();
        let ids: Vec<_> = r.ordered().iter().map(|d| d.subsystem_id.to_string()).collect();
        assert_eq!(ids, ["cpu", "mem", "file", "counter"]);
        let mut tie = crate::subsystem::counter::descriptor();
        tie.subsystem_id = SubsystemId::new("aaa").unwrap();
        tie.order_key = 20;
        r.register(tie).unwrap();
        let ids: Vec<_> = r.ordered().iter().map(|d| d.subsystem_id.to_string()).collect();
        assert_eq!(ids, ["cpu", "aaa", "mem", "file", "counter"]);
    }
}
