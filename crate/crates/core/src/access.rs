//! Dependency declarations and the conflict relation between accesses.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::RuntimeError;

/// Opaque identifier of one memory location (a block base address, a region id, ...).
///
/// Two accesses only ever interact when their keys compare equal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccessKey(pub u64);

impl AccessKey {
    /// Key for a raw pointer, matching the usual "block base address" convention.
    pub fn of<T>(ptr: *const T) -> Self {
        AccessKey(ptr as usize as u64)
    }
}

impl fmt::Display for AccessKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}", self.0)
    }
}

impl From<u64> for AccessKey {
    fn from(v: u64) -> Self {
        AccessKey(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessMode {
    In,
    Out,
    InOut,
}

impl AccessMode {
    /// True for `Out` and `InOut`.
    #[inline]
    pub fn writes(self) -> bool {
        !matches!(self, AccessMode::In)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataAccess {
    pub key: AccessKey,
    pub mode: AccessMode,
}

impl DataAccess {
    pub fn new(key: impl Into<AccessKey>, mode: AccessMode) -> Self {
        DataAccess { key: key.into(), mode }
    }

    pub fn read(key: impl Into<AccessKey>) -> Self {
        Self::new(key, AccessMode::In)
    }

    pub fn write(key: impl Into<AccessKey>) -> Self {
        Self::new(key, AccessMode::Out)
    }

    pub fn read_write(key: impl Into<AccessKey>) -> Self {
        Self::new(key, AccessMode::InOut)
    }
}

/// Whether two accesses must be ordered: same key and at least one writer.
#[inline]
pub fn conflicts(a: DataAccess, b: DataAccess) -> bool {
    a.key == b.key && (a.mode.writes() || b.mode.writes())
}

/// Sorts an access list by key and rejects repeated keys.
pub fn normalize_access_list(mut list: Vec<DataAccess>) -> Result<Vec<DataAccess>, RuntimeError> {
    list.sort_by_key(|a| a.key);
    if let Some(w) = list.windows(2).find(|w| w[0].key == w[1].key) {
        return Err(RuntimeError::DuplicateKey(w[0].key));
    }
    Ok(list)
}

/// True when the two (normalized or not) lists name at least one common key.
pub fn shares_key(a: &[DataAccess], b: &[DataAccess]) -> bool {
    a.iter().any(|x| b.iter().any(|y| x.key == y.key))
}
