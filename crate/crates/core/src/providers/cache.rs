use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::ProviderError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Miss,
}

/// Content-addressed map persisted as a single JSON object.
///
/// Lookups take a read lock; a miss serializes on a per-key lock so that two
/// threads asking for the same key produce a single computation.
pub struct JsonCache<V> {
    path: Option<PathBuf>,
    entries: RwLock<BTreeMap<String, V>>,
    in_flight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    dirty: AtomicBool,
}

impl<V> JsonCache<V>
where
    V: Clone + Serialize + DeserializeOwned,
{
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(BTreeMap::new()),
            in_flight: Mutex::new(HashMap::new()),
            dirty: AtomicBool::new(false),
        }
    }

    /// Opens (or prepares to create) the cache file at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref().to_path_buf();
        let entries = if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(|e| ProviderError::Cache(e.to_string()))?;
            serde_json::from_str(&text)
                .map_err(|e| ProviderError::Cache(format!("{}: {e}", path.display())))?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            path: Some(path),
            entries: RwLock::new(entries),
            in_flight: Mutex::new(HashMap::new()),
            dirty: AtomicBool::new(false),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<V> {
        self.entries.read().get(key).cloned()
    }

    pub fn insert(&self, key: String, value: V) {
        self.entries.write().insert(key, value);
        self.dirty.store(true, Ordering::SeqCst);
    }

    pub fn update(&self, key: &str, f: impl FnOnce(&mut V)) {
        if let Some(v) = self.entries.write().get_mut(key) {
            f(v);
            self.dirty.store(true, Ordering::SeqCst);
        }
    }

    pub fn get_or_try_insert_with<E>(
        &self,
        key: &str,
        compute: impl FnOnce() -> Result<V, E>,
    ) -> Result<(V, CacheStatus), E> {
        if let Some(v) = self.get(key) {
            return Ok((v, CacheStatus::Hit));
        }
        let lock = self
            .in_flight
            .lock()
            .entry(key.to_owned())
            .or_insert_with(|| Arc::new(Mutex::new(())))
            .clone();
        let _guard = lock.lock();
        let result = match self.get(key) {
            Some(v) => Ok((v, CacheStatus::Hit)),
            None => compute().map(|v| {
                self.insert(key.to_owned(), v.clone());
                (v, CacheStatus::Miss)
            }),
        };
        self.in_flight.lock().remove(key);
        result
    }

    /// Writes the file if anything changed since the last flush. The write
    /// goes to a sibling temp file first and is then renamed into place.
    pub fn flush(&self) -> Result<(), ProviderError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        if !self.dirty.swap(false, Ordering::SeqCst) {
            return Ok(());
        }
        let io = |e: std::io::Error| ProviderError::Cache(format!("{}: {e}", path.display()));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let text = {
            let entries = self.entries.read();
            serde_json::to_string_pretty(&*entries).map_err(|e| ProviderError::Cache(e.to_string()))?
        };
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)?;
        Ok(())
    }
}
