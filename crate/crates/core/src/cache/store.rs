use std::collections::HashMap;
use std::fs;
use std::io::{self, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use log::warn;
use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub file_name: String,
    pub content_length: u64,
    pub origin_ip: Ipv4Addr,
    pub stored_at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_type: Option<String>,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("object of {len} bytes cannot fit in a {capacity}-byte store")]
    TooLarge { len: u64, capacity: u64 },
    #[error("entry for '{0}' declares a length different from its body")]
    LengthMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug)]
struct Slot {
    entry: CacheEntry,
    last_used: AtomicU64,
}

#[derive(Debug, Default)]
struct Index {
    slots: HashMap<String, Slot>,
    used: u64,
}

#[derive(Serialize, Deserialize)]
struct IndexRecord {
    #[serde(flatten)]
    entry: CacheEntry,
    last_used: u64,
}

/// Body-only object store on disk with LRU eviction by last use.
///
/// Objects live at `<dir>/objects/<percent-encoded name>`; `index.json`
/// maps names to their metadata and is rewritten atomically on every
/// store or eviction. Readers share the index; writers are exclusive.
#[derive(Debug)]
pub struct ContentStore {
    dir: PathBuf,
    capacity: u64,
    index: RwLock<Index>,
    tick: AtomicU64,
}

const INDEX_FILE: &str = "index.json";

impl ContentStore {
    /// Opens `dir`, recovering entries from a previous run whose object
    /// files are intact.
    pub fn open(dir: impl AsRef<Path>, capacity: u64) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("objects"))?;
        let mut index = Index::default();
        let mut tick = 0;
        match fs::read(dir.join(INDEX_FILE)) {
            Ok(bytes) => {
                let records: Vec<IndexRecord> = serde_json::from_slice(&bytes)
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                for r in records {
                    let path = object_path(&dir, &r.entry.file_name);
                    match fs::metadata(&path) {
                        Ok(m) if m.len() == r.entry.content_length => {
                            tick = tick.max(r.last_used);
                            index.used += r.entry.content_length;
                            index.slots.insert(
                                r.entry.file_name.clone(),
                                Slot {
                                    entry: r.entry,
                                    last_used: AtomicU64::new(r.last_used),
                                },
                            );
                        }
                        _ => warn!(
                            "dropping index entry '{}' with missing or damaged object",
                            r.entry.file_name
                        ),
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        let store = ContentStore {
            dir,
            capacity,
            index: RwLock::new(index),
            tick: AtomicU64::new(tick + 1),
        };
        {
            let mut index = store.index.write().unwrap();
            if index.used > capacity {
                store.evict_until(&mut index, 0);
                store.write_index(&index)?;
            }
        }
        Ok(store)
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used_bytes(&self) -> u64 {
        self.index.read().unwrap().used
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.read().unwrap().slots.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<CacheEntry> {
        self.index
            .read()
            .unwrap()
            .slots
            .get(name)
            .map(|s| s.entry.clone())
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.index.read().unwrap().slots.keys().cloned().collect();
        v.sort();
        v
    }

    fn next_tick(&self) -> u64 {
        self.tick.fetch_add(1, Ordering::Relaxed)
    }

    /// Stores `body` under `entry.file_name`, replacing any previous
    /// object of that name. Returns the names evicted to make room.
    pub fn put(&self, entry: CacheEntry, body: &[u8]) -> Result<Vec<String>, StoreError> {
        let len = body.len() as u64;
        if entry.content_length != len {
            return Err(StoreError::LengthMismatch(entry.file_name));
        }
        if len > self.capacity {
            return Err(StoreError::TooLarge {
                len,
                capacity: self.capacity,
            });
        }
        let mut index = self.index.write().unwrap();
        if let Some(old) = index.slots.remove(&entry.file_name) {
            index.used -= old.entry.content_length;
        }
        let evicted = self.evict_until(&mut index, len);

        let path = object_path(&self.dir, &entry.file_name);
        let tmp = path.with_extension("part");
        let written = fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(body).and_then(|_| f.sync_data()))
            .and_then(|_| fs::rename(&tmp, &path));
        if let Err(e) = written {
            let _ = fs::remove_file(&tmp);
            self.write_index(&index)?;
            return Err(e.into());
        }

        index.used += len;
        index.slots.insert(
            entry.file_name.clone(),
            Slot {
                entry,
                last_used: AtomicU64::new(self.next_tick()),
            },
        );
        self.write_index(&index)?;
        Ok(evicted)
    }

    /// Persists recency updates made by [`ContentStore::get`]. Also runs
    /// on drop.
    pub fn flush(&self) -> io::Result<()> {
        self.write_index(&self.index.read().unwrap())
    }

    /// Reads an object and marks it most recently used. The new recency
    /// reaches disk on the next write or flush.
    pub fn get(&self, name: &str) -> io::Result<Option<(CacheEntry, Vec<u8>)>> {
        let index = self.index.read().unwrap();
        let Some(slot) = index.slots.get(name) else {
            return Ok(None);
        };
        slot.last_used.store(self.next_tick(), Ordering::Relaxed);
        let body = fs::read(object_path(&self.dir, name))?;
        Ok(Some((slot.entry.clone(), body)))
    }

    pub fn remove(&self, name: &str) -> Result<bool, StoreError> {
        let mut index = self.index.write().unwrap();
        let Some(slot) = index.slots.remove(name) else {
            return Ok(false);
        };
        index.used -= slot.entry.content_length;
        let _ = fs::remove_file(object_path(&self.dir, name));
        self.write_index(&index)?;
        Ok(true)
    }

    /// Evicts least recently used objects until `incoming` more bytes fit.
    fn evict_until(&self, index: &mut Index, incoming: u64) -> Vec<String> {
        let mut evicted = Vec::new();
        while index.used + incoming > self.capacity {
            let victim = index
                .slots
                .iter()
                .min_by_key(|(name, s)| (s.last_used.load(Ordering::Relaxed), (*name).clone()))
                .map(|(name, _)| name.clone());
            let Some(victim) = victim else { break };
            let slot = index.slots.remove(&victim).expect("victim present");
            index.used -= slot.entry.content_length;
            if let Err(e) = fs::remove_file(object_path(&self.dir, &victim)) {
                warn!("could not remove evicted object '{victim}': {e}");
            }
            evicted.push(victim);
        }
        evicted
    }

    fn write_index(&self, index: &Index) -> io::Result<()> {
        let mut records: Vec<IndexRecord> = index
            .slots
            .values()
            .map(|s| IndexRecord {
                entry: s.entry.clone(),
                last_used: s.last_used.load(Ordering::Relaxed),
            })
            .collect();
        records.sort_by(|a, b| a.entry.file_name.cmp(&b.entry.file_name));
        let path = self.dir.join(INDEX_FILE);
        let tmp = self.dir.join("index.json.part");
        fs::write(&tmp, serde_json::to_vec_pretty(&records)?)?;
        fs::rename(tmp, path)
    }
}

impl Drop for ContentStore {
    fn drop(&mut self) {
        if let Err(e) = self.flush() {
            warn!("could not persist the content index: {e}");
        }
    }
}

fn object_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("objects")
        .join(utf8_percent_encode(name, NON_ALPHANUMERIC).to_string())
}
