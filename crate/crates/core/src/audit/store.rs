use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{AuditEntry, AuditStore};
use crate::canon;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainHead {
    pub next_seq: u64,
    pub head_hash: String,
}

impl ChainHead {
    pub fn genesis() -> Self {
        ChainHead { next_seq: 0, head_hash: canon::empty_hash() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("seq {seq} for agent {agent_id} is not the next free slot")]
    Conflict { agent_id: String, seq: u64 },
    #[error("store unavailable: {0}")]
    Unavailable(String),
    #[error("corrupt record at seq {seq}: {message}")]
    Corrupt { seq: u64, message: String },
}

/// In-memory store for tests and ephemeral runs. Can be switched off to
/// simulate an outage.
#[derive(Debug)]
pub struct MemoryStore {
    chains: Mutex<HashMap<String, Vec<AuditEntry>>>,
    available: AtomicBool,
}

impl Default for MemoryStore {
    fn default() -> Self {
        MemoryStore { chains: Mutex::new(HashMap::new()), available: AtomicBool::new(true) }
    }
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_available(&self, available: bool) {
        self.available.store(available, Ordering::SeqCst);
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.available.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(StoreError::Unavailable("memory store switched off".into()))
        }
    }
}

impl AuditStore for MemoryStore {
    fn put(&self, entry: &AuditEntry) -> Result<(), StoreError> {
        self.check()?;
        let mut chains = self.chains.lock().unwrap();
        let chain = chains.entry(entry.agent_id.clone()).or_default();
        if entry.seq != chain.len() as u64 {
            return Err(StoreError::Conflict { agent_id: entry.agent_id.clone(), seq: entry.seq });
        }
        chain.push(entry.clone());
        Ok(())
    }

    fn entries(&self, agent_id: &str) -> Result<Vec<AuditEntry>, StoreError> {
        self.check()?;
        Ok(self.chains.lock().unwrap().get(agent_id).cloned().unwrap_or_default())
    }

    fn head(&self, agent_id: &str) -> Result<Option<ChainHead>, StoreError> {
        self.check()?;
        let chains = self.chains.lock().unwrap();
        Ok(chains
            .get(agent_id)
            .and_then(|c| c.last())
            .map(|e| ChainHead { next_seq: e.seq + 1, head_hash: e.entry_hash.clone() }))
    }

    fn agents(&self) -> Result<Vec<String>, StoreError> {
        self.check()?;
        let mut agents: Vec<String> = self.chains.lock().unwrap().keys().cloned().collect();
        agents.sort();
        Ok(agents)
    }
}

const SEGMENT_ENTRIES: u64 = 4096;
const INDEX_FILE: &str = "index";

/// Append-only segment files under `<root>/<agent>/`:
/// `<segment>.log` holds u32 big-endian length-prefixed canonical entries,
/// `index` holds the chain head.
#[derive(Debug)]
pub struct FileStore {
    root: PathBuf,
    heads: Mutex<HashMap<String, ChainHead>>,
}

impl FileStore {
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(root).map_err(|e| unavailable(root, e))?;
        Ok(FileStore { root: root.to_owned(), heads: Mutex::new(HashMap::new()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn agent_dir(&self, agent_id: &str) -> PathBuf {
        self.root.join(encode_name(agent_id))
    }

    fn read_head(&self, agent_id: &str) -> Result<Option<ChainHead>, StoreError> {
        let path = self.agent_dir(agent_id).join(INDEX_FILE);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| StoreError::Corrupt { seq: 0, message: format!("index: {e}") }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(unavailable(&path, e)),
        }
    }
}

fn unavailable(path: &Path, e: std::io::Error) -> StoreError {
    StoreError::Unavailable(format!("{}: {e}", path.display()))
}

fn encode_name(agent_id: &str) -> String {
    let mut out = String::with_capacity(agent_id.len());
    for (i, b) in agent_id.bytes().enumerate() {
        let plain = b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || (b == b'.' && i > 0);
        if plain {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn decode_name(name: &str) -> Option<String> {
    let bytes = name.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = std::str::from_utf8(bytes.get(i + 1..i + 3)?).ok()?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

impl AuditStore for FileStore {
    fn put(&self, entry: &AuditEntry) -> Result<(), StoreError> {
        let mut heads = self.heads.lock().unwrap();
        let head = match heads.get(&entry.agent_id) {
            Some(h) => h.clone(),
            None => self.read_head(&entry.agent_id)?.unwrap_or_else(ChainHead::genesis),
        };
        if entry.seq != head.next_seq {
            return Err(StoreError::Conflict { agent_id: entry.agent_id.clone(), seq: entry.seq });
        }

        let dir = self.agent_dir(&entry.agent_id);
        fs::create_dir_all(&dir).map_err(|e| unavailable(&dir, e))?;
        let segment = dir.join(format!("{:06}.log", entry.seq / SEGMENT_ENTRIES));
        let record = entry.to_canonical_string();
        let mut buf = Vec::with_capacity(record.len() + 4);
        buf.extend_from_slice(&(record.len() as u32).to_be_bytes());
        buf.extend_from_slice(record.as_bytes());
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&segment)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| unavailable(&segment, e))?;

        let next = ChainHead { next_seq: entry.seq + 1, head_hash: entry.entry_hash.clone() };
        let tmp = dir.join("index.tmp");
        let index = serde_json::to_vec(&next).expect("head serializes");
        fs::write(&tmp, index)
            .and_then(|_| fs::rename(&tmp, dir.join(INDEX_FILE)))
            .map_err(|e| unavailable(&tmp, e))?;
        heads.insert(entry.agent_id.clone(), next);
        Ok(())
    }

    fn entries(&self, agent_id: &str) -> Result<Vec<AuditEntry>, StoreError> {
        let dir = self.agent_dir(agent_id);
        let mut segments: Vec<PathBuf> = match fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|x| x == "log"))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(unavailable(&dir, e)),
        };
        segments.sort();

        let mut entries = Vec::new();
        for segment in segments {
            let bytes = fs::read(&segment).map_err(|e| unavailable(&segment, e))?;
            let mut at = 0;
            while at < bytes.len() {
                let seq = entries.len() as u64;
                let corrupt = |message: &str| StoreError::Corrupt { seq, message: message.to_owned() };
                let len_bytes: [u8; 4] =
                    bytes.get(at..at + 4).ok_or_else(|| corrupt("truncated length"))?.try_into().expect("4 bytes");
                let len = u32::from_be_bytes(len_bytes) as usize;
                let record = bytes.get(at + 4..at + 4 + len).ok_or_else(|| corrupt("truncated record"))?;
                entries.push(AuditEntry::parse(record).map_err(|e| corrupt(&e.to_string()))?);
                at += 4 + len;
            }
        }
        Ok(entries)
    }

    fn head(&self, agent_id: &str) -> Result<Option<ChainHead>, StoreError> {
        if let Some(h) = self.heads.lock().unwrap().get(agent_id) {
            return Ok(Some(h.clone()));
        }
        self.read_head(agent_id)
    }

    fn agents(&self) -> Result<Vec<String>, StoreError> {
        let mut agents: Vec<String> = fs::read_dir(&self.root)
            .map_err(|e| unavailable(&self.root, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| decode_name(&e.file_name().to_string_lossy()))
            .collect();
        agents.sort();
        Ok(agents)
    }
}
