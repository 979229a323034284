//! Passport storage, status transitions and the TTL cache in front of them.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Mutex, RwLock};

use chrono::Duration;
use oap_core::crypt::{self, RegistryKey};
use oap_core::model::{self, Passport, PassportStatus};
use oap_core::Timestamp;

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("passport for {0} already exists")]
    Duplicate(String),
    #[error("no passport for {0}")]
    NotFound(String),
    #[error("agent_id `{0}` cannot be stored (allowed: letters, digits, `_`, `-`, inner `.`)")]
    BadAgentId(String),
    #[error("cannot move a {from} passport to {to}")]
    InvalidTransition { from: PassportStatus, to: PassportStatus },
    #[error("signing failed: {0}")]
    Signing(#[from] crypt::CryptError),
    #[error("registry unavailable: {0}")]
    Unavailable(String),
}

/// Applies a status change and re-signs, since `status` is covered by the hash.
pub fn transition(passport: &Passport, next: PassportStatus, key: &RegistryKey) -> Result<Passport, RegistryError> {
    if !passport.status.can_transition_to(next) {
        return Err(RegistryError::InvalidTransition { from: passport.status, to: next });
    }
    let mut updated = passport.clone();
    updated.status = next;
    crypt::sign_passport(&mut updated, key)?;
    Ok(updated)
}

fn storable(agent_id: &str) -> bool {
    !agent_id.is_empty()
        && !agent_id.starts_with('.')
        && agent_id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || b == b'.')
}

/// Signed passports, one `<agent_id>.json` file each when backed by a
/// directory. Reads go to disk every time so that out-of-band edits (for
/// example `oap passport set-status`) are seen once the cache expires.
#[derive(Debug)]
pub struct Registry {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, Passport>>,
    available: AtomicBool,
}

impl Registry {
    pub fn in_memory() -> Self {
        Registry { dir: None, memory: RwLock::new(HashMap::new()), available: AtomicBool::new(true) }
    }

    pub fn open(dir: &Path) -> Result<Self, RegistryError> {
        fs::create_dir_all(dir).map_err(|e| RegistryError::Unavailable(format!("{}: {e}", dir.display())))?;
        Ok(Registry { dir: Some(dir.to_owned()), ..Self::in_memory() })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Simulates an outage.
    pub fn set_available(&self, available: bool) {
        self.available.store(available, Ordering::SeqCst);
    }

    fn check(&self) -> Result<(), RegistryError> {
        if self.available.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(RegistryError::Unavailable("registry switched off".into()))
        }
    }

    pub fn path_for(&self, agent_id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{agent_id}.json")))
    }

    pub fn get(&self, agent_id: &str) -> Result<Option<Passport>, RegistryError> {
        self.check()?;
        if !storable(agent_id) {
            return Ok(None);
        }
        let Some(path) = self.path_for(agent_id) else {
            return Ok(self.memory.read().unwrap().get(agent_id).cloned());
        };
        match fs::read(&path) {
            Ok(bytes) => model::parse_passport(&bytes)
                .map(Some)
                .map_err(|e| RegistryError::Unavailable(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(RegistryError::Unavailable(format!("{}: {e}", path.display()))),
        }
    }

    pub fn insert(&self, passport: &Passport) -> Result<(), RegistryError> {
        self.check()?;
        let id = &passport.agent_id;
        if !storable(id) {
            return Err(RegistryError::BadAgentId(id.clone()));
        }
        let Some(path) = self.path_for(id) else {
            let mut memory = self.memory.write().unwrap();
            if memory.contains_key(id) {
                return Err(RegistryError::Duplicate(id.clone()));
            }
            memory.insert(id.clone(), passport.clone());
            return Ok(());
        };
        let unavailable = |e: std::io::Error| RegistryError::Unavailable(format!("{}: {e}", path.display()));
        let mut file = match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(RegistryError::Duplicate(id.clone()))
            }
            Err(e) => return Err(unavailable(e)),
        };
        file.write_all(passport.serialize().as_bytes()).map_err(unavailable)
    }

    /// Overwrites an existing passport.
    pub fn replace(&self, passport: &Passport) -> Result<(), RegistryError> {
        self.check()?;
        let id = &passport.agent_id;
        let Some(path) = self.path_for(id) else {
            let mut memory = self.memory.write().unwrap();
            let slot = memory.get_mut(id).ok_or_else(|| RegistryError::NotFound(id.clone()))?;
            *slot = passport.clone();
            return Ok(());
        };
        if !path.exists() {
            return Err(RegistryError::NotFound(id.clone()));
        }
        write_atomic(&path, passport.serialize().as_bytes())
            .map_err(|e| RegistryError::Unavailable(format!("{}: {e}", path.display())))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Passports looked up by agent_id, kept for `ttl` of engine-clock time.
#[derive(Debug)]
pub struct PassportCache {
    ttl: Duration,
    entries: Mutex<HashMap<String, (Passport, Timestamp)>>,
}

impl PassportCache {
    pub fn new(ttl_seconds: u64) -> Self {
        PassportCache { ttl: Duration::seconds(ttl_seconds as i64), entries: Mutex::new(HashMap::new()) }
    }

    pub fn get(&self, agent_id: &str, now: Timestamp) -> Option<Passport> {
        let mut entries = self.entries.lock().unwrap();
        match entries.get(agent_id) {
            Some((p, fetched)) if now - *fetched < self.ttl && now >= *fetched => Some(p.clone()),
            Some(_) => {
                entries.remove(agent_id);
                None
            }
            None => None,
        }
    }

    pub fn put(&self, passport: &Passport, now: Timestamp) {
        if self.ttl > Duration::zero() {
            self.entries.lock().unwrap().insert(passport.agent_id.clone(), (passport.clone(), now));
        }
    }

    pub fn invalidate(&self, agent_id: &str) {
        self.entries.lock().unwrap().remove(agent_id);
    }

    pub fn clear(&self) {
        self.entries.lock().unwrap().clear();
    }
}
