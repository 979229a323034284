//! Per-agent hash-chained audit log.
//!
//! Each entry commits to its predecessor's `entry_hash`; the first entry of a
//! chain links to the hash of the empty byte string. Entries are signed over
//! the UTF-8 bytes of their own `entry_hash`.

mod store;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;

pub use store::{ChainHead, FileStore, MemoryStore, StoreError};

use crate::canon::{self, SourceKind, Value};
use crate::clock::{format_timestamp, parse_timestamp, Timestamp};
use crate::crypt::{self, KeyringHandle, Keyring, Signature};
use crate::engine::{Decision, Verdict};
use crate::model::ModelError;

/// Write-once storage for audit entries, keyed by (agent_id, seq).
///
/// `put` must reject any entry whose seq is not exactly the agent's next
/// sequence number with [`StoreError::Conflict`]; there is no update path.
pub trait AuditStore: Send + Sync {
    fn put(&self, entry: &AuditEntry) -> Result<(), StoreError>;
    /// All entries for the agent in storage order.
    fn entries(&self, agent_id: &str) -> Result<Vec<AuditEntry>, StoreError>;
    /// The store's own record of how long the chain is and what it ends with.
    fn head(&self, agent_id: &str) -> Result<Option<ChainHead>, StoreError>;
    fn agents(&self) -> Result<Vec<String>, StoreError>;
}

/// Everything about a decision that goes into its audit entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRecord {
    pub agent_id: String,
    pub decision_id: String,
    pub capability_id: String,
    pub params_hash: String,
    pub verdict: Verdict,
    pub deny_code: String,
    pub reason: String,
    pub decided_at: Timestamp,
    pub fail_open: bool,
}

impl From<&Decision> for AuditRecord {
    fn from(d: &Decision) -> Self {
        AuditRecord {
            agent_id: d.agent_id.clone(),
            decision_id: d.decision_id.clone(),
            capability_id: d.capability_id.clone(),
            params_hash: d.params_hash.clone(),
            verdict: d.verdict,
            deny_code: d.deny_code.clone(),
            reason: d.reason.clone(),
            decided_at: d.decided_at,
            fail_open: d.fail_open,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEntry {
    pub seq: u64,
    pub agent_id: String,
    pub decision_id: String,
    pub capability_id: String,
    pub params_hash: String,
    pub verdict: Verdict,
    pub deny_code: String,
    pub reason: String,
    pub decided_at: Timestamp,
    pub fail_open: bool,
    pub prev_hash: String,
    pub key_id: String,
    pub entry_hash: String,
    pub signature: String,
}

impl AuditEntry {
    fn body(&self) -> BTreeMap<String, Value> {
        BTreeMap::from([
            ("seq".to_owned(), Value::from(self.seq)),
            ("agent_id".to_owned(), Value::from(self.agent_id.as_str())),
            ("decision_id".to_owned(), Value::from(self.decision_id.as_str())),
            ("capability_id".to_owned(), Value::from(self.capability_id.as_str())),
            ("params_hash".to_owned(), Value::from(self.params_hash.as_str())),
            ("verdict".to_owned(), Value::from(self.verdict.as_str())),
            ("deny_code".to_owned(), Value::from(self.deny_code.as_str())),
            ("reason".to_owned(), Value::from(self.reason.as_str())),
            ("decided_at".to_owned(), Value::from(format_timestamp(&self.decided_at))),
            ("fail_open".to_owned(), Value::from(self.fail_open)),
            ("prev_hash".to_owned(), Value::from(self.prev_hash.as_str())),
            ("key_id".to_owned(), Value::from(self.key_id.as_str())),
        ])
    }

    /// Hash over every field except `entry_hash` and `signature`.
    pub fn compute_hash(&self) -> String {
        canon::hash(&canon::canonicalize(&Value::Object(self.body()), SourceKind::AuditEntry))
    }

    pub fn to_value(&self) -> Value {
        let mut body = self.body();
        body.insert("entry_hash".into(), Value::from(self.entry_hash.as_str()));
        body.insert("signature".into(), Value::from(self.signature.as_str()));
        Value::Object(body)
    }

    /// One canonical JSON line, as written by the file store and by export.
    pub fn to_canonical_string(&self) -> String {
        self.to_value().to_canonical_string()
    }

    pub fn from_value(value: Value) -> Result<Self, ModelError> {
        let Value::Object(mut obj) = value else {
            return Err(ModelError::malformed("audit entry must be an object"));
        };
        let mut text = |name: &str| -> Result<String, ModelError> {
            match obj.remove(name) {
                Some(Value::String(s)) => Ok(s),
                _ => Err(ModelError::invariant(format!("audit.{name}"), "missing string")),
            }
        };
        let agent_id = text("agent_id")?;
        let decision_id = text("decision_id")?;
        let capability_id = text("capability_id")?;
        let params_hash = text("params_hash")?;
        let verdict_text = text("verdict")?;
        let deny_code = text("deny_code")?;
        let reason = text("reason")?;
        let decided_at_text = text("decided_at")?;
        let prev_hash = text("prev_hash")?;
        let key_id = text("key_id")?;
        let entry_hash = text("entry_hash")?;
        let signature = text("signature")?;
        let verdict = Verdict::parse(&verdict_text)
            .ok_or_else(|| ModelError::invariant("audit.verdict", format!("unknown verdict `{verdict_text}`")))?;
        let decided_at = parse_timestamp(&decided_at_text)
            .ok_or_else(|| ModelError::invariant("audit.decided_at", "not a canonical timestamp"))?;
        let seq = obj
            .remove("seq")
            .and_then(|v| v.as_decimal())
            .and_then(|d| u64::try_from(d).ok())
            .ok_or_else(|| ModelError::invariant("audit.seq", "missing non-negative integer"))?;
        let fail_open = obj
            .remove("fail_open")
            .and_then(|v| v.as_bool())
            .ok_or_else(|| ModelError::invariant("audit.fail_open", "missing boolean"))?;
        if let Some(extra) = obj.keys().next() {
            return Err(ModelError::invariant(format!("audit.{extra}"), "unknown field"));
        }
        Ok(AuditEntry {
            seq,
            agent_id,
            decision_id,
            capability_id,
            params_hash,
            verdict,
            deny_code,
            reason,
            decided_at,
            fail_open,
            prev_hash,
            key_id,
            entry_hash,
            signature,
        })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, ModelError> {
        Self::from_value(Value::parse(bytes)?)
    }

    fn seal(&mut self, key: &crypt::RegistryKey) -> Result<(), crypt::CryptError> {
        self.key_id = key.key_id.clone();
        self.entry_hash = self.compute_hash();
        self.signature = crypt::sign_bytes(self.entry_hash.as_bytes(), key)?.value;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TamperCause {
    HashMismatch,
    LinkBroken,
    BadSignature,
    SeqGap,
}

impl TamperCause {
    pub fn as_str(self) -> &'static str {
        match self {
            TamperCause::HashMismatch => "hash_mismatch",
            TamperCause::LinkBroken => "link_broken",
            TamperCause::BadSignature => "bad_signature",
            TamperCause::SeqGap => "seq_gap",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("chain tampered at seq {seq}: {}", .cause.as_str())]
pub struct Tampered {
    pub seq: u64,
    pub cause: TamperCause,
}

/// Walks a chain from genesis, reporting the first failure. When `head` is
/// given, the chain must also end exactly where the head says it does, which
/// is what catches truncation.
pub fn verify_entries(entries: &[AuditEntry], head: Option<&ChainHead>, keyring: &Keyring) -> Result<(), Tampered> {
    let mut prev = canon::empty_hash();
    for (position, entry) in entries.iter().enumerate() {
        let expected = position as u64;
        if entry.seq != expected {
            return Err(Tampered { seq: entry.seq, cause: TamperCause::SeqGap });
        }
        if entry.compute_hash() != entry.entry_hash {
            return Err(Tampered { seq: entry.seq, cause: TamperCause::HashMismatch });
        }
        if entry.prev_hash != prev {
            return Err(Tampered { seq: entry.seq, cause: TamperCause::LinkBroken });
        }
        let sig = Signature { value: entry.signature.clone(), key_id: entry.key_id.clone() };
        if !crypt::verify_bytes(entry.entry_hash.as_bytes(), &sig, keyring) {
            return Err(Tampered { seq: entry.seq, cause: TamperCause::BadSignature });
        }
        prev = entry.entry_hash.clone();
    }
    if let Some(head) = head {
        let len = entries.len() as u64;
        if len != head.next_seq {
            return Err(Tampered { seq: len.min(head.next_seq), cause: TamperCause::SeqGap });
        }
        if prev != head.head_hash {
            return Err(Tampered { seq: len.saturating_sub(1), cause: TamperCause::LinkBroken });
        }
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    Tampered(#[from] Tampered),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub fn verify_chain(agent_id: &str, store: &dyn AuditStore, keyring: &Keyring) -> Result<(), VerifyError> {
    let entries = match store.entries(agent_id) {
        Ok(entries) => entries,
        Err(StoreError::Corrupt { seq, .. }) => {
            return Err(Tampered { seq, cause: TamperCause::HashMismatch }.into())
        }
        Err(e) => return Err(e.into()),
    };
    let head = store.head(agent_id)?;
    verify_entries(&entries, head.as_ref(), keyring)?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditFilter {
    pub verdict: Option<Verdict>,
    pub deny_code: Option<String>,
    /// Inclusive lower bound on `decided_at`.
    pub from: Option<Timestamp>,
    /// Exclusive upper bound on `decided_at`.
    pub to: Option<Timestamp>,
}

impl AuditFilter {
    pub fn matches(&self, e: &AuditEntry) -> bool {
        self.verdict.is_none_or(|v| v == e.verdict)
            && self.deny_code.as_ref().is_none_or(|c| *c == e.deny_code)
            && self.from.is_none_or(|t| e.decided_at >= t)
            && self.to.is_none_or(|t| e.decided_at < t)
    }
}

pub fn query(agent_id: &str, filter: &AuditFilter, store: &dyn AuditStore) -> Result<Vec<AuditEntry>, StoreError> {
    Ok(store.entries(agent_id)?.into_iter().filter(|e| filter.matches(e)).collect())
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("audit store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("no active signing key for audit entries")]
    NoSigningKey,
    #[error("gave up after {0} write conflicts")]
    ConflictRetriesExhausted(u32),
}

impl From<StoreError> for AuditError {
    fn from(e: StoreError) -> Self {
        AuditError::StoreUnavailable(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WriteMode {
    /// The entry is persisted before `append` returns.
    Sync,
    /// A background writer persists entries in per-agent FIFO order.
    #[default]
    Async,
}

/// What `append` does when the store refuses the write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnStoreFailure {
    /// Roll the entry back and report the failure.
    Reject,
    /// Keep the entry queued and write it once the store recovers.
    Buffer,
}

const MAX_CONFLICT_RETRIES: u32 = 64;

#[derive(Debug)]
struct ChainState {
    /// What the store holds.
    persisted: ChainHead,
    /// Sealed entries not yet accepted by the store, in seq order.
    pending: VecDeque<AuditEntry>,
}

impl ChainState {
    fn head(&self) -> (u64, String) {
        match self.pending.back() {
            Some(e) => (e.seq + 1, e.entry_hash.clone()),
            None => (self.persisted.next_seq, self.persisted.head_hash.clone()),
        }
    }
}

struct Inner {
    store: Arc<dyn AuditStore>,
    keys: Arc<KeyringHandle>,
    chains: Mutex<HashMap<String, Arc<Mutex<ChainState>>>>,
}

impl Inner {
    /// With `guess_head`, an unreachable store is treated as an empty chain;
    /// if that turns out wrong, the first write conflicts and the pending
    /// entries are restacked onto the real head.
    fn chain(&self, agent_id: &str, guess_head: bool) -> Result<Arc<Mutex<ChainState>>, AuditError> {
        let mut chains = self.chains.lock().unwrap();
        if let Some(c) = chains.get(agent_id) {
            return Ok(Arc::clone(c));
        }
        let persisted = match self.store.head(agent_id) {
            Ok(head) => head.unwrap_or_else(ChainHead::genesis),
            Err(_) if guess_head => ChainHead::genesis(),
            Err(e) => return Err(e.into()),
        };
        let chain = Arc::new(Mutex::new(ChainState { persisted, pending: VecDeque::new() }));
        chains.insert(agent_id.to_owned(), Arc::clone(&chain));
        Ok(chain)
    }

    /// Writes pending entries in order; returns the last one written.
    fn drain(&self, agent_id: &str, chain: &mut ChainState) -> Result<Option<AuditEntry>, AuditError> {
        let mut conflicts = 0;
        let mut last = None;
        while let Some(entry) = chain.pending.front() {
            match self.store.put(entry) {
                Ok(()) => {
                    let entry = chain.pending.pop_front().expect("front exists");
                    chain.persisted = ChainHead { next_seq: entry.seq + 1, head_hash: entry.entry_hash.clone() };
                    last = Some(entry);
                }
                Err(StoreError::Conflict { .. }) => {
                    conflicts += 1;
                    if conflicts > MAX_CONFLICT_RETRIES {
                        return Err(AuditError::ConflictRetriesExhausted(MAX_CONFLICT_RETRIES));
                    }
                    self.rechain(agent_id, chain)?;
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(last)
    }

    /// Someone else wrote to this chain: restack pending entries on top of
    /// the store's current head so the chain stays linear.
    fn rechain(&self, agent_id: &str, chain: &mut ChainState) -> Result<(), AuditError> {
        chain.persisted = self.store.head(agent_id)?.unwrap_or_else(ChainHead::genesis);
        let ring = self.keys.snapshot();
        let key = ring.active_signer().ok_or(AuditError::NoSigningKey)?;
        let (mut seq, mut prev) = (chain.persisted.next_seq, chain.persisted.head_hash.clone());
        for entry in chain.pending.iter_mut() {
            entry.seq = seq;
            entry.prev_hash = prev;
            entry.seal(key).map_err(|_| AuditError::NoSigningKey)?;
            prev = entry.entry_hash.clone();
            seq += 1;
        }
        Ok(())
    }

    fn drain_all(&self) -> Result<(), AuditError> {
        let chains: Vec<(String, Arc<Mutex<ChainState>>)> =
            self.chains.lock().unwrap().iter().map(|(k, v)| (k.clone(), Arc::clone(v))).collect();
        let mut first_error = None;
        for (agent, chain) in chains {
            let mut chain = chain.lock().unwrap();
            if let Err(e) = self.drain(&agent, &mut chain) {
                first_error.get_or_insert(e);
            }
        }
        first_error.map_or(Ok(()), Err)
    }
}

enum Job {
    Drain(String),
    Flush(mpsc::Sender<Result<(), AuditError>>),
}

struct Worker {
    tx: mpsc::Sender<Job>,
    handle: Option<thread::JoinHandle<()>>,
}

/// Appends signed, chained entries to a store.
pub struct AuditLog {
    inner: Arc<Inner>,
    mode: WriteMode,
    worker: Option<Worker>,
}

impl fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuditLog").field("mode", &self.mode).finish_non_exhaustive()
    }
}

impl AuditLog {
    pub fn new(store: Arc<dyn AuditStore>, keys: Arc<KeyringHandle>, mode: WriteMode) -> Self {
        let inner = Arc::new(Inner { store, keys, chains: Mutex::new(HashMap::new()) });
        let worker = (mode == WriteMode::Async).then(|| {
            let (tx, rx) = mpsc::channel::<Job>();
            let inner = Arc::clone(&inner);
            let handle = thread::Builder::new()
                .name("oap-audit".into())
                .spawn(move || {
                    for job in rx {
                        match job {
                            Job::Drain(agent) => {
                                if let Ok(chain) = inner.chain(&agent, true) {
                                    let mut chain = chain.lock().unwrap();
                                    // Failures leave entries queued for the next attempt.
                                    let _ = inner.drain(&agent, &mut chain);
                                }
                            }
                            Job::Flush(reply) => {
                                let _ = reply.send(inner.drain_all());
                            }
                        }
                    }
                    let _ = inner.drain_all();
                })
                .expect("spawn audit writer");
            Worker { tx, handle: Some(handle) }
        });
        AuditLog { inner, mode, worker }
    }

    pub fn store(&self) -> &Arc<dyn AuditStore> {
        &self.inner.store
    }

    pub fn mode(&self) -> WriteMode {
        self.mode
    }

    pub fn append(&self, record: AuditRecord, on_failure: OnStoreFailure) -> Result<AuditEntry, AuditError> {
        let chain = self.inner.chain(&record.agent_id, on_failure == OnStoreFailure::Buffer)?;
        let mut chain = chain.lock().unwrap();
        let ring = self.inner.keys.snapshot();
        let key = ring.active_signer().ok_or(AuditError::NoSigningKey)?;

        let (seq, prev_hash) = chain.head();
        let mut entry = AuditEntry {
            seq,
            agent_id: record.agent_id,
            decision_id: record.decision_id,
            capability_id: record.capability_id,
            params_hash: record.params_hash,
            verdict: record.verdict,
            deny_code: record.deny_code,
            reason: record.reason,
            decided_at: record.decided_at,
            fail_open: record.fail_open,
            prev_hash,
            key_id: String::new(),
            entry_hash: String::new(),
            signature: String::new(),
        };
        entry.seal(key).map_err(|_| AuditError::NoSigningKey)?;
        chain.pending.push_back(entry);

        match self.mode {
            WriteMode::Async => {
                let queued = chain.pending.back().cloned().expect("just pushed");
                if let Some(w) = &self.worker {
                    let _ = w.tx.send(Job::Drain(queued.agent_id.clone()));
                }
                Ok(queued)
            }
            WriteMode::Sync => {
                let agent_id = chain.pending.back().expect("just pushed").agent_id.clone();
                match self.inner.drain(&agent_id, &mut chain) {
                    // Ours was the last pending entry, possibly restacked.
                    Ok(last) => Ok(last.expect("at least one entry written")),
                    Err(e) => match on_failure {
                        OnStoreFailure::Reject => {
                            chain.pending.pop_back();
                            Err(e)
                        }
                        OnStoreFailure::Buffer => Ok(chain.pending.back().cloned().expect("still queued")),
                    },
                }
            }
        }
    }

    /// Writes every queued entry. Returns the first store error, if any.
    pub fn flush(&self) -> Result<(), AuditError> {
        match &self.worker {
            Some(w) => {
                let (tx, rx) = mpsc::channel();
                w.tx.send(Job::Flush(tx)).map_err(|_| AuditError::StoreUnavailable("writer stopped".into()))?;
                rx.recv().map_err(|_| AuditError::StoreUnavailable("writer stopped".into()))?
            }
            None => self.inner.drain_all(),
        }
    }

    /// Entries not yet accepted by the store, across all agents.
    pub fn pending(&self) -> usize {
        let chains: Vec<_> = self.inner.chains.lock().unwrap().values().cloned().collect();
        chains.iter().map(|c| c.lock().unwrap().pending.len()).sum()
    }

    pub fn query(&self, agent_id: &str, filter: &AuditFilter) -> Result<Vec<AuditEntry>, AuditError> {
        self.flush()?;
        Ok(query(agent_id, filter, self.inner.store.as_ref())?)
    }

    pub fn verify_chain(&self, agent_id: &str) -> Result<(), VerifyError> {
        self.flush().map_err(|e| StoreError::Unavailable(e.to_string()))?;
        verify_chain(agent_id, self.inner.store.as_ref(), &self.inner.keys.snapshot())
    }
}

impl Drop for AuditLog {
    fn drop(&mut self) {
        if let Some(mut w) = self.worker.take() {
            drop(w.tx);
            if let Some(h) = w.handle.take() {
                let _ = h.join();
            }
        }
    }
}
